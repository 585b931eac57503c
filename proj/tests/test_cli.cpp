#include "doctest.h"

#include "hmt/error.hpp"

#include "json.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path& workdir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "hmt_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string p(const std::string& name) { return (workdir() / name).string(); }

/// Runs the CLI with stdout and stderr captured; returns the exit status.
int run(const std::string& args, std::string* output = nullptr, const std::string& env = "") {
  const std::string log = p("last_output.txt");
  const std::string cmd = env + (env.empty() ? "" : " ") + "\"" HMT_CLI_PATH "\" " + args + " > \"" + log + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  if (output != nullptr) {
    std::ifstream in(log);
    std::ostringstream os;
    os << in.rdbuf();
    *output = os.str();
  }
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

json report(const std::string& name) { return json::parse(slurp(p(name))); }

/// Small corpus plus a quickly trained model shared by the tests below.
void ensure_corpus() {
  static bool done = false;
  if (done) return;
  REQUIRE(run("synth --seed 1 --records 2 --seconds 3 --source a,b --out " + p("rec.jsonl")) == 0);
  REQUIRE(run("train-tokenizer --seed 2 --in " + p("rec.jsonl") + " --steps 5 --batch 16 --codebook 16 --code-dim 8" +
              " --holdout 4 --jobs 1 --out " + p("m.hgrq") + " --report " + p("train.json")) == 0);
  done = true;
}

}  // namespace

TEST_CASE("help, usage errors and exit codes") {
  std::string out;
  CHECK(run("--help", &out) == 0);
  for (const char* sub : {"train-tokenizer", "tokenize", "detokenize", "align", "augment", "balance",
                          "validate-stream", "evaluate", "ingest", "clean", "window", "templates", "synth",
                          "skeleton"}) {
    CHECK_MESSAGE(out.find(sub) != std::string::npos, sub);
  }
  CHECK(run("", &out) == 2);
  CHECK(run("tokenize --model", &out) == 2);
  CHECK(run("synth --out " + p("x.jsonl"), &out) == 2);  // seed is mandatory
  CHECK(run("synth --seed 1 --bogus --out " + p("x.jsonl"), &out) == 2);
  CHECK(run("no-such-command", &out) == 2);

  // Seed from the environment.
  CHECK(run("synth --records 1 --seconds 1 --out " + p("env.jsonl"), &out, "HMT_SEED=9") == 0);
  CHECK(run("synth --seed 9 --records 1 --seconds 1 --out " + p("flag.jsonl")) == 0);
  CHECK(slurp(p("env.jsonl")) == slurp(p("flag.jsonl")));

  // Data errors map to 3 with a structured message.
  std::ofstream(p("broken.jsonl")) << "{\"id\": \"x\", \"source\": \"s\", \"fps\": 15, \"frames\": []}\n";
  CHECK(run("ingest --in " + p("broken.jsonl") + " --out " + p("o.jsonl"), &out) == 3);
  const json err = json::parse(out.substr(0, out.find('\n')));
  CHECK(err.at("error") == "ingest");
  CHECK(err.at("message").get<std::string>().find("intrinsics") != std::string::npos);

  CHECK(hmt::exit_code_for(hmt::Errc::usage) == 2);
  CHECK(hmt::exit_code_for(hmt::Errc::training_diverged) == 4);
  CHECK(hmt::exit_code_for(hmt::Errc::invalid_token) == 3);
}

TEST_CASE("divergent training exits with the numeric code") {
  ensure_corpus();
  std::string out;
  CHECK(run("train-tokenizer --seed 2 --in " + p("rec.jsonl") + " --steps 10 --batch 8 --codebook 16 --code-dim 8" +
                " --lr 1e8 --out " + p("bad.hgrq"),
            &out) == 4);
  CHECK(out.find("training_diverged") != std::string::npos);
}

TEST_CASE("tokenize, validate, detokenize and evaluate") {
  ensure_corpus();
  const json tr = report("train.json");
  CHECK(tr.at("report_version") == 1);
  CHECK(tr.at("held_out_mpjpe_cm").get<double>() > 0.0);

  REQUIRE(run("tokenize --model " + p("m.hgrq") + " --in " + p("rec.jsonl") + " --out " + p("tok.txt") +
              " --vocab-out " + p("vocab.json") + " --report " + p("tok.json")) == 0);
  const json meta = json::parse(slurp(p("tok.txt.meta.json")));
  const json vocab = json::parse(slurp(p("vocab.json")));
  const int motion_begin = vocab.at("motion").at(0);
  const int motion_end = vocab.at("motion").at(1);
  std::istringstream lines(slurp(p("tok.txt")));
  std::size_t i = 0;
  for (std::string line; std::getline(lines, line); ++i) {
    std::istringstream ids(line);
    int motion = 0;
    for (int id; ids >> id;) motion += id >= motion_begin && id < motion_end;
    const auto& rec = meta.at("records").at(i);
    CHECK(motion == 128 * static_cast<int>(rec.at("hands").size()) * rec.at("seconds").get<int>());
  }
  CHECK(i == 4);
  CHECK(report("tok.json").at("tokens_per_hand_second") == 128);

  REQUIRE(run("validate-stream --vocab " + p("vocab.json") + " --in " + p("tok.txt") + " --report " + p("val.json")) == 0);
  CHECK(report("val.json").at("valid_rate") == 1.0);

  // A corrupted line is reported with its position.
  {
    std::string text = slurp(p("tok.txt"));
    std::ofstream(p("bad_tok.txt")) << "5 " << std::to_string(motion_begin) << "\n" << text;
  }
  REQUIRE(run("validate-stream --vocab " + p("vocab.json") + " --in " + p("bad_tok.txt") + " --report " + p("bad.json")) == 0);
  const json bad = report("bad.json");
  CHECK(bad.at("valid_rate") == doctest::Approx(0.8));
  CHECK(bad.at("failures").at(0).at("line") == 1);
  CHECK(bad.at("failures").at(0).at("position") == 1);

  std::ofstream(p("gt.jsonl")) << "\"rec.jsonl\"\n";
  REQUIRE(run("evaluate --pred " + p("gt.jsonl") + " --gt " + p("gt.jsonl") + " --report " + p("self.json")) == 0);
  const json self = report("self.json");
  CHECK(self.at("mpjpe") == 0.0);
  CHECK(self.at("mwte") == 0.0);
  CHECK(self.at("pa_mpjpe").get<double>() < 1e-9);

  REQUIRE(run("detokenize --model " + p("m.hgrq") + " --in " + p("tok.txt") + " --out " + p("dec.jsonl")) == 0);
  std::ofstream(p("pred.jsonl")) << "{\"path\": \"" << p("dec.jsonl") << "\"}\n";
  REQUIRE(run("evaluate --pred " + p("pred.jsonl") + " --gt " + p("gt.jsonl") + " --streams " + p("tok.txt") +
              " --vocab " + p("vocab.json") + " --report " + p("ev.json")) == 0);
  const json ev = report("ev.json");
  CHECK(ev.at("mpjpe").get<double>() > 0.0);
  CHECK(ev.at("pa_mpjpe").get<double>() <= ev.at("mpjpe").get<double>());
  CHECK(ev.at("valid_rate") == 1.0);
  CHECK(ev.at("fid").is_null());

  // Embedding metrics on identical sets.
  {
    std::ofstream e(p("emb.jsonl"));
    for (int k = 0; k < 6; ++k) e << "[" << k << ", " << (k * k) % 5 << ", 1]\n";
  }
  REQUIRE(run("evaluate --pred-embeddings " + p("emb.jsonl") + " --gt-embeddings " + p("emb.jsonl") + " --k 1" +
              " --report " + p("emb.json")) == 0);
  CHECK(std::abs(report("emb.json").at("fid").get<double>()) < 1e-8);
  CHECK(report("emb.json").at("r_at_k") == 1.0);
}

TEST_CASE("fixed seeds reproduce artifacts bitwise") {
  ensure_corpus();
  REQUIRE(run("train-tokenizer --seed 2 --in " + p("rec.jsonl") + " --steps 5 --batch 16 --codebook 16 --code-dim 8" +
              " --holdout 4 --jobs 3 --out " + p("m3.hgrq")) == 0);
  CHECK(slurp(p("m.hgrq")) == slurp(p("m3.hgrq")));

  std::ofstream(p("bal.json")) << R"({"targets": {"a": 30, "b": 12}})";
  const std::string common = " --in " + p("rec.jsonl") + " --model " + p("m.hgrq") + " --templates " HMT_ASSET_DIR
                             "/templates.json";
  for (int rep = 0; rep < 2; ++rep) {
    const std::string tag = std::to_string(rep);
    REQUIRE(run("balance --seed 4 --config " + p("bal.json") + common + " --out " + p("bal" + tag + ".jsonl") +
                " --manifest " + p("man" + tag + ".jsonl") + " --report " + p("balr" + tag + ".json")) == 0);
    REQUIRE(run("templates --seed 4" + common + " --out " + p("tpl" + tag + ".jsonl") + " --manifest " +
                p("tman" + tag + ".jsonl")) == 0);
  }
  CHECK(slurp(p("man0.jsonl")) == slurp(p("man1.jsonl")));
  CHECK(slurp(p("bal0.jsonl")) == slurp(p("bal1.jsonl")));
  CHECK(slurp(p("tman0.jsonl")) == slurp(p("tman1.jsonl")));
  const json counts = report("balr0.json").at("counts");
  CHECK(counts.at("a").at("generation") == 10);
  CHECK(counts.at("b").at("prediction") == 4);
  CHECK(report("balr0.json").at("augmented").get<int>() > 0);

  REQUIRE(run("balance --seed 5 --config " + p("bal.json") + common + " --out " + p("bal5.jsonl") + " --manifest " +
              p("man5.jsonl")) == 0);
  CHECK(slurp(p("man0.jsonl")) != slurp(p("man5.jsonl")));
}

TEST_CASE("record tools") {
  ensure_corpus();
  REQUIRE(run("ingest --in " + p("rec.jsonl") + " --out " + p("ing.jsonl") + " --report " + p("ing.json")) == 0);
  CHECK(report("ing.json").at("records") == 4);
  REQUIRE(run("clean --in " + p("rec.jsonl") + " --out " + p("clean.jsonl") + " --report " + p("clean.json")) == 0);
  CHECK(report("clean.json").at("total").at("filled") == 0);
  REQUIRE(run("window --in " + p("rec.jsonl") + " --out " + p("win.json") + " --report " + p("winr.json")) == 0);
  CHECK(report("winr.json").at("windows") == 4 * 5);

  REQUIRE(run("augment --in " + p("rec.jsonl") + " --out " + p("aug.jsonl") + " --kind depth --lambda 1.2 --report " +
              p("aug.json")) == 0);
  const json aug = report("aug.json");
  CHECK(aug.at("augments").at(0).at("augment").at("lambda_s") == 1.2);
  std::string out;
  CHECK(run("augment --in " + p("rec.jsonl") + " --out " + p("aug.jsonl") + " --kind depth --lambda 3", &out) == 3);

  std::ofstream(p("k.json")) << R"({"fx": 500, "fy": 500, "cx": 320, "cy": 240, "width": 640, "height": 480})";
  REQUIRE(run("align --src " + p("k.json") + " --normalize-fov --report " + p("align.json")) == 0);
  const json al = report("align.json");
  CHECK(al.at("map").at("sx") == doctest::Approx(320.0 / 500.0));
  CHECK(al.at("target").at("fx") == 320.0);

  REQUIRE(run("skeleton --out " + p("skel.json")) == 0);
  CHECK(slurp(p("skel.json")) == slurp(HMT_ASSET_DIR "/skeleton_default.json"));
}
