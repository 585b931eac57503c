// hmt: command-line front end for tokenizer training, token streams,
// camera alignment, dataset preparation and evaluation.

#include "hmt/alignment.hpp"
#include "hmt/codec.hpp"
#include "hmt/error.hpp"
#include "hmt/image.hpp"
#include "hmt/mano.hpp"
#include "hmt/metrics.hpp"
#include "hmt/pipeline.hpp"
#include "hmt/rng.hpp"
#include "hmt/synth.hpp"
#include "hmt/tokenizer.hpp"
#include "hmt/training.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hmt;

namespace {

constexpr int kReportVersion = 1;

struct Common {
  std::uint64_t seed = 0;
  int jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  std::string report;
  std::string skeleton;
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(Errc::io, path + ": cannot write");
  out << text;
  if (!out) fail(Errc::io, path + ": write failed");
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::io, path + ": cannot open");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

json read_json(const std::string& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    fail(Errc::invalid_input, path + ": " + e.what());
  }
}

std::vector<std::string> read_lines(const std::string& path) {
  std::istringstream in(read_text(path));
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out.push_back(line);
  }
  return out;
}

bool blank(const std::string& s) { return s.find_first_not_of(" \t") == std::string::npos; }

void emit_report(const std::string& command, const std::string& path, json body) {
  body["report_version"] = kReportVersion;
  body["command"] = command;
  if (!path.empty()) write_text(path, body.dump(2) + "\n");
}

HandSkeleton load_skeleton(const Common& c) {
  return c.skeleton.empty() ? HandSkeleton::rest_default() : HandSkeleton::load(c.skeleton);
}

Vocabulary model_vocabulary(const PartTokenizer& tok) {
  return Vocabulary::standard(tok.config().vocabulary_size(), tok.config().tokens_per_hand_second());
}

std::vector<Side> complete_hands(const SequenceRecord& r) {
  std::vector<Side> out;
  for (Side s : {Side::left, Side::right}) {
    if (r.hand_complete(s)) out.push_back(s);
  }
  return out;
}

std::vector<HandPose> hand_poses(const SequenceRecord& r, Side s, int begin, int end) {
  std::vector<HandPose> out;
  for (int t = begin; t < end; ++t) out.push_back(*r.frames[static_cast<std::size_t>(t)].hand(s));
  return out;
}

/// Every 1 s window of every complete hand.
std::vector<std::vector<HandPose>> record_windows(const std::vector<SequenceRecord>& records) {
  std::vector<std::vector<HandPose>> out;
  for (const auto& r : records) {
    const Windowing w = chunk_and_window(r);
    for (Side s : complete_hands(r)) {
      for (const auto& win : w.windows) out.push_back(hand_poses(r, s, win.begin, win.begin + kWindowFrames));
    }
  }
  return out;
}

/// Back-to-back 1 s windows of synthetic single-hand motion.
std::vector<std::vector<HandPose>> synthetic_windows(int count, Rng rng) {
  std::vector<std::vector<HandPose>> out;
  while (static_cast<int>(out.size()) < count) {
    const Side side = rng.bernoulli(0.5) ? Side::left : Side::right;
    const auto poses = synthesize_motion(rng, 10 * kWindowFrames, kPipelineFps, side);
    for (std::size_t s = 0; s + kWindowFrames <= poses.size() && static_cast<int>(out.size()) < count;
         s += kWindowFrames) {
      out.emplace_back(poses.begin() + static_cast<long>(s), poses.begin() + static_cast<long>(s + kWindowFrames));
    }
  }
  return out;
}

SampleContext sample_context(const PartTokenizer& tok, const HandSkeleton& skel, const std::string& templates) {
  SampleContext ctx;
  ctx.tokenizer = &tok;
  ctx.skeleton = &skel;
  ctx.vocab = model_vocabulary(tok);
  ctx.templates = TemplateSet::load(templates);
  return ctx;
}

void write_samples(const std::string& path, const std::vector<InstructionSample>& samples) {
  std::string text;
  for (const auto& s : samples) text += s.to_json().dump() + "\n";
  write_text(path, text);
}

json counts_json(const std::vector<InstructionSample>& samples) {
  json c = json::object();
  for (const auto& s : samples) {
    auto& slot = c[s.source][std::string(task_name(s.task))];
    slot = slot.is_null() ? 1 : slot.get<int>() + 1;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Commands

struct SynthArgs {
  int records = 4;
  double seconds = 10;
  std::vector<std::string> sources{"synthetic"};
  bool one_hand = false;
  std::string out;
};

int run_synth(const SynthArgs& a, const Common& c) {
  static const char* verbs[] = {"pick up", "rotate", "push", "open", "pour from", "wipe", "place", "squeeze"};
  static const char* objects[] = {"the cup", "a bottle", "the lid", "a box", "the sponge", "a phone", "the drawer"};
  if (a.records < 0 || !(a.seconds > 0)) fail(Errc::usage, "synth: records >= 0 and seconds > 0 required");
  const Rng root(c.seed);
  std::vector<SequenceRecord> out;
  for (const auto& source : a.sources) {
    for (int i = 0; i < a.records; ++i) {
      SequenceRecord r;
      r.id = source + "_" + std::to_string(i);
      r.source = source;
      r.fps = kPipelineFps;
      r.intrinsics = {600, 600, 320, 240, 640, 480};
      Rng rng = root.split("synth:" + r.id);
      const int frames = static_cast<int>(std::lround(a.seconds * kPipelineFps));
      auto right = synthesize_motion(rng, frames, kPipelineFps, Side::right);
      auto left = synthesize_motion(rng, frames, kPipelineFps, Side::left);
      r.frames.resize(static_cast<std::size_t>(frames));
      for (int t = 0; t < frames; ++t) {
        right[t].tau.x() += 0.15;
        r.frames[t].right = right[t];
        if (!a.one_hand) {
          left[t].tau.x() -= 0.15;
          r.frames[t].left = left[t];
        }
      }
      for (int s = 0; s < static_cast<int>(std::ceil(a.seconds)); ++s) {
        const std::string text = std::string("the hands ") + verbs[rng.below(std::size(verbs))] + " " +
                                 objects[rng.below(std::size(objects))];
        r.annotations.push_back({double(s), std::min(a.seconds, s + 1.0), text});
      }
      out.push_back(std::move(r));
    }
  }
  write_records(a.out, out);
  emit_report("synth", c.report, {{"records", out.size()}, {"seconds", a.seconds}});
  std::cerr << "wrote " << out.size() << " records to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string in;
  int synth_windows = 0;
  int holdout = 200;
  std::string out;
  TrainSchedule schedule;
  TrainOptions opts;
  QuantizerConfig cfg;
  int codebook = 0;
  std::string variant = "D162";
  bool whole = false;
};

int run_train(TrainArgs a, const Common& c) {
  const HandSkeleton skel = load_skeleton(c);
  a.cfg.variant = variant_from_name(a.variant);
  a.cfg.part_level = !a.whole;
  if (a.codebook > 0) a.cfg.codebook_wrist = a.cfg.codebook_finger = a.codebook;
  a.cfg.validate();
  a.opts.jobs = c.jobs;
  const Rng root(c.seed);

  std::vector<std::vector<HandPose>> train, held;
  if (!a.in.empty()) {
    train = record_windows(ingest(a.in));
    // Held-out windows come from the end of the corpus.
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(std::max(0, a.holdout)), train.size() / 2);
    held.assign(train.end() - static_cast<long>(n), train.end());
    train.resize(train.size() - n);
  } else if (a.synth_windows > 0) {
    train = synthetic_windows(a.synth_windows, root.split("train-data"));
    held = synthetic_windows(std::max(0, a.holdout), root.split("held-data"));
  } else {
    fail(Errc::usage, "train-tokenizer: give --in or --synth-windows");
  }
  if (train.empty()) fail(Errc::invalid_input, "train-tokenizer: no training windows");

  std::vector<FeatureSequence> features;
  features.reserve(train.size());
  for (const auto& w : train) features.push_back(encode_feature(w, a.cfg.variant, skel, a.cfg.fps));

  PartTokenizer tok = PartTokenizer::create(a.cfg, root.split("model"));
  const auto t0 = std::chrono::steady_clock::now();
  const auto history = train_tokenizer(tok, features, a.opts, a.schedule, root.split("train"),
                                       [&](int step, const LossReport& r) {
                                         if (step % 50 == 0 || step + 1 == a.schedule.steps) {
                                           std::cerr << "step " << step << " recon " << r.recon << " commit "
                                                     << r.commit << " total " << r.total << "\n";
                                         }
                                       });
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  tok.save(a.out);

  json report = {{"windows", train.size()},
                 {"steps", a.schedule.steps},
                 {"batch", a.schedule.batch},
                 {"train_seconds", seconds},
                 {"config", tok.config_json()}};
  if (!history.empty()) {
    const auto& last = history.back();
    report["final_loss"] = {{"recon", last.recon}, {"commit", last.commit}, {"wrist", last.wrist}, {"total", last.total}};
  }
  if (!held.empty()) {
    const double e = reconstruction_mpjpe(tok, held, skel);
    report["held_out_windows"] = held.size();
    report["held_out_mpjpe_cm"] = e;
    std::cerr << "held-out reconstruction MPJPE " << e << " cm\n";
  }
  emit_report("train-tokenizer", c.report, report);
  return 0;
}

struct TokenizeArgs {
  std::string model, in, out, format = "ids", vocab_out;
};

int run_tokenize(const TokenizeArgs& a, const Common& c) {
  const PartTokenizer tok = PartTokenizer::load(a.model);
  const HandSkeleton skel = load_skeleton(c);
  const Vocabulary vocab = model_vocabulary(tok);
  const int fps = tok.config().fps;
  const auto records = ingest(a.in);

  std::string text;
  json meta_records = json::array();
  long motion_tokens = 0, hand_seconds = 0;
  for (const auto& r : records) {
    const auto sides = complete_hands(r);
    if (sides.empty()) fail(Errc::windowing, "record '" + r.id + "': no hand is present in every frame; run clean first");
    const int seconds = r.length() / fps;
    std::vector<std::vector<HandPose>> hands;
    json betas = json::object();
    for (Side s : sides) {
      hands.push_back(hand_poses(r, s, 0, seconds * fps));
      const auto& b = r.frames.front().hand(s)->beta;
      betas[std::string(side_name(s))] = std::vector<double>(b.data(), b.data() + kNumShape);
    }
    const MotionTokens m = tokenize_motion(hands, tok, skel);
    const auto ids = serialize_blocks(m, vocab).ids;
    text += (a.format == "tags" ? format_tags(ids, vocab) : format_ids(ids)) + "\n";
    json hs = json::array();
    for (Side s : sides) hs.push_back(std::string(side_name(s)));
    meta_records.push_back({{"id", r.id},
                            {"source", r.source},
                            {"intrinsics", r.intrinsics.to_json()},
                            {"hands", hs},
                            {"seconds", seconds},
                            {"dropped_frames", r.length() - seconds * fps},
                            {"betas", betas}});
    motion_tokens += static_cast<long>(sides.size()) * seconds * tok.config().tokens_per_hand_second();
    hand_seconds += static_cast<long>(sides.size()) * seconds;
  }
  write_text(a.out, text);
  const json meta = {{"report_version", kReportVersion},
                     {"vocab", vocab.to_json()},
                     {"model", tok.config_json()},
                     {"records", meta_records}};
  write_text(a.out + ".meta.json", meta.dump(2) + "\n");
  if (!a.vocab_out.empty()) write_text(a.vocab_out, vocab.to_json().dump(2) + "\n");
  emit_report("tokenize", c.report,
              {{"records", records.size()},
               {"hand_seconds", hand_seconds},
               {"motion_tokens", motion_tokens},
               {"tokens_per_hand_second", tok.config().tokens_per_hand_second()}});
  std::cerr << "tokenized " << records.size() << " records, " << hand_seconds << " hand-seconds\n";
  return 0;
}

struct DetokenizeArgs {
  std::string model, in, meta, out;
};

int run_detokenize(const DetokenizeArgs& a, const Common& c) {
  const PartTokenizer tok = PartTokenizer::load(a.model);
  const json meta = read_json(a.meta.empty() ? a.in + ".meta.json" : a.meta);
  const Vocabulary vocab = Vocabulary::from_json(meta.at("vocab"));
  if (vocab.motion.end - vocab.motion.begin != tok.config().vocabulary_size() ||
      vocab.block_size != tok.config().tokens_per_hand_second()) {
    fail(Errc::config, "detokenize: vocabulary does not match the model");
  }
  std::vector<std::string> lines = read_lines(a.in);
  const auto& recs = meta.at("records");
  if (lines.size() < recs.size()) fail(Errc::invalid_input, "detokenize: fewer streams than metadata records");

  std::vector<SequenceRecord> out;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const auto& m = recs[i];
    std::vector<Side> sides;
    std::vector<ShapeVec> betas;
    for (const auto& h : m.at("hands")) {
      const Side s = side_from_name(h.get<std::string>());
      sides.push_back(s);
      const auto b = m.at("betas").at(h.get<std::string>()).get<std::vector<double>>();
      if (b.size() != kNumShape) fail(Errc::invalid_input, "detokenize: beta of wrong length");
      betas.emplace_back(Eigen::Map<const ShapeVec>(b.data()));
    }
    const auto ids = parse_token_text(lines[i], vocab);
    const MotionTokens tokens = deserialize_blocks(ids, vocab, sides);
    const auto poses = detokenize_motion(tokens, tok, betas);
    SequenceRecord r;
    r.id = m.at("id").get<std::string>();
    r.source = m.value("source", "");
    r.fps = tok.config().fps;
    r.intrinsics = CameraIntrinsics::from_json(m.at("intrinsics"));
    const std::size_t frames = poses.empty() ? 0 : poses.front().size();
    r.frames.resize(frames);
    for (std::size_t h = 0; h < sides.size(); ++h) {
      for (std::size_t t = 0; t < frames; ++t) r.frames[t].hand(sides[h]) = poses[h][t];
    }
    out.push_back(std::move(r));
  }
  write_records(a.out, out);
  emit_report("detokenize", c.report, {{"records", out.size()}});
  return 0;
}

struct AlignArgs {
  std::string src, dst, image, out;
  bool normalize = false;
};

int run_align(const AlignArgs& a, const Common& c) {
  const CameraIntrinsics src = CameraIntrinsics::load(a.src);
  CameraIntrinsics dst;
  if (a.normalize) {
    dst = normalize_fov(src);
  } else if (!a.dst.empty()) {
    dst = CameraIntrinsics::load(a.dst);
  } else {
    fail(Errc::usage, "align: give --dst or --normalize-fov");
  }
  const AffineMap map = weak_perspective_map(src, dst);
  if (!a.image.empty()) {
    if (a.out.empty()) fail(Errc::usage, "align: --image needs --out");
    write_png(remap_image(read_png(a.image), map, dst), a.out);
  }
  emit_report("align", c.report,
              {{"map", {{"sx", map.sx}, {"sy", map.sy}, {"dx", map.dx}, {"dy", map.dy}}},
               {"target", dst.to_json()},
               {"horizontal_fov", horizontal_fov(dst)}});
  return 0;
}

struct AugmentArgs {
  std::string in, out, kind = "depth", image_root, image_out;
  double lambda = 0.0;
  double phi = 0.0;
  bool lambda_set = false;
  bool phi_set = false;
  bool seed_set = false;
  AugmentRange range;
};

int run_augment(const AugmentArgs& a, const Common& c) {
  const bool depth = a.kind == "depth";
  const bool explicit_value = depth ? a.lambda_set : a.phi_set;
  if (!explicit_value && !a.seed_set) {
    fail(Errc::usage, "augment: give the parameter explicitly or a --seed to sample it");
  }
  const Rng root(c.seed);
  auto records = ingest(a.in);
  json applied = json::array();
  for (auto& r : records) {
    Rng rng = root.split("augment:" + r.id);
    AugmentRecord rec;
    rec.source_id = r.id;
    if (depth) {
      rec.kind = AugmentKind::depth_scale;
      rec.lambda_s = a.lambda_set ? a.lambda : rng.uniform(a.range.lambda_min, a.range.lambda_max);
      if (!(rec.lambda_s >= a.range.lambda_min && rec.lambda_s <= a.range.lambda_max)) {
        fail(Errc::augment_range, "augment: lambda outside the configured range");
      }
    } else {
      rec.kind = AugmentKind::inplane_rotation;
      rec.phi = a.phi_set ? a.phi : std::numbers::pi - 2.0 * std::numbers::pi * rng.uniform();
    }
    const SequenceRecord before = r;
    r = apply_augments(r, {rec});
    if (!a.image_out.empty()) {
      fs::create_directories(a.image_out);
      for (auto& f : r.frames) {
        if (f.image.empty()) continue;
        Image img = read_png((fs::path(a.image_root) / f.image).string());
        const AugmentResult res = depth ? depth_scale_augment({}, img, r.intrinsics, rec.lambda_s, {rec.lambda_s, rec.lambda_s})
                                        : inplane_rotate_augment({}, img, r.intrinsics, rec.phi);
        const fs::path target = fs::path(a.image_out) / fs::path(f.image).filename();
        write_png(res.image, target.string());
        f.image = target.string();
      }
    }
    applied.push_back({{"record", r.id}, {"augment", rec.to_json()}});
  }
  write_records(a.out, records);
  emit_report("augment", c.report, {{"records", records.size()}, {"augments", applied}});
  return 0;
}

struct CorpusArgs {
  std::string in, model, templates, out, manifest, config;
  int max_seconds = 3;
};

int run_templates(const CorpusArgs& a, const Common& c) {
  const PartTokenizer tok = PartTokenizer::load(a.model);
  const HandSkeleton skel = load_skeleton(c);
  const SampleContext ctx = sample_context(tok, skel, a.templates);
  const Rng root(c.seed);
  BalanceResult all;
  int skipped = 0;
  for (const auto& r : ingest(a.in)) {
    Rng rng = root.split("instantiate:" + r.id);
    auto batch = instantiate_templates(r, chunk_and_window(r), ctx, {a.max_seconds}, rng);
    skipped += batch.skipped;
    for (auto& s : batch.samples) all.samples.push_back(std::move(s));
  }
  write_samples(a.out, all.samples);
  if (!a.manifest.empty()) write_text(a.manifest, all.manifest());
  emit_report("templates", c.report,
              {{"samples", all.samples.size()}, {"skipped", skipped}, {"counts", counts_json(all.samples)}});
  return 0;
}

int run_balance(const CorpusArgs& a, const Common& c) {
  const PartTokenizer tok = PartTokenizer::load(a.model);
  const HandSkeleton skel = load_skeleton(c);
  const SampleContext ctx = sample_context(tok, skel, a.templates);
  const BalanceConfig cfg = BalanceConfig::from_json(read_json(a.config));
  const auto records = ingest(a.in);
  Rng rng(c.seed);
  const BalanceResult res = balance_corpus(records, cfg, ctx, rng);
  write_samples(a.out, res.samples);
  if (!a.manifest.empty()) write_text(a.manifest, res.manifest());
  emit_report("balance", c.report,
              {{"samples", res.samples.size()},
               {"augmented", res.augmented},
               {"counts", counts_json(res.samples)},
               {"config", cfg.to_json()}});
  return 0;
}

struct ValidateArgs {
  std::string vocab, in;
};

int run_validate(const ValidateArgs& a, const Common& c) {
  const Vocabulary vocab = Vocabulary::load(a.vocab);
  std::vector<std::vector<int>> streams;
  json failures = json::array();
  int line_no = 0, valid = 0;
  for (const auto& line : read_lines(a.in)) {
    ++line_no;
    if (blank(line)) continue;
    std::vector<int> ids;
    try {
      ids = parse_token_text(line, vocab);
    } catch (const Error& e) {
      failures.push_back({{"line", line_no}, {"position", nullptr}, {"reason", e.what()}});
      streams.emplace_back();
      continue;
    }
    const ParseResult r = parse_stream(ids, vocab);
    if (!r.valid) failures.push_back({{"line", line_no}, {"position", r.position}, {"reason", r.reason}});
    streams.push_back(std::move(ids));
  }
  const double rate = streams.empty() ? 0.0 : valid_rate(streams, vocab);
  for (const auto& s : streams) valid += parse_stream(s, vocab).valid ? 1 : 0;
  emit_report("validate-stream", c.report,
              {{"streams", streams.size()}, {"valid", valid}, {"valid_rate", rate}, {"failures", failures}});
  std::cerr << "valid_rate " << rate << " over " << streams.size() << " streams\n";
  return 0;
}

struct EvaluateArgs {
  std::string pred, gt, pred_emb, gt_emb, streams, vocab;
  int k = 3;
};

/// Records named by a manifest: each line is a path string, {"path": ...},
/// or an inline record. Relative paths resolve against the manifest.
std::vector<SequenceRecord> manifest_records(const std::string& path) {
  std::vector<SequenceRecord> out;
  const fs::path base = fs::path(path).parent_path();
  int line_no = 0;
  for (const auto& line : read_lines(path)) {
    ++line_no;
    if (blank(line)) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      fail(Errc::invalid_input, path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (j.is_object() && j.contains("frames")) {
      out.push_back(resample(SequenceRecord::from_json(j)));
      continue;
    }
    const std::string ref = j.is_string() ? j.get<std::string>() : j.value("path", "");
    if (ref.empty()) fail(Errc::invalid_input, path + ":" + std::to_string(line_no) + ": expected a path or record");
    const fs::path p = fs::path(ref).is_absolute() ? fs::path(ref) : base / ref;
    for (auto& r : ingest(p.string())) out.push_back(std::move(r));
  }
  return out;
}

Eigen::MatrixXd read_embeddings(const std::string& path) {
  std::vector<std::vector<double>> rows;
  for (const auto& line : read_lines(path)) {
    if (blank(line)) continue;
    try {
      rows.push_back(json::parse(line).get<std::vector<double>>());
    } catch (const json::exception& e) {
      fail(Errc::invalid_input, path + ": " + e.what());
    }
  }
  if (rows.empty()) fail(Errc::invalid_input, path + ": no embeddings");
  Eigen::MatrixXd m(static_cast<long>(rows.size()), static_cast<long>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows[0].size()) fail(Errc::shape_mismatch, path + ": ragged embeddings");
    for (std::size_t e = 0; e < rows[i].size(); ++e) m(static_cast<long>(i), static_cast<long>(e)) = rows[i][e];
  }
  return m;
}

int run_evaluate(const EvaluateArgs& a, const Common& c) {
  const HandSkeleton skel = load_skeleton(c);
  json report = {{"mpjpe", nullptr}, {"mwte", nullptr}, {"pa_mpjpe", nullptr},
                 {"fid", nullptr},   {"r_at_k", nullptr}, {"valid_rate", nullptr}};
  if (!a.pred.empty() || !a.gt.empty()) {
    if (a.pred.empty() || a.gt.empty()) fail(Errc::usage, "evaluate: --pred and --gt go together");
    const auto pred = manifest_records(a.pred);
    const auto gt = manifest_records(a.gt);
    if (pred.size() != gt.size()) fail(Errc::shape_mismatch, "evaluate: prediction and ground-truth counts differ");
    JointSequence pj, gj;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i].length() != gt[i].length()) {
        fail(Errc::shape_mismatch, "evaluate: '" + pred[i].id + "' and '" + gt[i].id + "' differ in length");
      }
      for (Side s : {Side::left, Side::right}) {
        if (!pred[i].hand_complete(s) || !gt[i].hand_complete(s)) continue;
        for (int t = 0; t < pred[i].length(); ++t) {
          pj.push_back(forward_kinematics(*pred[i].frames[static_cast<std::size_t>(t)].hand(s), skel));
          gj.push_back(forward_kinematics(*gt[i].frames[static_cast<std::size_t>(t)].hand(s), skel));
        }
      }
    }
    if (pj.empty()) fail(Errc::invalid_input, "evaluate: no hand is complete in both prediction and ground truth");
    report["mpjpe"] = mpjpe(pj, gj);
    report["mwte"] = mwte(pj, gj);
    report["pa_mpjpe"] = pa_mpjpe(pj, gj);
    report["frames"] = pj.size();
  }
  if (!a.pred_emb.empty() || !a.gt_emb.empty()) {
    if (a.pred_emb.empty() || a.gt_emb.empty()) fail(Errc::usage, "evaluate: embedding sets go together");
    const Eigen::MatrixXd pe = read_embeddings(a.pred_emb);
    const Eigen::MatrixXd ge = read_embeddings(a.gt_emb);
    report["fid"] = frechet_distance(pe, ge);
    if (pe.rows() == ge.rows()) {
      std::vector<int> pairs(static_cast<std::size_t>(pe.rows()));
      for (std::size_t i = 0; i < pairs.size(); ++i) pairs[i] = static_cast<int>(i);
      report["r_at_k"] = retrieval_topk(pe, ge, pairs, a.k);
      report["k"] = a.k;
    }
  }
  if (!a.streams.empty()) {
    if (a.vocab.empty()) fail(Errc::usage, "evaluate: --streams needs --vocab");
    const Vocabulary vocab = Vocabulary::load(a.vocab);
    std::vector<std::vector<int>> streams;
    for (const auto& line : read_lines(a.streams)) {
      if (blank(line)) continue;
      try {
        streams.push_back(parse_token_text(line, vocab));
      } catch (const Error&) {
        streams.emplace_back();
      }
    }
    report["valid_rate"] = valid_rate(streams, vocab);
  }
  emit_report("evaluate", c.report, report);
  return 0;
}

struct RecordIo {
  std::string in, out;
};

int run_ingest(const RecordIo& a, const Common& c) {
  const auto records = ingest(a.in);
  long frames = 0;
  for (const auto& r : records) frames += r.length();
  write_records(a.out, records);
  emit_report("ingest", c.report, {{"records", records.size()}, {"frames", frames}, {"fps", kPipelineFps}});
  return 0;
}

int run_clean(const RecordIo& a, const CleanOptions& opts, const Common& c) {
  std::vector<SequenceRecord> out;
  json per = json::array();
  CleanReport total;
  for (const auto& r : ingest(a.in)) {
    CleanResult res = clean_sequence(r, opts);
    per.push_back({{"record", r.id}, {"pieces", res.pieces.size()}, {"report", res.report.to_json()}});
    total.swaps += res.report.swaps;
    total.invalidated += res.report.invalidated;
    total.filled += res.report.filled;
    total.splits += res.report.splits;
    total.trimmed += res.report.trimmed;
    for (auto& p : res.pieces) out.push_back(std::move(p));
  }
  write_records(a.out, out);
  emit_report("clean", c.report, {{"records", out.size()}, {"total", total.to_json()}, {"per_record", per}});
  return 0;
}

int run_window(const RecordIo& a, const Common& c) {
  json recs = json::array();
  long windows = 0;
  for (const auto& r : ingest(a.in)) {
    const Windowing w = chunk_and_window(r);
    json chunks = json::array(), wins = json::array();
    for (const auto& ch : w.chunks) {
      chunks.push_back({{"index", ch.index},
                        {"begin", ch.begin},
                        {"end", ch.end},
                        {"sub_second", ch.sub_second},
                        {"annotation_frames", ch.annotation_frames}});
    }
    for (const auto& win : w.windows) wins.push_back({{"index", win.index}, {"chunk", win.chunk}, {"begin", win.begin}});
    windows += static_cast<long>(w.windows.size());
    recs.push_back({{"id", r.id}, {"frames", r.length()}, {"chunks", chunks}, {"windows", wins}});
  }
  write_text(a.out, json({{"window_frames", kWindowFrames}, {"records", recs}}).dump(2) + "\n");
  emit_report("window", c.report, {{"records", recs.size()}, {"windows", windows}});
  return 0;
}

std::string env_name(const std::string& long_name) {
  std::string s = "HMT_";
  for (char ch : long_name) s += ch == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  return s;
}

void bind_env(CLI::App& app) {
  for (CLI::Option* opt : app.get_options()) {
    const auto& names = opt->get_lnames();
    if (names.empty() || names.front() == "help" || names.front() == "version") continue;
    opt->envname(env_name(names.front()));
  }
  for (CLI::App* sub : app.get_subcommands({})) bind_env(*sub);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hand-motion tokenization, alignment and evaluation toolkit", "hmt"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "hmt 1.0");
  Common common;

  auto add_common = [&](CLI::App* sub, bool needs_seed) {
    auto* seed = sub->add_option("--seed", common.seed, "Seed for every random draw");
    if (needs_seed) seed->required();
    sub->add_option("--jobs", common.jobs, "Worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--report", common.report, "Write a JSON report here");
    sub->add_option("--skeleton", common.skeleton, "Skeleton JSON (default: built-in)")->check(CLI::ExistingFile);
    return seed;
  };

  SynthArgs synth;
  auto* s_synth = app.add_subcommand("synth", "Write procedurally generated two-handed records");
  add_common(s_synth, true);
  s_synth->add_option("--records", synth.records, "Records per source");
  s_synth->add_option("--seconds", synth.seconds, "Record length in seconds");
  s_synth->add_option("--source", synth.sources, "Source tags")->delimiter(',');
  s_synth->add_flag("--one-hand", synth.one_hand, "Right hand only");
  s_synth->add_option("--out", synth.out, "Output records (JSON-lines)")->required();

  TrainArgs train;
  auto* s_train = app.add_subcommand("train-tokenizer", "Train a part-level GRQ tokenizer");
  add_common(s_train, true);
  s_train->add_option("--in", train.in, "Training records (JSON-lines)")->check(CLI::ExistingFile);
  s_train->add_option("--synth-windows", train.synth_windows, "Train on this many synthetic 1 s windows");
  s_train->add_option("--holdout", train.holdout, "Held-out windows for the reconstruction report");
  s_train->add_option("--out", train.out, "Model file")->required();
  s_train->add_option("--steps", train.schedule.steps, "Optimizer steps");
  s_train->add_option("--batch", train.schedule.batch, "Windows per step");
  s_train->add_option("--lr", train.opts.learning_rate, "Adam learning rate");
  s_train->add_option("--lambda1", train.opts.lambda1, "Commitment weight");
  s_train->add_option("--lambda2", train.opts.lambda2, "Wrist weight (whole-hand mode)");
  s_train->add_option("--codebook", train.codebook, "Codebook size for both parts");
  s_train->add_option("--codebook-wrist", train.cfg.codebook_wrist, "Wrist codebook size");
  s_train->add_option("--codebook-finger", train.cfg.codebook_finger, "Finger codebook size");
  s_train->add_option("--code-dim", train.cfg.code_dim, "Latent width d");
  s_train->add_option("--layers", train.cfg.layers, "Residual layers L");
  s_train->add_option("--groups", train.cfg.groups, "Groups n");
  s_train->add_option("--alpha", train.cfg.alpha, "Temporal downsampling");
  s_train->add_option("--hidden", train.cfg.hidden, "Hidden tanh width (0 = linear)");
  s_train->add_option("--variant", train.variant, "Feature variant")
      ->check(CLI::IsMember({"D51", "D99", "D109", "D114", "D162"}));
  s_train->add_flag("--whole", train.whole, "One tokenizer over all features, with the wrist loss");

  TokenizeArgs tokenize;
  auto* s_tok = app.add_subcommand("tokenize", "Turn records into motion-block token streams");
  add_common(s_tok, false);
  s_tok->add_option("--model", tokenize.model, "Model file")->required()->check(CLI::ExistingFile);
  s_tok->add_option("--in", tokenize.in, "Records (JSON-lines)")->required()->check(CLI::ExistingFile);
  s_tok->add_option("--out", tokenize.out, "Token file, one stream per record")->required();
  s_tok->add_option("--format", tokenize.format, "ids or tags")->check(CLI::IsMember({"ids", "tags"}));
  s_tok->add_option("--vocab-out", tokenize.vocab_out, "Also write the vocabulary JSON");

  DetokenizeArgs detok;
  auto* s_detok = app.add_subcommand("detokenize", "Decode token streams back into records");
  add_common(s_detok, false);
  s_detok->add_option("--model", detok.model, "Model file")->required()->check(CLI::ExistingFile);
  s_detok->add_option("--in", detok.in, "Token file")->required()->check(CLI::ExistingFile);
  s_detok->add_option("--meta", detok.meta, "Metadata (default: <in>.meta.json)");
  s_detok->add_option("--out", detok.out, "Output records")->required();

  AlignArgs align;
  auto* s_align = app.add_subcommand("align", "Weak-perspective map between two cameras");
  add_common(s_align, false);
  s_align->add_option("--src", align.src, "Source intrinsics JSON")->required()->check(CLI::ExistingFile);
  s_align->add_option("--dst", align.dst, "Target intrinsics JSON")->check(CLI::ExistingFile);
  s_align->add_flag("--normalize-fov", align.normalize, "Target is the 90 degree normalized camera");
  s_align->add_option("--image", align.image, "PNG to remap")->check(CLI::ExistingFile);
  s_align->add_option("--out", align.out, "Remapped PNG");

  AugmentArgs augment;
  auto* s_aug = app.add_subcommand("augment", "Depth-scale or in-plane-rotate records");
  auto* aug_seed = add_common(s_aug, false);
  s_aug->add_option("--in", augment.in, "Records")->required()->check(CLI::ExistingFile);
  s_aug->add_option("--out", augment.out, "Output records")->required();
  s_aug->add_option("--kind", augment.kind, "depth or rotation")->check(CLI::IsMember({"depth", "rotation"}));
  auto* lam = s_aug->add_option("--lambda", augment.lambda, "Depth scale (sampled when absent)");
  auto* phi = s_aug->add_option("--phi", augment.phi, "Rotation in radians (sampled when absent)");
  s_aug->add_option("--lambda-min", augment.range.lambda_min, "Depth scale lower bound");
  s_aug->add_option("--lambda-max", augment.range.lambda_max, "Depth scale upper bound");
  s_aug->add_option("--image-root", augment.image_root, "Directory frame images are relative to");
  s_aug->add_option("--image-out", augment.image_out, "Write warped frame images here");

  CorpusArgs tmpl;
  auto* s_tmpl = app.add_subcommand("templates", "Instantiate instruction samples from records");
  add_common(s_tmpl, true);
  s_tmpl->add_option("--in", tmpl.in, "Records")->required()->check(CLI::ExistingFile);
  s_tmpl->add_option("--model", tmpl.model, "Model file")->required()->check(CLI::ExistingFile);
  s_tmpl->add_option("--templates", tmpl.templates, "Template JSON")->required()->check(CLI::ExistingFile);
  s_tmpl->add_option("--max-seconds", tmpl.max_seconds, "Longest span");
  s_tmpl->add_option("--out", tmpl.out, "Samples (JSON-lines)")->required();
  s_tmpl->add_option("--manifest", tmpl.manifest, "Provenance manifest (JSON-lines)");

  CorpusArgs bal;
  auto* s_bal = app.add_subcommand("balance", "Per-source balanced, augmented sample corpus");
  add_common(s_bal, true);
  s_bal->add_option("--in", bal.in, "Records")->required()->check(CLI::ExistingFile);
  s_bal->add_option("--config", bal.config, "Balance config JSON")->required()->check(CLI::ExistingFile);
  s_bal->add_option("--model", bal.model, "Model file")->required()->check(CLI::ExistingFile);
  s_bal->add_option("--templates", bal.templates, "Template JSON")->required()->check(CLI::ExistingFile);
  s_bal->add_option("--out", bal.out, "Samples (JSON-lines)")->required();
  s_bal->add_option("--manifest", bal.manifest, "Provenance manifest (JSON-lines)");

  ValidateArgs validate;
  auto* s_val = app.add_subcommand("validate-stream", "Check token streams against the block grammar");
  add_common(s_val, false);
  s_val->add_option("--vocab", validate.vocab, "Vocabulary JSON")->required()->check(CLI::ExistingFile);
  s_val->add_option("--in", validate.in, "Token file, one stream per line")->required()->check(CLI::ExistingFile);

  EvaluateArgs eval;
  auto* s_eval = app.add_subcommand("evaluate", "Pose errors, Frechet distance, retrieval and validity");
  add_common(s_eval, false);
  s_eval->add_option("--pred", eval.pred, "Prediction manifest")->check(CLI::ExistingFile);
  s_eval->add_option("--gt", eval.gt, "Ground-truth manifest")->check(CLI::ExistingFile);
  s_eval->add_option("--pred-embeddings", eval.pred_emb, "Generated embeddings (JSON-lines)")->check(CLI::ExistingFile);
  s_eval->add_option("--gt-embeddings", eval.gt_emb, "Real embeddings (JSON-lines)")->check(CLI::ExistingFile);
  s_eval->add_option("--k", eval.k, "Retrieval cutoff");
  s_eval->add_option("--streams", eval.streams, "Generated token streams")->check(CLI::ExistingFile);
  s_eval->add_option("--vocab", eval.vocab, "Vocabulary for --streams")->check(CLI::ExistingFile);

  RecordIo ingest_io, clean_io, window_io;
  CleanOptions clean_opts;
  auto* s_ingest = app.add_subcommand("ingest", "Validate records and resample to 15 FPS");
  add_common(s_ingest, false);
  s_ingest->add_option("--in", ingest_io.in, "Raw records")->required()->check(CLI::ExistingFile);
  s_ingest->add_option("--out", ingest_io.out, "Validated records")->required();

  auto* s_clean = app.add_subcommand("clean", "Repair swaps and jumps, fill short gaps, split long ones");
  add_common(s_clean, false);
  s_clean->add_option("--in", clean_io.in, "Records")->required()->check(CLI::ExistingFile);
  s_clean->add_option("--out", clean_io.out, "Cleaned records")->required();
  s_clean->add_option("--threshold", clean_opts.jump_threshold, "Wrist jump threshold, meters per frame");
  s_clean->add_option("--max-gap", clean_opts.max_gap, "Longest gap to interpolate, frames");

  auto* s_window = app.add_subcommand("window", "List 10 s chunks and 1 s windows");
  add_common(s_window, false);
  s_window->add_option("--in", window_io.in, "Records")->required()->check(CLI::ExistingFile);
  s_window->add_option("--out", window_io.out, "Windows JSON")->required();

  std::string skeleton_out;
  auto* s_skel = app.add_subcommand("skeleton", "Write the built-in skeleton as JSON");
  s_skel->add_option("--out", skeleton_out, "Output path")->required();

  bind_env(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*s_synth) return run_synth(synth, common);
    if (*s_train) return run_train(train, common);
    if (*s_tok) return run_tokenize(tokenize, common);
    if (*s_detok) return run_detokenize(detok, common);
    if (*s_align) return run_align(align, common);
    if (*s_aug) {
      augment.lambda_set = lam->count() > 0;
      augment.phi_set = phi->count() > 0;
      augment.seed_set = aug_seed->count() > 0;
      return run_augment(augment, common);
    }
    if (*s_tmpl) return run_templates(tmpl, common);
    if (*s_bal) return run_balance(bal, common);
    if (*s_val) return run_validate(validate, common);
    if (*s_eval) return run_evaluate(eval, common);
    if (*s_ingest) return run_ingest(ingest_io, common);
    if (*s_clean) return run_clean(clean_io, clean_opts, common);
    if (*s_window) return run_window(window_io, common);
    if (*s_skel) {
      write_text(skeleton_out, HandSkeleton::rest_default().to_json().dump(2) + "\n");
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << json({{"error", std::string(errc_name(e.code()))}, {"message", e.what()}}).dump() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << json({{"error", "internal"}, {"message", e.what()}}).dump() << "\n";
    return 3;
  }
  return 2;
}
