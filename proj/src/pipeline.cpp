#include "hmt/pipeline.hpp"

#include "hmt/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace hmt {

namespace {

constexpr std::array<Side, 2> kSides{Side::left, Side::right};

/// Runs `f`, turning any library or JSON error into an ingest error that
/// names the field path.
template <typename F>
auto at_path(const std::string& path, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    fail(Errc::ingest, path + ": " + e.what());
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::ingest, path + ": " + e.what());
  }
}

const nlohmann::json& require(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) fail(Errc::ingest, std::string(key) + ": missing");
  return j.at(key);
}

std::string join_path(const std::string& a, const std::string& b) { return a.empty() ? b : a + "." + b; }

}  // namespace

bool SequenceRecord::hand_complete(Side s) const {
  return !frames.empty() &&
         std::all_of(frames.begin(), frames.end(), [s](const FrameHands& f) { return f.hand(s).has_value(); });
}

nlohmann::json SequenceRecord::to_json() const {
  nlohmann::json fr = nlohmann::json::array();
  for (std::size_t t = 0; t < frames.size(); ++t) {
    nlohmann::json f;
    f["t"] = static_cast<double>(t) / fps;
    for (Side s : kSides) {
      const auto& h = frames[t].hand(s);
      f[std::string(side_name(s))] = h ? h->to_json() : nlohmann::json(nullptr);
    }
    if (!frames[t].image.empty()) f["image"] = frames[t].image;
    fr.push_back(std::move(f));
  }
  nlohmann::json ann = nlohmann::json::array();
  for (const auto& a : annotations) {
    ann.push_back({{"start", a.start}, {"end", a.end}, {"text", a.text}, {"hand", a.hand}});
  }
  return {{"id", id},          {"source", source}, {"fps", fps}, {"intrinsics", intrinsics.to_json()},
          {"frames", fr},      {"annotations", ann}};
}

SequenceRecord SequenceRecord::from_json(const nlohmann::json& j) {
  if (!j.is_object()) fail(Errc::ingest, "record: expected an object");
  SequenceRecord r;
  r.id = at_path("id", [&] { return require(j, "id").get<std::string>(); });
  if (r.id.empty()) fail(Errc::ingest, "id: empty");
  r.source = at_path("source", [&] { return require(j, "source").get<std::string>(); });
  r.fps = at_path("fps", [&] { return require(j, "fps").get<double>(); });
  if (!(r.fps > 0.0) || !std::isfinite(r.fps)) fail(Errc::ingest, "fps: must be positive");
  r.intrinsics = at_path("intrinsics", [&] { return CameraIntrinsics::from_json(require(j, "intrinsics")); });

  const auto& frames = at_path("frames", [&]() -> const nlohmann::json& {
    const auto& f = require(j, "frames");
    if (!f.is_array()) fail(Errc::ingest, "expected an array");
    return f;
  });
  r.frames.reserve(frames.size());
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const std::string where = "frames[" + std::to_string(t) + "]";
    const auto& f = frames[t];
    if (!f.is_object()) fail(Errc::ingest, where + ": expected an object");
    FrameHands fh;
    for (Side s : kSides) {
      const std::string key(side_name(s));
      if (!f.contains(key) || f.at(key).is_null()) continue;
      fh.hand(s) = at_path(join_path(where, key), [&] {
        HandPose p = HandPose::from_json(f.at(key), s);
        p.validate();
        return p;
      });
    }
    if (f.contains("image")) fh.image = at_path(where + ".image", [&] { return f.at("image").get<std::string>(); });
    r.frames.push_back(std::move(fh));
  }

  if (j.contains("annotations") && !j.at("annotations").is_null()) {
    const auto& ann = j.at("annotations");
    if (!ann.is_array()) fail(Errc::ingest, "annotations: expected an array");
    for (std::size_t i = 0; i < ann.size(); ++i) {
      const std::string where = "annotations[" + std::to_string(i) + "]";
      Annotation a = at_path(where, [&] {
        Annotation out;
        out.start = require(ann[i], "start").get<double>();
        out.end = require(ann[i], "end").get<double>();
        out.text = require(ann[i], "text").get<std::string>();
        out.hand = ann[i].value("hand", "both");
        return out;
      });
      if (!(a.end > a.start)) fail(Errc::ingest, where + ": end must exceed start");
      if (a.hand != "both" && a.hand != "left" && a.hand != "right") {
        fail(Errc::ingest, where + ".hand: expected both, left or right");
      }
      r.annotations.push_back(std::move(a));
    }
  }
  return r;
}

SequenceRecord resample(const SequenceRecord& rec, double fps) {
  if (!(fps > 0.0)) fail(Errc::config, "resample: fps must be positive");
  if (rec.fps == fps) return rec;
  SequenceRecord out = rec;
  out.fps = fps;
  out.frames.clear();
  const long n = rec.frames.empty() ? 0 : std::max(1L, static_cast<long>(std::floor(rec.length() * fps / rec.fps + 1e-9)));
  for (long i = 0; i < n; ++i) {
    const long src = std::min<long>(rec.length() - 1, std::lround(static_cast<double>(i) * rec.fps / fps));
    out.frames.push_back(rec.frames[static_cast<std::size_t>(src)]);
  }
  return out;
}

std::vector<SequenceRecord> ingest(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::io, path + ": cannot open");
  std::vector<SequenceRecord> out;
  std::set<std::string> ids;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::ingest, where + ": " + e.what());
    }
    SequenceRecord r;
    try {
      r = SequenceRecord::from_json(j);
    } catch (const Error& e) {
      fail(Errc::ingest, where + ": " + e.what());
    }
    if (!ids.insert(r.id).second) fail(Errc::ingest, where + ": duplicate id '" + r.id + "'");
    out.push_back(resample(r));
  }
  return out;
}

void write_records(const std::string& path, const std::vector<SequenceRecord>& records) {
  std::ofstream out(path);
  if (!out) fail(Errc::io, path + ": cannot write");
  for (const auto& r : records) out << r.to_json().dump() << '\n';
  if (!out) fail(Errc::io, path + ": write failed");
}

// ---------------------------------------------------------------------------
// Cleaning

nlohmann::json CleanReport::to_json() const {
  return {{"swaps", swaps}, {"invalidated", invalidated}, {"filled", filled}, {"splits", splits}, {"trimmed", trimmed}};
}

double wrist_jump_energy(const SequenceRecord& rec, Side side) {
  double e = 0.0;
  for (int t = 1; t < rec.length(); ++t) {
    const auto& a = rec.frames[static_cast<std::size_t>(t - 1)].hand(side);
    const auto& b = rec.frames[static_cast<std::size_t>(t)].hand(side);
    if (a && b) e += (b->tau - a->tau).norm();
  }
  return e;
}

namespace {

void swap_hands(FrameHands& f) {
  std::swap(f.left, f.right);
  if (f.left) f.left->side = Side::left;
  if (f.right) f.right->side = Side::right;
}

HandPose interpolate(const HandPose& a, const HandPose& b, double s) {
  HandPose p = a;
  p.tau = (1.0 - s) * a.tau + s * b.tau;
  p.beta = (1.0 - s) * a.beta + s * b.beta;
  p.r_rot = matrix_to_axis_angle(slerp(axis_angle_to_matrix(a.r_rot), axis_angle_to_matrix(b.r_rot), s));
  for (int i = 0; i < kNumArticulated; ++i) {
    p.theta[i] = matrix_to_axis_angle(slerp(axis_angle_to_matrix(a.theta[i]), axis_angle_to_matrix(b.theta[i]), s));
  }
  return p;
}

}  // namespace

CleanResult clean_sequence(const SequenceRecord& rec, const CleanOptions& opts) {
  if (!(opts.jump_threshold > 0.0)) fail(Errc::config, "clean: jump threshold must be positive");
  if (opts.max_gap < 0) fail(Errc::config, "clean: max gap must be non-negative");
  CleanResult result;
  auto& report = result.report;
  std::vector<FrameHands> work = rec.frames;
  const int T = rec.length();
  const double thr = opts.jump_threshold;

  // Left/right mismatch: relabel from a discontinuity on when the swapped
  // assignment shortens both wrist jumps.
  {
    bool swapped = false;
    std::array<std::optional<Vec3>, 2> last;
    std::array<int, 2> last_t{};
    for (int t = 0; t < T; ++t) {
      auto& f = work[static_cast<std::size_t>(t)];
      if (swapped) swap_hands(f);
      if (f.left && f.right && last[0] && last[1]) {
        const double d_ll = (f.left->tau - *last[0]).norm();
        const double d_rr = (f.right->tau - *last[1]).norm();
        const double d_lr = (f.right->tau - *last[0]).norm();
        const double d_rl = (f.left->tau - *last[1]).norm();
        const bool jump = d_ll > thr * (t - last_t[0]) || d_rr > thr * (t - last_t[1]);
        if (jump && d_lr < d_ll && d_rl < d_rr) {
          swapped = !swapped;
          swap_hands(f);
          ++report.swaps;
        }
      }
      if (f.left) last[0] = f.left->tau, last_t[0] = t;
      if (f.right) last[1] = f.right->tau, last_t[1] = t;
    }
  }

  // Wrist-jump invalidation against the last accepted frame. A jump that
  // persists past max_gap frames re-anchors and forces a break.
  std::vector<char> brk(static_cast<std::size_t>(T) + 1, 0);
  for (int si = 0; si < 2; ++si) {
    const Side s = kSides[static_cast<std::size_t>(si)];
    int anchor = -1;
    for (int t = 0; t < T; ++t) {
      auto& h = work[static_cast<std::size_t>(t)].hand(s);
      if (!h) continue;
      if (anchor < 0) {
        anchor = t;
        continue;
      }
      const double d = (h->tau - work[static_cast<std::size_t>(anchor)].hand(s)->tau).norm();
      if (d <= thr * (t - anchor)) {
        anchor = t;
      } else if (t - anchor > opts.max_gap) {
        anchor = t;
        brk[static_cast<std::size_t>(t)] = 1;
      } else {
        h.reset();
        ++report.invalidated;
      }
    }
  }

  // Interpolate short interior gaps that do not straddle a break.
  for (Side s : kSides) {
    int prev = -1;
    for (int t = 0; t < T; ++t) {
      if (!work[static_cast<std::size_t>(t)].hand(s)) continue;
      const int gap = t - prev - 1;
      bool crosses = false;
      for (int u = prev + 1; u <= t && prev >= 0; ++u) crosses = crosses || brk[static_cast<std::size_t>(u)];
      if (prev >= 0 && gap > 0 && gap <= opts.max_gap && !crosses) {
        const HandPose a = *work[static_cast<std::size_t>(prev)].hand(s);
        const HandPose b = *work[static_cast<std::size_t>(t)].hand(s);
        for (int u = prev + 1; u < t; ++u) {
          work[static_cast<std::size_t>(u)].hand(s) = interpolate(a, b, static_cast<double>(u - prev) / (t - prev));
          ++report.filled;
        }
      }
      prev = t;
    }
  }

  // Pieces: maximal runs with the same non-empty set of hands and no break.
  auto hand_set = [&](int t) {
    const auto& f = work[static_cast<std::size_t>(t)];
    return (f.left ? 1 : 0) | (f.right ? 2 : 0);
  };
  std::vector<std::pair<int, int>> spans;
  for (int t = 0; t < T;) {
    const int set = hand_set(t);
    if (set == 0) {
      ++t;
      continue;
    }
    int e = t + 1;
    while (e < T && hand_set(e) == set && !brk[static_cast<std::size_t>(e)]) ++e;
    spans.emplace_back(t, e);
    t = e;
  }

  int kept = 0;
  for (std::size_t k = 0; k < spans.size(); ++k) {
    const auto [b, e] = spans[k];
    SequenceRecord piece;
    piece.id = spans.size() == 1 ? rec.id : rec.id + "#" + std::to_string(k);
    piece.source = rec.source;
    piece.fps = rec.fps;
    piece.intrinsics = rec.intrinsics;
    piece.frames.assign(work.begin() + b, work.begin() + e);
    const double t0 = b / rec.fps, t1 = e / rec.fps;
    for (const auto& a : rec.annotations) {
      if (a.end <= t0 || a.start >= t1) continue;
      Annotation c = a;
      c.start = std::max(a.start, t0) - t0;
      c.end = std::min(a.end, t1) - t0;
      piece.annotations.push_back(std::move(c));
    }
    kept += e - b;
    result.pieces.push_back(std::move(piece));
  }
  report.splits = std::max(0, static_cast<int>(spans.size()) - 1);
  report.trimmed = T - kept;
  return result;
}

// ---------------------------------------------------------------------------
// Chunks and windows

Windowing chunk_and_window(const SequenceRecord& rec) {
  Windowing w;
  const int T = rec.length();
  for (int b = 0, c = 0; b < T; b += kChunkFrames, ++c) {
    Chunk ch;
    ch.index = c;
    ch.begin = b;
    ch.end = std::min(T, b + kChunkFrames);
    const int len = ch.end - ch.begin;
    ch.sub_second = len < kWindowFrames;
    for (int k = 0;; ++k) {
      const int off = static_cast<int>(std::lround(k * kWindowFrames / 2.0));
      if (off >= len) break;
      ch.annotation_frames.push_back(b + off);
    }
    for (int k = 0;; ++k) {
      const int off = static_cast<int>(std::lround(k * kWindowFrames / 2.0));
      if (off + kWindowFrames > len) break;
      w.windows.push_back({static_cast<int>(w.windows.size()), c, b + off});
    }
    w.chunks.push_back(std::move(ch));
  }
  return w;
}

// ---------------------------------------------------------------------------
// Templates and samples

std::string_view task_name(Task t) {
  switch (t) {
    case Task::generation: return "generation";
    case Task::translation: return "translation";
    case Task::prediction: return "prediction";
  }
  return "generation";
}

Task task_from_name(std::string_view name) {
  for (Task t : kTasks) {
    if (task_name(t) == name) return t;
  }
  fail(Errc::invalid_input, "unknown task '" + std::string(name) + "'");
}

namespace {

std::vector<std::string> required_placeholders(Task t) {
  switch (t) {
    case Task::generation: return {"{duration}", "{instruction}"};
    case Task::translation: return {"{duration}", "{motion}"};
    case Task::prediction: return {"{duration}", "{motion}", "{instruction}"};
  }
  return {};
}

std::string replace_all(std::string s, const std::string& key, const std::string& value) {
  for (std::size_t pos = s.find(key); pos != std::string::npos; pos = s.find(key, pos + value.size())) {
    s.replace(pos, key.size(), value);
  }
  return s;
}

}  // namespace

void TemplateSet::validate() const {
  for (Task t : kTasks) {
    const auto it = templates.find(t);
    if (it == templates.end() || it->second.empty()) {
      fail(Errc::config, "templates: no templates for task " + std::string(task_name(t)));
    }
    for (std::size_t i = 0; i < it->second.size(); ++i) {
      for (const auto& key : required_placeholders(t)) {
        if (it->second[i].find(key) == std::string::npos) {
          fail(Errc::config, "templates." + std::string(task_name(t)) + "[" + std::to_string(i) + "]: missing " + key);
        }
      }
    }
  }
}

TemplateSet TemplateSet::from_json(const nlohmann::json& j) {
  TemplateSet ts;
  try {
    for (Task t : kTasks) {
      const std::string key(task_name(t));
      if (j.contains(key)) ts.templates[t] = j.at(key).get<std::vector<std::string>>();
    }
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::config, std::string("templates: ") + e.what());
  }
  ts.validate();
  return ts;
}

TemplateSet TemplateSet::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::io, path + ": cannot open");
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::config, path + ": " + e.what());
  }
}

nlohmann::json TemplateSet::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [t, list] : templates) j[std::string(task_name(t))] = list;
  return j;
}

nlohmann::json Provenance::to_json() const {
  nlohmann::json aug = nlohmann::json::array();
  for (const auto& a : augments) aug.push_back(a.to_json());
  return {{"record", record},
          {"windows", windows},
          {"context_seconds", context_seconds},
          {"template", template_index},
          {"augments", aug}};
}

Provenance Provenance::from_json(const nlohmann::json& j) {
  Provenance p;
  try {
    p.record = j.at("record").get<std::string>();
    p.windows = j.at("windows").get<std::vector<int>>();
    p.context_seconds = j.value("context_seconds", 0);
    p.template_index = j.at("template").get<int>();
    for (const auto& a : j.value("augments", nlohmann::json::array())) p.augments.push_back(AugmentRecord::from_json(a));
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::invalid_input, std::string("provenance: ") + e.what());
  }
  return p;
}

nlohmann::json InstructionSample::to_json() const {
  nlohmann::json h = nlohmann::json::array();
  for (Side s : hands) h.push_back(std::string(side_name(s)));
  return {{"task", std::string(task_name(task))},
          {"source", source},
          {"prompt", prompt},
          {"context", context},
          {"target", target},
          {"target_text", target_text},
          {"duration", duration},
          {"hands", h},
          {"provenance", provenance.to_json()}};
}

SequenceRecord apply_augments(const SequenceRecord& rec, const std::vector<AugmentRecord>& augments) {
  SequenceRecord out = rec;
  const Image none;
  for (const auto& a : augments) {
    for (Side s : kSides) {
      std::vector<HandPose> poses;
      for (const auto& f : out.frames) {
        if (f.hand(s)) poses.push_back(*f.hand(s));
      }
      if (poses.empty()) continue;
      const AugmentResult r = a.kind == AugmentKind::depth_scale
                                  ? depth_scale_augment(poses, none, out.intrinsics, a.lambda_s, {a.lambda_s, a.lambda_s})
                                  : inplane_rotate_augment(poses, none, out.intrinsics, a.phi);
      std::size_t i = 0;
      for (auto& f : out.frames) {
        if (f.hand(s)) f.hand(s) = r.poses[i++];
      }
    }
  }
  return out;
}

namespace {

/// Annotation texts overlapping [t0, t1), in record order, without repeats.
std::string span_text(const SequenceRecord& rec, double t0, double t1) {
  std::vector<std::string> seen;
  for (const auto& a : rec.annotations) {
    if (a.end <= t0 || a.start >= t1) continue;
    if (std::find(seen.begin(), seen.end(), a.text) == seen.end()) seen.push_back(a.text);
  }
  std::string out;
  for (const auto& s : seen) out += (out.empty() ? "" : " ") + s;
  return out;
}

std::vector<Side> span_hands(const SequenceRecord& rec, int begin, int end) {
  std::vector<Side> out;
  for (Side s : kSides) {
    bool all = true;
    for (int t = begin; t < end && all; ++t) all = rec.frames[static_cast<std::size_t>(t)].hand(s).has_value();
    if (all) out.push_back(s);
  }
  return out;
}

MotionTokens slice_seconds(const MotionTokens& m, int from, int to) {
  MotionTokens out;
  for (const auto& h : m.hands) {
    HandTokens ht;
    ht.side = h.side;
    ht.seconds.assign(h.seconds.begin() + from, h.seconds.begin() + to);
    out.hands.push_back(std::move(ht));
  }
  return out;
}

/// Consecutive seconds starting at window `first`: windows first, first+2,
/// ... within one chunk.
int seconds_available(const Windowing& w, int first) {
  int n = 0;
  for (std::size_t k = static_cast<std::size_t>(first); k < w.windows.size(); k += 2) {
    const auto& win = w.windows[k];
    if (win.chunk != w.windows[static_cast<std::size_t>(first)].chunk ||
        win.begin != w.windows[static_cast<std::size_t>(first)].begin + n * kWindowFrames) {
      break;
    }
    ++n;
  }
  return n;
}

}  // namespace

InstructionSample replay_sample(const SequenceRecord& rec, Task task, const Provenance& prov,
                                const SampleContext& ctx) {
  if (ctx.tokenizer == nullptr || ctx.skeleton == nullptr) fail(Errc::config, "sample context lacks a tokenizer");
  if (ctx.tokenizer->config().fps != static_cast<int>(rec.fps)) {
    fail(Errc::config, "tokenizer fps differs from the record fps");
  }
  if (prov.record != rec.id) fail(Errc::invalid_input, "provenance names record '" + prov.record + "'");
  const Windowing w = chunk_and_window(rec);
  const int d = static_cast<int>(prov.windows.size());
  if (d == 0) fail(Errc::invalid_input, "provenance has no windows");
  for (int k = 0; k < d; ++k) {
    const int idx = prov.windows[static_cast<std::size_t>(k)];
    if (idx < 0 || idx >= static_cast<int>(w.windows.size()) ||
        (k > 0 && idx != prov.windows[0] + 2 * k) || seconds_available(w, prov.windows[0]) < d) {
      fail(Errc::windowing, "provenance windows are not consecutive seconds of record '" + rec.id + "'");
    }
  }
  if (task == Task::prediction && (prov.context_seconds < 1 || prov.context_seconds >= d)) {
    fail(Errc::invalid_input, "prediction needs 1 <= context seconds < duration");
  }
  const auto& list = ctx.templates.templates.at(task);
  if (prov.template_index < 0 || prov.template_index >= static_cast<int>(list.size())) {
    fail(Errc::invalid_input, "template index out of range");
  }

  const int begin = w.windows[static_cast<std::size_t>(prov.windows[0])].begin;
  const int end = begin + d * kWindowFrames;
  const std::string text = span_text(rec, begin / rec.fps, end / rec.fps);
  if (text.empty()) fail(Errc::invalid_input, "no annotation covers the span");

  const SequenceRecord src = prov.augments.empty() ? rec : apply_augments(rec, prov.augments);
  InstructionSample s;
  s.task = task;
  s.source = rec.source;
  s.duration = d;
  s.hands = span_hands(src, begin, end);
  if (s.hands.empty()) fail(Errc::invalid_input, "no hand covers the span");
  s.provenance = prov;

  std::vector<std::vector<HandPose>> poses;
  for (Side side : s.hands) {
    std::vector<HandPose> p;
    for (int t = begin; t < end; ++t) p.push_back(*src.frames[static_cast<std::size_t>(t)].hand(side));
    poses.push_back(std::move(p));
  }
  const MotionTokens motion = tokenize_motion(poses, *ctx.tokenizer, *ctx.skeleton);

  std::string prompt = list[static_cast<std::size_t>(prov.template_index)];
  switch (task) {
    case Task::generation:
      s.target = serialize_blocks(motion, ctx.vocab).ids;
      prompt = replace_all(prompt, "{instruction}", text);
      break;
    case Task::translation:
      s.context = serialize_blocks(motion, ctx.vocab).ids;
      s.target_text = text;
      prompt = replace_all(prompt, "{motion}", format_tags(s.context, ctx.vocab));
      break;
    case Task::prediction:
      s.context = serialize_blocks(slice_seconds(motion, 0, prov.context_seconds), ctx.vocab).ids;
      s.target = serialize_blocks(slice_seconds(motion, prov.context_seconds, d), ctx.vocab).ids;
      prompt = replace_all(prompt, "{instruction}", text);
      prompt = replace_all(prompt, "{motion}", format_tags(s.context, ctx.vocab));
      break;
  }
  const int shown = task == Task::prediction ? d - prov.context_seconds : d;
  s.prompt = replace_all(prompt, "{duration}", std::to_string(shown));
  return s;
}

SampleBatch instantiate_templates(const SequenceRecord& rec, const Windowing& windows, const SampleContext& ctx,
                                  const SampleOptions& opts, Rng& rng) {
  if (opts.max_seconds < 1) fail(Errc::config, "max_seconds must be at least 1");
  ctx.templates.validate();
  SampleBatch batch;
  for (const auto& win : windows.windows) {
    const int fit = std::min(opts.max_seconds, seconds_available(windows, win.index));
    for (Task task : kTasks) {
      if (task == Task::prediction && fit < 2) continue;
      Provenance prov;
      prov.record = rec.id;
      int d = 0;
      if (task == Task::prediction) {
        d = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(fit - 1)));
        prov.context_seconds = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(d - 1)));
      } else {
        d = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(fit)));
      }
      prov.template_index = static_cast<int>(rng.below(ctx.templates.templates.at(task).size()));
      for (int k = 0; k < d; ++k) prov.windows.push_back(win.index + 2 * k);

      const int begin = win.begin;
      const int end = begin + d * kWindowFrames;
      if (span_text(rec, begin / rec.fps, end / rec.fps).empty() || span_hands(rec, begin, end).empty()) {
        ++batch.skipped;
        continue;
      }
      batch.samples.push_back(replay_sample(rec, task, prov, ctx));
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Balancing

BalanceConfig BalanceConfig::from_json(const nlohmann::json& j) {
  BalanceConfig c;
  try {
    c.targets = j.at("targets").get<std::map<std::string, int>>();
    if (j.contains("task_mix")) {
      c.task_mix.clear();
      for (const auto& [k, v] : j.at("task_mix").items()) c.task_mix[task_from_name(k)] = v.get<double>();
    }
    if (j.contains("depth_range")) {
      const auto r = j.at("depth_range").get<std::vector<double>>();
      if (r.size() != 2) fail(Errc::config, "balance: depth_range needs two values");
      c.depth_range = {r[0], r[1]};
    }
    c.rotation_probability = j.value("rotation_probability", c.rotation_probability);
    c.sample.max_seconds = j.value("max_seconds", c.sample.max_seconds);
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::config, std::string("balance config: ") + e.what());
  } catch (const Error& e) {
    fail(Errc::config, std::string("balance config: ") + e.what());
  }
  for (const auto& [src, n] : c.targets) {
    if (n < 0) fail(Errc::config, "balance: negative target for source '" + src + "'");
  }
  double total = 0.0;
  for (const auto& [t, share] : c.task_mix) {
    if (!(share >= 0.0)) fail(Errc::config, "balance: task shares must be non-negative");
    total += share;
  }
  if (!(total > 0.0)) fail(Errc::config, "balance: task shares sum to zero");
  if (!(c.depth_range.lambda_min > 0.0 && c.depth_range.lambda_min <= c.depth_range.lambda_max)) {
    fail(Errc::config, "balance: invalid depth_range");
  }
  return c;
}

nlohmann::json BalanceConfig::to_json() const {
  nlohmann::json mix = nlohmann::json::object();
  for (const auto& [t, share] : task_mix) mix[std::string(task_name(t))] = share;
  return {{"targets", targets},
          {"task_mix", mix},
          {"depth_range", {depth_range.lambda_min, depth_range.lambda_max}},
          {"rotation_probability", rotation_probability},
          {"max_seconds", sample.max_seconds}};
}

std::string BalanceResult::manifest() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const nlohmann::json line = {{"index", i},
                                 {"task", std::string(task_name(s.task))},
                                 {"source", s.source},
                                 {"duration", s.duration},
                                 {"provenance", s.provenance.to_json()}};
    os << line.dump() << '\n';
  }
  return os.str();
}

BalanceResult balance_corpus(const std::vector<SequenceRecord>& records, const BalanceConfig& cfg,
                             const SampleContext& ctx, Rng& rng) {
  std::map<std::string, const SequenceRecord*> by_id;
  for (const auto& r : records) by_id[r.id] = &r;

  double share_total = 0.0;
  for (const auto& [t, share] : cfg.task_mix) share_total += share;

  BalanceResult out;
  for (const auto& [source, target] : cfg.targets) {
    if (target == 0) continue;
    std::map<Task, std::vector<InstructionSample>> base;
    bool any = false;
    for (const auto& r : records) {
      if (r.source != source) continue;
      any = true;
      Rng local = rng.split("instantiate:" + r.id);
      auto batch = instantiate_templates(r, chunk_and_window(r), ctx, cfg.sample, local);
      for (auto& s : batch.samples) base[s.task].push_back(std::move(s));
    }
    if (!any) fail(Errc::balance, "source '" + source + "' has no records");

    // Per-task targets; rounding remainder goes to the last task with a share.
    std::vector<std::pair<Task, int>> quotas;
    int assigned = 0;
    for (const auto& [t, share] : cfg.task_mix) {
      if (share <= 0.0) continue;
      const int q = static_cast<int>(std::lround(target * share / share_total));
      quotas.emplace_back(t, q);
      assigned += q;
    }
    quotas.back().second += target - assigned;

    for (const auto& [task, quota] : quotas) {
      if (quota <= 0) continue;
      auto& pool = base[task];
      if (pool.empty()) {
        fail(Errc::balance, "source '" + source + "' has no " + std::string(task_name(task)) + " samples");
      }
      Rng pick = rng.split("select:" + source + ":" + std::string(task_name(task)));
      if (static_cast<int>(pool.size()) >= quota) {
        std::vector<std::size_t> idx(pool.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        for (int i = 0; i < quota; ++i) {
          const std::size_t j = static_cast<std::size_t>(i) + pick.below(idx.size() - static_cast<std::size_t>(i));
          std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
        }
        idx.resize(static_cast<std::size_t>(quota));
        std::sort(idx.begin(), idx.end());
        for (std::size_t i : idx) out.samples.push_back(pool[i]);
      } else {
        for (const auto& s : pool) out.samples.push_back(s);
        for (int n = static_cast<int>(pool.size()); n < quota; ++n) {
          const auto& seed = pool[pick.below(pool.size())];
          Provenance prov = seed.provenance;
          AugmentRecord a;
          a.source_id = prov.record;
          if (pick.bernoulli(cfg.rotation_probability)) {
            a.kind = AugmentKind::inplane_rotation;
            a.phi = std::numbers::pi - 2.0 * std::numbers::pi * pick.uniform();
          } else {
            a.kind = AugmentKind::depth_scale;
            a.lambda_s = pick.uniform(cfg.depth_range.lambda_min, cfg.depth_range.lambda_max);
          }
          prov.augments.push_back(a);
          out.samples.push_back(replay_sample(*by_id.at(prov.record), task, prov, ctx));
          ++out.augmented;
        }
      }
      out.counts[source][task] = quota;
    }
  }
  return out;
}

std::vector<InstructionSample> replay_manifest(const std::string& manifest,
                                               const std::vector<SequenceRecord>& records, const SampleContext& ctx) {
  std::map<std::string, const SequenceRecord*> by_id;
  for (const auto& r : records) by_id[r.id] = &r;
  std::vector<InstructionSample> out;
  std::istringstream in(manifest);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::invalid_input, std::string("manifest: ") + e.what());
    }
    const Provenance prov = Provenance::from_json(j.at("provenance"));
    const auto it = by_id.find(prov.record);
    if (it == by_id.end()) fail(Errc::balance, "manifest names unknown record '" + prov.record + "'");
    out.push_back(replay_sample(*it->second, task_from_name(j.at("task").get<std::string>()), prov, ctx));
  }
  return out;
}

}  // namespace hmt
