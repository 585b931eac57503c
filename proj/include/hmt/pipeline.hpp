#pragma once

#include "hmt/alignment.hpp"
#include "hmt/codec.hpp"
#include "hmt/mano.hpp"
#include "hmt/rng.hpp"
#include "hmt/tokenizer.hpp"

#include "json.hpp"

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace hmt {

inline constexpr double kPipelineFps = 15.0;

struct FrameHands {
  std::optional<HandPose> left;
  std::optional<HandPose> right;
  std::string image;  // optional per-frame PNG reference

  std::optional<HandPose>& hand(Side s) { return s == Side::left ? left : right; }
  const std::optional<HandPose>& hand(Side s) const { return s == Side::left ? left : right; }
};

/// Time-stamped description; `hand` is "both", "left" or "right".
struct Annotation {
  double start = 0.0;  // seconds from the record start
  double end = 0.0;
  std::string text;
  std::string hand = "both";
};

struct SequenceRecord {
  std::string id;
  std::string source;
  double fps = kPipelineFps;
  CameraIntrinsics intrinsics;
  std::vector<FrameHands> frames;
  std::vector<Annotation> annotations;

  int length() const { return static_cast<int>(frames.size()); }
  /// True when the hand is present in every frame.
  bool hand_complete(Side s) const;

  nlohmann::json to_json() const;
  /// Throws Errc::ingest naming the offending field path.
  static SequenceRecord from_json(const nlohmann::json& j);
};

/// Nearest-frame selection onto `fps`; annotations keep their times.
SequenceRecord resample(const SequenceRecord& rec, double fps = kPipelineFps);

/// Parses one JSON-lines record file (one record per line, blank lines
/// ignored), resampling each record to 15 FPS. Throws Errc::ingest or
/// Errc::io.
std::vector<SequenceRecord> ingest(const std::string& path);
void write_records(const std::string& path, const std::vector<SequenceRecord>& records);

// ---------------------------------------------------------------------------
// Cleaning

struct CleanOptions {
  double jump_threshold = 0.15;  // meters per frame
  int max_gap = 5;               // frames
};

struct CleanReport {
  int swaps = 0;        // left/right relabelings applied
  int invalidated = 0;  // frames dropped for a wrist jump
  int filled = 0;       // frames rebuilt by interpolation
  int splits = 0;       // extra pieces produced
  int trimmed = 0;      // frames outside every piece

  nlohmann::json to_json() const;
};

struct CleanResult {
  std::vector<SequenceRecord> pieces;  // "id" when whole, else "id#0", "id#1", ...
  CleanReport report;
};

/// Swap repair, wrist-jump invalidation, interpolation of short gaps and
/// splitting at long ones. Hands absent from the whole record are ignored.
CleanResult clean_sequence(const SequenceRecord& rec, const CleanOptions& opts = {});

/// Sum over frames of the wrist displacement of one hand between
/// consecutive frames where it is present.
double wrist_jump_energy(const SequenceRecord& rec, Side side);

// ---------------------------------------------------------------------------
// Chunks and windows

inline constexpr int kChunkFrames = 150;  // 10 s at 15 FPS
inline constexpr int kWindowFrames = 15;

struct Chunk {
  int index = 0;
  int begin = 0;  // frame range [begin, end)
  int end = 0;
  bool sub_second = false;
  std::vector<int> annotation_frames;  // 2 FPS sampling, record frame indices
};

struct Window {
  int index = 0;  // record-wide, in order
  int chunk = 0;
  int begin = 0;  // first frame; window covers kWindowFrames frames
};

struct Windowing {
  std::vector<Chunk> chunks;
  std::vector<Window> windows;
};

/// Window starts inside each chunk are round(k * 7.5) frames (0.5 s stride).
Windowing chunk_and_window(const SequenceRecord& rec);

// ---------------------------------------------------------------------------
// Instruction samples

enum class Task { generation, translation, prediction };
inline constexpr std::array<Task, 3> kTasks{Task::generation, Task::translation, Task::prediction};

std::string_view task_name(Task t);
Task task_from_name(std::string_view name);

struct TemplateSet {
  std::map<Task, std::vector<std::string>> templates;

  /// Throws Errc::config when a task has no templates or a template lacks
  /// "{duration}" or a placeholder its task needs.
  void validate() const;
  static TemplateSet from_json(const nlohmann::json& j);
  static TemplateSet load(const std::string& path);
  nlohmann::json to_json() const;
};

/// Everything needed to rebuild a sample from its record.
struct Provenance {
  std::string record;
  std::vector<int> windows;  // one per second, consecutive seconds
  int context_seconds = 0;   // prediction only
  int template_index = 0;
  std::vector<AugmentRecord> augments;

  nlohmann::json to_json() const;
  static Provenance from_json(const nlohmann::json& j);
};

struct InstructionSample {
  Task task = Task::generation;
  std::string source;
  std::string prompt;
  std::vector<int> context;  // motion stream ids embedded in the prompt
  std::vector<int> target;   // motion stream ids (generation, prediction)
  std::string target_text;   // translation
  int duration = 0;          // seconds of the span
  std::vector<Side> hands;
  Provenance provenance;

  nlohmann::json to_json() const;
};

struct SampleContext {
  const PartTokenizer* tokenizer = nullptr;
  const HandSkeleton* skeleton = nullptr;
  Vocabulary vocab;
  TemplateSet templates;
};

struct SampleOptions {
  int max_seconds = 3;
};

struct SampleBatch {
  std::vector<InstructionSample> samples;
  int skipped = 0;  // spans without annotation text
};

/// Rule-based instantiation: every window opens one generation and one
/// translation sample over a random span of up to max_seconds consecutive
/// seconds, and a prediction sample when at least two seconds fit. Template
/// choice and span lengths come from rng.
SampleBatch instantiate_templates(const SequenceRecord& rec, const Windowing& windows, const SampleContext& ctx,
                                  const SampleOptions& opts, Rng& rng);

/// Rebuilds a sample from its provenance alone (deterministic).
InstructionSample replay_sample(const SequenceRecord& rec, Task task, const Provenance& prov,
                                const SampleContext& ctx);

/// Applies augments in order to every pose of the record.
SequenceRecord apply_augments(const SequenceRecord& rec, const std::vector<AugmentRecord>& augments);

// ---------------------------------------------------------------------------
// Balancing

struct BalanceConfig {
  std::map<std::string, int> targets;  // samples per source
  std::map<Task, double> task_mix{{Task::generation, 1.0 / 3}, {Task::translation, 1.0 / 3},
                                  {Task::prediction, 1.0 / 3}};
  AugmentRange depth_range;
  double rotation_probability = 0.5;  // otherwise depth scaling
  SampleOptions sample;

  static BalanceConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct BalanceResult {
  std::vector<InstructionSample> samples;
  std::map<std::string, std::map<Task, int>> counts;
  int augmented = 0;

  /// One JSON line per sample: index, task, source, duration, provenance.
  std::string manifest() const;
};

/// Per (source, task) stratum: subsample when the stratum has enough base
/// samples, otherwise keep them all and add augmented re-instantiations of
/// randomly drawn base samples. Throws Errc::balance when a source with a
/// positive target has no sample for a task with positive share.
BalanceResult balance_corpus(const std::vector<SequenceRecord>& records, const BalanceConfig& cfg,
                             const SampleContext& ctx, Rng& rng);

/// Rebuilds every sample of a manifest. Throws Errc::balance on an unknown
/// record id.
std::vector<InstructionSample> replay_manifest(const std::string& manifest,
                                               const std::vector<SequenceRecord>& records, const SampleContext& ctx);

}  // namespace hmt
