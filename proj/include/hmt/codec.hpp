#pragma once

#include "hmt/mano.hpp"
#include "hmt/rng.hpp"
#include "hmt/tokenizer.hpp"

#include "json.hpp"

#include <Eigen/Core>

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace hmt {

/// Half-open id interval.
struct IdRange {
  int begin = 0;
  int end = 0;

  int size() const { return end - begin; }
  bool contains(int id) const { return id >= begin && id < end; }
};

enum class TokenClass { text, motion, mot_open, mot_close, img_open, img_close, img_context, eos, unknown };

struct Vocabulary {
  IdRange text{0, 32000};
  IdRange motion{32006, 32006 + 8192};
  int mot_open = 32000;
  int mot_close = 32001;
  int img_open = 32002;
  int img_close = 32003;
  int img_context = 32004;
  int eos = 32005;
  int block_size = 128;  // motion ids per block

  /// Text ids, six specials, then `motion_codes` motion ids.
  static Vocabulary standard(int motion_codes, int block_size, int text_size = 32000);

  /// One past the largest id.
  int size() const;
  TokenClass classify(int id) const;
  /// Throws Errc::config when ranges overlap or specials collide.
  void validate() const;

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);
  static Vocabulary load(const std::string& path);
};

struct TokenStream {
  std::vector<int> ids;
};

enum class SegmentKind { text, motion_block, image_span };

/// [begin, end) over stream positions; motion blocks include delimiters.
struct Segment {
  SegmentKind kind = SegmentKind::text;
  int begin = 0;
  int end = 0;
};

struct ParseResult {
  bool valid = true;
  std::vector<Segment> segments;
  int position = -1;   // first offending position when invalid
  std::string reason;  // e.g. "short block", "unterminated block"
};

/// Blocks are interleaved second-major: second 0 of every hand, then second 1.
/// Throws Errc::serialization on a partial block or an id outside the motion
/// range.
TokenStream serialize_blocks(const MotionTokens& tokens, const Vocabulary& vocab);

/// Structural validation; never throws.
ParseResult parse_stream(std::span<const int> ids, const Vocabulary& vocab);

/// Inverse of serialize_blocks for `hands` hands with the given sides. Text
/// and image segments are skipped. Throws Errc::malformed_block for an
/// invalid stream or a block count that does not divide among the hands.
MotionTokens deserialize_blocks(std::span<const int> ids, const Vocabulary& vocab, std::span<const Side> sides);

/// Whitespace-separated integer ids.
std::string format_ids(std::span<const int> ids);
/// Readable tags: `<MOT> m_17 ... </MOT>`, text as `t_<id>`.
std::string format_tags(std::span<const int> ids, const Vocabulary& vocab);
/// Accepts either form (also mixed). Throws Errc::invalid_input.
std::vector<int> parse_token_text(const std::string& text, const Vocabulary& vocab);

// ---------------------------------------------------------------------------
// Decoding modes

enum class DecodeMode { free, block, soft };

std::string_view mode_name(DecodeMode m);
DecodeMode mode_from_name(std::string_view name);

struct DecodeState {
  DecodeMode mode = DecodeMode::block;
  bool inside_block = false;
  int emitted_in_block = 0;
  int blocks_done = 0;
  std::optional<int> target_blocks;

  /// Consumes one generated id. Throws Errc::invalid_token when the id is
  /// not allowed in the current state (constrained modes only).
  void advance(int id, const Vocabulary& vocab);
};

/// Ids the constrained modes may emit next. Throws Errc::mode in free mode.
std::vector<bool> allowed_mask(const DecodeState& state, const Vocabulary& vocab);

/// Feature-space mean of two equally shaped windows. 6D variants average
/// columns directly (re-orthonormalized at decode); axis-angle variants
/// average each rotation in 6D and convert back. Throws Errc::shape_mismatch.
FeatureSequence blend_features(const FeatureSequence& pred, const FeatureSequence& gt);

/// Soft mode anchor: blend predicted and ground-truth windows and
/// re-tokenize. Returns one hand-second of token ids.
std::vector<int> soft_blend(std::span<const HandPose> pred, std::span<const HandPose> gt, const PartTokenizer& tok,
                            const HandSkeleton& skel);

// ---------------------------------------------------------------------------
// Training-side utilities

struct LossFilterConfig {
  double q_low = 15.0;
  double q_high = 95.0;
  double mask_prob = 0.5;

  /// Throws Errc::config.
  void validate() const;
};

/// With probability p (drawn per call) sets every non-motion logit to the
/// lowest finite double when the label is a motion id. Returns whether the
/// mask fired.
bool logit_mask(std::span<double> logits, bool label_is_motion, double p, const Vocabulary& vocab, Rng& rng);

/// Nearest-rank value at percentile q in [0, 100] of a sorted list.
double nearest_rank(std::span<const double> sorted, double q);

/// Mean of the losses between the q_low and q_high nearest-rank percentiles
/// (inclusive); the plain mean when that set is empty. Throws
/// Errc::invalid_input on an empty list.
double filtered_motion_loss(std::span<const double> losses, const LossFilterConfig& cfg);

/// Mean negative log-softmax of the labels over rows whose mask entry is
/// nonzero. logits is positions x vocabulary. Throws Errc::shape_mismatch or
/// Errc::invalid_input.
double token_cross_entropy(const Eigen::MatrixXd& logits, std::span<const int> labels,
                           std::span<const std::uint8_t> mask);

}  // namespace hmt
