#pragma once

#include "hmt/mano.hpp"
#include "hmt/rng.hpp"

#include <Eigen/Core>
#include "json.hpp"

#include <span>
#include <string>
#include <vector>

namespace hmt {

struct QuantizerConfig {
  int alpha = 4;             // temporal downsampling ratio
  int groups = 2;            // n
  int layers = 8;            // L residual layers
  int codebook_wrist = 4096; // K_w
  int codebook_finger = 4096;// K_f
  int code_dim = 512;        // d
  int fps = 15;
  FeatureVariant variant = FeatureVariant::D162;
  /// Separate wrist/finger tokenizers. When false a single tokenizer covers
  /// every feature column and the wrist loss term is active.
  bool part_level = true;
  /// Width of an optional tanh hidden layer in encoder and decoder; 0 keeps
  /// both as single linear maps.
  int hidden = 0;

  double ema_decay = 0.99;
  double ema_epsilon = 1e-5;
  /// Consecutive hit-less EMA updates before a code is reseeded; 0 disables.
  int dead_code_patience = 100;

  int num_parts() const { return part_level ? 2 : 1; }
  int steps_per_second() const { return (fps + alpha - 1) / alpha; }
  int group_width() const { return code_dim / groups; }
  int tokens_per_hand_second() const { return num_parts() * groups * layers * steps_per_second(); }
  int vocabulary_size() const { return part_level ? codebook_wrist + codebook_finger : codebook_wrist; }

  /// Throws Errc::config.
  void validate() const;
};

/// Shared-across-layers codebook of one quantizer group, tracked as EMA
/// cluster means.
struct Codebook {
  Eigen::MatrixXd codes;      // K x width
  Eigen::VectorXd ema_count;  // K
  Eigen::MatrixXd ema_sum;    // K x width
  std::vector<int> idle;      // consecutive updates without a hit
  double decay = 0.99;
  double epsilon = 1e-5;

  Codebook() = default;
  Codebook(Eigen::MatrixXd initial_codes, double decay, double epsilon);

  int size() const { return static_cast<int>(codes.rows()); }
  int width() const { return static_cast<int>(codes.cols()); }

  /// Index of the nearest code in squared Euclidean distance; the lowest
  /// index wins ties.
  int nearest(const Eigen::Ref<const Eigen::VectorXd>& r) const;
};

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;    // out
};

/// One linear layer, or linear-tanh-linear when a hidden width is set.
struct Mlp {
  std::vector<DenseLayer> layers;

  int input_width() const { return static_cast<int>(layers.front().weight.cols()); }
  int output_width() const { return static_cast<int>(layers.back().weight.rows()); }

  /// Rows are samples.
  Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const;
};

struct PartModel {
  std::string name;           // "wrist", "finger" or "whole"
  std::vector<int> columns;   // feature columns owned by this part
  int codebook_size = 0;
  int token_offset = 0;       // first token id of this part
  /// Per-column normalization applied before the encoder and undone after
  /// the decoder. Losses are measured in normalized units.
  Eigen::VectorXd feature_mean;
  Eigen::VectorXd feature_std;
  Mlp encoder;                // alpha*|columns| -> d
  Mlp decoder;                // d -> alpha*|columns|
  std::vector<Codebook> books;  // one per group

  int width() const { return static_cast<int>(columns.size()); }
};

class PartTokenizer {
 public:
  PartTokenizer() = default;

  /// Small random weights and empty codebooks; see Trainer for data-driven
  /// initialization.
  static PartTokenizer create(const QuantizerConfig& config, Rng rng);

  const QuantizerConfig& config() const { return config_; }
  std::vector<PartModel>& parts() { return parts_; }
  const std::vector<PartModel>& parts() const { return parts_; }
  const PartModel& part(int i) const { return parts_.at(static_cast<std::size_t>(i)); }

  bool codebooks_ready() const;

  /// Binary little-endian model file (magic HGRQ) plus `<path>.json` sidecar.
  void save(const std::string& path) const;
  static PartTokenizer load(const std::string& path);
  nlohmann::json config_json() const;

 private:
  QuantizerConfig config_;
  std::vector<PartModel> parts_;
};

// ---------------------------------------------------------------------------
// Windowing and the encoder/quantizer/decoder stages

/// Appends zero rows up to a multiple of alpha.
FeatureSequence pad_window(const FeatureSequence& fs, int alpha);

/// ceil(T/alpha) rows of alpha stacked frames of the given columns.
Eigen::MatrixXd stack_frames(const Eigen::MatrixXd& data, std::span<const int> columns, int alpha);
/// Inverse of stack_frames, truncated to `frames` rows.
Eigen::MatrixXd unstack_frames(const Eigen::MatrixXd& stacked, int width, int alpha, int frames);

/// Latent z, ceil(T/alpha) x d. Throws Errc::config on a width mismatch.
Eigen::MatrixXd encode_window(const FeatureSequence& fs, int part, const PartTokenizer& tok);

struct GrqResult {
  std::vector<int> indices;  // steps x groups x layers, row-major
  Eigen::MatrixXd z_hat;     // steps x d
};

/// Greedy residual descent per group. Throws Errc::uninitialized_codebook.
GrqResult grq_quantize(const Eigen::MatrixXd& z, std::span<const Codebook> books, int layers);

/// Sum of selected codes per group. Throws Errc::invalid_token with the
/// flat position of an out-of-range index.
Eigen::MatrixXd grq_dequantize(std::span<const int> indices, int steps, std::span<const Codebook> books,
                               int layers);

/// frames x |part columns|. Throws Errc::shape_mismatch.
Eigen::MatrixXd decode_window(const Eigen::MatrixXd& z_hat, int part, const PartTokenizer& tok, int frames);

// ---------------------------------------------------------------------------
// Motion tokens

struct HandTokens {
  Side side = Side::right;
  std::vector<std::vector<int>> seconds;  // each of tokens_per_hand_second ids
};

struct MotionTokens {
  std::vector<HandTokens> hands;
};

/// Token ids of one window of `fps` frames: parts in order, each
/// (timestep, group, layer) row-major, offset by the part's token_offset.
std::vector<int> tokenize_window(const FeatureSequence& window, const PartTokenizer& tok);

/// Features of one window from its ids. Throws Errc::invalid_token or
/// Errc::malformed_block.
FeatureSequence detokenize_window(std::span<const int> ids, const PartTokenizer& tok,
                                  const ShapeVec& beta_ref, Side side);

/// Each hand's poses must cover whole seconds at config fps (Errc::windowing).
MotionTokens tokenize_motion(std::span<const std::vector<HandPose>> hands, const PartTokenizer& tok,
                             const HandSkeleton& skel);

/// betas[i] is the constant shape of hand i.
std::vector<std::vector<HandPose>> detokenize_motion(const MotionTokens& tokens, const PartTokenizer& tok,
                                                     std::span<const ShapeVec> betas);

// ---------------------------------------------------------------------------
// Training

struct CodeAssignments {
  Eigen::VectorXd hits;   // K
  Eigen::MatrixXd sums;   // K x width, residual vectors summed per code
  Eigen::MatrixXd pool;   // candidate residuals for dead-code reseeding
};

/// EMA codebook update; reseeds codes idle for `patience` updates from the
/// pool when rng is given and patience > 0.
void ema_update(Codebook& book, const CodeAssignments& assignments, Rng* rng, int patience);

struct LossReport {
  double recon = 0.0;
  double commit = 0.0;
  double wrist = 0.0;
  double total = 0.0;
};

struct TrainOptions {
  double lambda1 = 0.02;  // commitment
  double lambda2 = 1.0;   // wrist (non part-level only)
  double learning_rate = 2e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  bool update_codebooks = true;
  int jobs = 1;
};

/// Layer gradients, mirroring PartModel encoder/decoder layers.
struct PartGradients {
  std::vector<DenseLayer> encoder;
  std::vector<DenseLayer> decoder;
};

/// Quantizer outputs recorded at one parameter point. Passing it back as
/// `frozen` evaluates the straight-through surrogate: z_q = z + (z_hat0 - z0)
/// and commitment against the recorded partial sums.
struct QuantizerTrace {
  struct Part {
    Eigen::MatrixXd z;                      // rows x d
    Eigen::MatrixXd z_hat;                  // rows x d
    std::vector<Eigen::MatrixXd> partials;  // per layer, rows x d
    std::vector<int> indices;               // rows x groups x layers
  };
  std::vector<Part> parts;
};

/// Weighted reconstruction, commitment and wrist loss over a batch of windows; fills gradients when requested.
LossReport compute_loss(std::span<const FeatureSequence> batch, const PartTokenizer& tok,
                        const TrainOptions& opts, std::vector<PartGradients>* grads = nullptr,
                        QuantizerTrace* record = nullptr, const QuantizerTrace* frozen = nullptr);

class Trainer {
 public:
  static constexpr double kDivergenceFactor = 1e6;

  Trainer(PartTokenizer& tok, TrainOptions opts, Rng rng);

  /// Principal-component encoder/decoder initialization followed by per-layer
  /// k-means++ codebook seeding on the batch.
  void initialize(std::span<const FeatureSequence> batch);

  /// One Adam step on encoder/decoder plus an EMA codebook update. Returns
  /// the pre-step losses. Throws Errc::training_diverged on a non-finite
  /// loss or one above kDivergenceFactor times the first step's loss.
  LossReport step(std::span<const FeatureSequence> batch);

  const TrainOptions& options() const { return opts_; }
  TrainOptions& options() { return opts_; }

 private:
  struct Moments {
    std::vector<DenseLayer> m_enc, v_enc, m_dec, v_dec;
  };

  PartTokenizer& tok_;
  TrainOptions opts_;
  Rng rng_;
  std::vector<Moments> moments_;
  long step_count_ = 0;
  double first_total_ = 0.0;
};

/// Per-layer k-means++ seeding of one group's shared codebook from latent
/// rows (quota K/L per layer, residuals taken against the codes so far).
Codebook seed_codebook(const Eigen::MatrixXd& group_latents, int size, int layers, double decay,
                       double epsilon, Rng& rng);

}  // namespace hmt
