#include "hmt/tokenizer.hpp"

#include "hmt/error.hpp"
#include "hmt/parallel.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace hmt {

void QuantizerConfig::validate() const {
  auto bad = [](const std::string& what) { fail(Errc::config, "quantizer config: " + what); };
  if (alpha < 1) bad("alpha must be >= 1");
  if (groups < 1) bad("groups must be >= 1");
  if (layers < 1) bad("layers must be >= 1");
  if (codebook_wrist < 1 || codebook_finger < 1) bad("codebook sizes must be >= 1");
  if (code_dim < 1 || code_dim % groups != 0) bad("code_dim must be a positive multiple of groups");
  if (fps < 1) bad("fps must be >= 1");
  if (hidden < 0) bad("hidden width must be >= 0");
  if (!(ema_decay > 0.0 && ema_decay < 1.0)) bad("ema_decay must be in (0, 1)");
  if (!(ema_epsilon > 0.0)) bad("ema_epsilon must be > 0");
  if (dead_code_patience < 0) bad("dead_code_patience must be >= 0");
}

// ---------------------------------------------------------------------------
// Codebook

Codebook::Codebook(Eigen::MatrixXd initial_codes, double decay_, double epsilon_)
    : codes(std::move(initial_codes)), decay(decay_), epsilon(epsilon_) {
  ema_count = Eigen::VectorXd::Ones(codes.rows());
  ema_sum = codes;
  idle.assign(static_cast<std::size_t>(codes.rows()), 0);
}

int Codebook::nearest(const Eigen::Ref<const Eigen::VectorXd>& r) const {
  // Same ranking as the batched quantizer: |c|^2 - 2 r.c.
  int best = 0;
  double best_score = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < codes.rows(); ++k) {
    const double score = codes.row(k).squaredNorm() - 2.0 * codes.row(k).dot(r.transpose());
    if (score < best_score) {
      best_score = score;
      best = static_cast<int>(k);
    }
  }
  return best;
}

void ema_update(Codebook& book, const CodeAssignments& a, Rng* rng, int patience) {
  const double g = book.decay;
  for (int k = 0; k < book.size(); ++k) {
    book.ema_count[k] = g * book.ema_count[k] + (1.0 - g) * a.hits[k];
    book.ema_sum.row(k) = g * book.ema_sum.row(k) + (1.0 - g) * a.sums.row(k);
    book.codes.row(k) = book.ema_sum.row(k) / std::max(book.ema_count[k], book.epsilon);
    auto& idle = book.idle[static_cast<std::size_t>(k)];
    idle = a.hits[k] > 0 ? 0 : idle + 1;
    if (rng != nullptr && patience > 0 && idle >= patience && a.pool.rows() > 0) {
      const auto pick = static_cast<Eigen::Index>(rng->below(static_cast<std::uint64_t>(a.pool.rows())));
      book.codes.row(k) = a.pool.row(pick);
      book.ema_sum.row(k) = book.codes.row(k);
      book.ema_count[k] = 1.0;
      idle = 0;
    }
  }
}

// ---------------------------------------------------------------------------
// MLP

namespace {

struct MlpCache {
  std::vector<Eigen::MatrixXd> inputs;  // input of each layer
};

Eigen::MatrixXd mlp_forward(const Mlp& mlp, const Eigen::MatrixXd& x, MlpCache* cache) {
  Eigen::MatrixXd h = x;
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    if (cache != nullptr) cache->inputs.push_back(h);
    const DenseLayer& l = mlp.layers[i];
    Eigen::MatrixXd out = h * l.weight.transpose();
    out.rowwise() += l.bias.transpose();
    if (i + 1 < mlp.layers.size()) out = out.array().tanh().matrix();
    h = std::move(out);
  }
  return h;
}

/// Accumulates parameter gradients; returns dL/dx.
Eigen::MatrixXd mlp_backward(const Mlp& mlp, const MlpCache& cache, Eigen::MatrixXd g,
                             std::vector<DenseLayer>& grads) {
  for (std::size_t i = mlp.layers.size(); i-- > 0;) {
    const Eigen::MatrixXd& in = cache.inputs[i];
    grads[i].weight.noalias() += g.transpose() * in;
    grads[i].bias += g.colwise().sum().transpose();
    Eigen::MatrixXd next = g * mlp.layers[i].weight;
    if (i > 0) next = next.cwiseProduct((1.0 - in.array().square()).matrix());
    g = std::move(next);
  }
  return g;
}

std::vector<DenseLayer> zeros_like(const std::vector<DenseLayer>& layers) {
  std::vector<DenseLayer> out;
  for (const auto& l : layers) {
    out.push_back({Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()), Eigen::VectorXd::Zero(l.bias.size())});
  }
  return out;
}

DenseLayer random_layer(int out, int in, Rng& rng) {
  DenseLayer l{Eigen::MatrixXd(out, in), Eigen::VectorXd::Zero(out)};
  const double scale = 1.0 / std::sqrt(static_cast<double>(in));
  for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = scale * rng.normal();
  return l;
}

Mlp random_mlp(int in, int out, int hidden, Rng& rng) {
  Mlp m;
  if (hidden > 0) {
    m.layers.push_back(random_layer(hidden, in, rng));
    m.layers.push_back(random_layer(out, hidden, rng));
  } else {
    m.layers.push_back(random_layer(out, in, rng));
  }
  return m;
}

}  // namespace

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x) const { return mlp_forward(*this, x, nullptr); }

// ---------------------------------------------------------------------------
// PartTokenizer

PartTokenizer PartTokenizer::create(const QuantizerConfig& config, Rng rng) {
  config.validate();
  PartTokenizer tok;
  tok.config_ = config;
  const FeatureSplit split = feature_split(config.variant);
  auto make = [&](std::string name, std::vector<int> cols, int k, int offset) {
    PartModel p;
    p.name = std::move(name);
    p.columns = std::move(cols);
    p.codebook_size = k;
    p.token_offset = offset;
    p.feature_mean = Eigen::VectorXd::Zero(p.width());
    p.feature_std = Eigen::VectorXd::Ones(p.width());
    Rng part_rng = rng.split(p.name);
    p.encoder = random_mlp(config.alpha * p.width(), config.code_dim, config.hidden, part_rng);
    p.decoder = random_mlp(config.code_dim, config.alpha * p.width(), config.hidden, part_rng);
    p.books.resize(static_cast<std::size_t>(config.groups));
    return p;
  };
  if (config.part_level) {
    tok.parts_.push_back(make("wrist", split.wrist, config.codebook_wrist, 0));
    tok.parts_.push_back(make("finger", split.finger, config.codebook_finger, config.codebook_wrist));
  } else {
    std::vector<int> all(static_cast<std::size_t>(feature_dim(config.variant)));
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    tok.parts_.push_back(make("whole", all, config.codebook_wrist, 0));
  }
  return tok;
}

bool PartTokenizer::codebooks_ready() const {
  for (const auto& p : parts_) {
    for (const auto& b : p.books) {
      if (b.size() == 0) return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Windowing

FeatureSequence pad_window(const FeatureSequence& fs, int alpha) {
  if (fs.frames() < 1) fail(Errc::windowing, "pad_window: empty sequence");
  if (alpha < 1) fail(Errc::config, "pad_window: alpha must be >= 1");
  const int padded = alpha * ((fs.frames() + alpha - 1) / alpha);
  FeatureSequence out = fs;
  if (padded != fs.frames()) {
    out.data = Eigen::MatrixXd::Zero(padded, fs.data.cols());
    out.data.topRows(fs.frames()) = fs.data;
  }
  return out;
}

Eigen::MatrixXd stack_frames(const Eigen::MatrixXd& data, std::span<const int> columns, int alpha) {
  const int frames = static_cast<int>(data.rows());
  const int steps = (frames + alpha - 1) / alpha;
  const int width = static_cast<int>(columns.size());
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(steps, alpha * width);
  for (int t = 0; t < frames; ++t) {
    const int s = t / alpha;
    const int slot = t % alpha;
    for (int c = 0; c < width; ++c) out(s, slot * width + c) = data(t, columns[static_cast<std::size_t>(c)]);
  }
  return out;
}

Eigen::MatrixXd unstack_frames(const Eigen::MatrixXd& stacked, int width, int alpha, int frames) {
  Eigen::MatrixXd out(frames, width);
  for (int t = 0; t < frames; ++t) {
    out.row(t) = stacked.row(t / alpha).segment((t % alpha) * width, width);
  }
  return out;
}

namespace {

/// Stacked and normalized encoder input of one window for one part.
Eigen::MatrixXd part_input(const Eigen::MatrixXd& data, const PartModel& p, int alpha) {
  Eigen::MatrixXd stacked = stack_frames(data, p.columns, alpha);
  const int w = p.width();
  const int frames = static_cast<int>(data.rows());
  for (Eigen::Index s = 0; s < stacked.rows(); ++s) {
    for (int slot = 0; slot < alpha; ++slot) {
      if (s * alpha + slot >= frames) continue;  // zero padding stays zero
      auto seg = stacked.row(s).segment(slot * w, w);
      seg = (seg - p.feature_mean.transpose()).cwiseQuotient(p.feature_std.transpose());
    }
  }
  return stacked;
}

void check_width(const FeatureSequence& fs, const PartTokenizer& tok) {
  const int want = feature_dim(tok.config().variant);
  if (fs.data.cols() != want || fs.variant != tok.config().variant) {
    std::ostringstream os;
    os << "feature width " << fs.data.cols() << " (" << variant_name(fs.variant) << ") does not match tokenizer "
       << variant_name(tok.config().variant) << " width " << want;
    fail(Errc::config, os.str());
  }
}

}  // namespace

Eigen::MatrixXd encode_window(const FeatureSequence& fs, int part, const PartTokenizer& tok) {
  check_width(fs, tok);
  if (fs.frames() < 1) fail(Errc::windowing, "encode_window: empty window");
  const PartModel& p = tok.part(part);
  return p.encoder.forward(part_input(fs.data, p, tok.config().alpha));
}

Eigen::MatrixXd decode_window(const Eigen::MatrixXd& z_hat, int part, const PartTokenizer& tok, int frames) {
  const auto& cfg = tok.config();
  const int steps = (frames + cfg.alpha - 1) / cfg.alpha;
  if (z_hat.cols() != cfg.code_dim || z_hat.rows() != steps) {
    std::ostringstream os;
    os << "decode_window: latent is " << z_hat.rows() << "x" << z_hat.cols() << ", expected " << steps << "x"
       << cfg.code_dim;
    fail(Errc::shape_mismatch, os.str());
  }
  const PartModel& p = tok.part(part);
  Eigen::MatrixXd x = unstack_frames(p.decoder.forward(z_hat), p.width(), cfg.alpha, frames);
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    x.row(t) = x.row(t).cwiseProduct(p.feature_std.transpose()) + p.feature_mean.transpose();
  }
  return x;
}

// ---------------------------------------------------------------------------
// GRQ

namespace {

/// Residual descent of every latent row. partials[l] receives the running
/// sum after layer l when non-null. Distances are ranked as |c|^2 - 2 r.c,
/// which drops the per-row constant |r|^2 and lets one matrix product score
/// all codes at once.
void quantize_rows(const Eigen::MatrixXd& z, std::span<const Codebook> books, int layers, int* indices,
                   Eigen::MatrixXd& z_hat, std::vector<Eigen::MatrixXd>* partials) {
  const int groups = static_cast<int>(books.size());
  const int w = static_cast<int>(z.cols()) / groups;
  const Eigen::Index rows = z.rows();
  z_hat.setZero(rows, z.cols());
  for (int g = 0; g < groups; ++g) {
    const Codebook& book = books[static_cast<std::size_t>(g)];
    const Eigen::VectorXd norms = book.codes.rowwise().squaredNorm();
    Eigen::MatrixXd residual = z.middleCols(g * w, w);
    for (int l = 0; l < layers; ++l) {
      Eigen::MatrixXd score = -2.0 * residual * book.codes.transpose();
      score.rowwise() += norms.transpose();
      for (Eigen::Index i = 0; i < rows; ++i) {
        Eigen::Index k = 0;
        score.row(i).minCoeff(&k);  // first minimum wins ties
        indices[(i * groups + g) * layers + l] = static_cast<int>(k);
        residual.row(i) -= book.codes.row(k);
        z_hat.row(i).segment(g * w, w) += book.codes.row(k);
      }
      if (partials != nullptr) (*partials)[static_cast<std::size_t>(l)].middleCols(g * w, w) = z_hat.middleCols(g * w, w);
    }
  }
}

void require_books(std::span<const Codebook> books, int width) {
  if (books.empty()) fail(Errc::uninitialized_codebook, "no codebooks");
  for (const auto& b : books) {
    if (b.size() == 0) fail(Errc::uninitialized_codebook, "codebook has no entries; train or load a model first");
    if (b.width() * static_cast<int>(books.size()) != width) {
      fail(Errc::config, "codebook width does not match latent width");
    }
  }
}

}  // namespace

GrqResult grq_quantize(const Eigen::MatrixXd& z, std::span<const Codebook> books, int layers) {
  require_books(books, static_cast<int>(z.cols()));
  const int groups = static_cast<int>(books.size());
  GrqResult out;
  out.indices.resize(static_cast<std::size_t>(z.rows() * groups * layers));
  quantize_rows(z, books, layers, out.indices.data(), out.z_hat, nullptr);
  return out;
}

Eigen::MatrixXd grq_dequantize(std::span<const int> indices, int steps, std::span<const Codebook> books, int layers) {
  if (books.empty()) fail(Errc::uninitialized_codebook, "no codebooks");
  const int groups = static_cast<int>(books.size());
  const int w = books.front().width();
  if (static_cast<long>(indices.size()) != static_cast<long>(steps) * groups * layers) {
    fail(Errc::malformed_block, "grq_dequantize: expected " + std::to_string(steps * groups * layers) +
                                    " indices, got " + std::to_string(indices.size()));
  }
  Eigen::MatrixXd z_hat = Eigen::MatrixXd::Zero(steps, groups * w);
  std::size_t pos = 0;
  for (int s = 0; s < steps; ++s) {
    for (int g = 0; g < groups; ++g) {
      const Codebook& book = books[static_cast<std::size_t>(g)];
      if (book.size() == 0) fail(Errc::uninitialized_codebook, "codebook has no entries");
      for (int l = 0; l < layers; ++l, ++pos) {
        const int k = indices[pos];
        if (k < 0 || k >= book.size()) {
          fail(Errc::invalid_token, "index " + std::to_string(k) + " out of range at position " + std::to_string(pos));
        }
        z_hat.row(s).segment(g * w, w) += book.codes.row(k);
      }
    }
  }
  return z_hat;
}

// ---------------------------------------------------------------------------
// Motion tokens

std::vector<int> tokenize_window(const FeatureSequence& window, const PartTokenizer& tok) {
  const auto& cfg = tok.config();
  std::vector<int> ids;
  for (int p = 0; p < static_cast<int>(tok.parts().size()); ++p) {
    const PartModel& part = tok.part(p);
    const GrqResult q = grq_quantize(encode_window(window, p, tok), part.books, cfg.layers);
    for (int k : q.indices) ids.push_back(k + part.token_offset);
  }
  return ids;
}

FeatureSequence detokenize_window(std::span<const int> ids, const PartTokenizer& tok, const ShapeVec& beta_ref,
                                  Side side) {
  const auto& cfg = tok.config();
  const int steps = cfg.steps_per_second();
  const int per_part = steps * cfg.groups * cfg.layers;
  if (static_cast<int>(ids.size()) != cfg.tokens_per_hand_second()) {
    fail(Errc::malformed_block, "motion block has " + std::to_string(ids.size()) + " tokens, expected " +
                                    std::to_string(cfg.tokens_per_hand_second()));
  }
  FeatureSequence fs;
  fs.variant = cfg.variant;
  fs.fps = cfg.fps;
  fs.beta_ref = beta_ref;
  fs.side = side;
  fs.data = Eigen::MatrixXd::Zero(cfg.fps, feature_dim(cfg.variant));
  for (int p = 0; p < static_cast<int>(tok.parts().size()); ++p) {
    const PartModel& part = tok.part(p);
    std::vector<int> local(static_cast<std::size_t>(per_part));
    for (int i = 0; i < per_part; ++i) {
      const int id = ids[static_cast<std::size_t>(p * per_part + i)];
      const int k = id - part.token_offset;
      if (k < 0 || k >= part.codebook_size) {
        fail(Errc::invalid_token, "token " + std::to_string(id) + " at position " + std::to_string(p * per_part + i) +
                                      " is outside the " + part.name + " range");
      }
      local[static_cast<std::size_t>(i)] = k;
    }
    const Eigen::MatrixXd x =
        decode_window(grq_dequantize(local, steps, part.books, cfg.layers), p, tok, cfg.fps);
    for (int c = 0; c < part.width(); ++c) fs.data.col(part.columns[static_cast<std::size_t>(c)]) = x.col(c);
  }
  return fs;
}

MotionTokens tokenize_motion(std::span<const std::vector<HandPose>> hands, const PartTokenizer& tok,
                             const HandSkeleton& skel) {
  const auto& cfg = tok.config();
  MotionTokens out;
  for (const auto& poses : hands) {
    if (poses.size() % static_cast<std::size_t>(cfg.fps) != 0) {
      fail(Errc::windowing, "hand sequence of " + std::to_string(poses.size()) + " frames is not a whole number of " +
                                std::to_string(cfg.fps) + "-frame seconds");
    }
    HandTokens ht;
    ht.side = poses.empty() ? Side::right : poses.front().side;
    for (std::size_t s = 0; s < poses.size(); s += static_cast<std::size_t>(cfg.fps)) {
      const std::span<const HandPose> window(poses.data() + s, static_cast<std::size_t>(cfg.fps));
      ht.seconds.push_back(tokenize_window(encode_feature(window, cfg.variant, skel, cfg.fps), tok));
    }
    out.hands.push_back(std::move(ht));
  }
  return out;
}

std::vector<std::vector<HandPose>> detokenize_motion(const MotionTokens& tokens, const PartTokenizer& tok,
                                                     std::span<const ShapeVec> betas) {
  if (betas.size() != tokens.hands.size()) {
    fail(Errc::shape_mismatch, "detokenize_motion: one beta per hand required");
  }
  std::vector<std::vector<HandPose>> out;
  for (std::size_t h = 0; h < tokens.hands.size(); ++h) {
    std::vector<HandPose> poses;
    for (const auto& block : tokens.hands[h].seconds) {
      const auto decoded = decode_feature(detokenize_window(block, tok, betas[h], tokens.hands[h].side));
      poses.insert(poses.end(), decoded.begin(), decoded.end());
    }
    out.push_back(std::move(poses));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss and gradients

namespace {

/// Normalized, stacked input of every window for one part plus a frame
/// validity mask (padding rows contribute nothing to the loss).
struct PartBatch {
  Eigen::MatrixXd x;      // rows x alpha*width
  Eigen::MatrixXd valid;  // rows x alpha*width, 1 or 0
};

PartBatch gather(std::span<const FeatureSequence> batch, const PartModel& p, int alpha) {
  int rows = 0;
  for (const auto& fs : batch) rows += (fs.frames() + alpha - 1) / alpha;
  PartBatch out{Eigen::MatrixXd::Zero(rows, alpha * p.width()), Eigen::MatrixXd::Zero(rows, alpha * p.width())};
  int r = 0;
  for (const auto& fs : batch) {
    const Eigen::MatrixXd in = part_input(fs.data, p, alpha);
    out.x.middleRows(r, in.rows()) = in;
    for (int t = 0; t < fs.frames(); ++t) {
      out.valid.row(r + t / alpha).segment((t % alpha) * p.width(), p.width()).setOnes();
    }
    r += static_cast<int>(in.rows());
  }
  return out;
}

/// Columns (within a part) of the wrist parameters r_rot and tau.
std::vector<int> wrist_param_columns(const PartModel& p, FeatureVariant v) {
  const FeatureLayout l = feature_layout(v);
  std::vector<int> out;
  for (int c = 0; c < p.width(); ++c) {
    if (p.columns[static_cast<std::size_t>(c)] < l.theta_begin) out.push_back(c);
  }
  return out;
}

struct BlockSums {
  double recon = 0.0;
  double commit = 0.0;
  double wrist = 0.0;
  std::vector<PartGradients> grads;
  std::vector<QuantizerTrace::Part> trace;
};

struct Normalizers {
  double recon = 1.0;   // valid frames * feature dim
  double commit = 1.0;  // latent rows * d, summed over parts
  double frames = 1.0;  // valid frames
};

BlockSums compute_block(std::span<const FeatureSequence> block, const PartTokenizer& tok, const TrainOptions& opts,
                        const Normalizers& norm, bool want_grads, const std::vector<Eigen::Index>& row_offset,
                        const QuantizerTrace* frozen) {
  const auto& cfg = tok.config();
  BlockSums sums;
  for (std::size_t pi = 0; pi < tok.parts().size(); ++pi) {
    const PartModel& p = tok.parts()[pi];
    const PartBatch pb = gather(block, p, cfg.alpha);
    const Eigen::Index rows = pb.x.rows();

    MlpCache enc_cache;
    const Eigen::MatrixXd z = mlp_forward(p.encoder, pb.x, want_grads ? &enc_cache : nullptr);

    QuantizerTrace::Part tr;
    tr.z = z;
    if (frozen != nullptr) {
      const auto& fp = frozen->parts[pi];
      const Eigen::Index off = row_offset[pi];
      tr.z_hat = z + (fp.z_hat.middleRows(off, rows) - fp.z.middleRows(off, rows));
      for (const auto& part_l : fp.partials) tr.partials.push_back(part_l.middleRows(off, rows));
      tr.indices.assign(fp.indices.begin() + off * cfg.groups * cfg.layers,
                        fp.indices.begin() + (off + rows) * cfg.groups * cfg.layers);
    } else {
      require_books(p.books, cfg.code_dim);
      tr.partials.assign(static_cast<std::size_t>(cfg.layers), Eigen::MatrixXd::Zero(rows, cfg.code_dim));
      tr.indices.resize(static_cast<std::size_t>(rows * cfg.groups * cfg.layers));
      quantize_rows(z, p.books, cfg.layers, tr.indices.data(), tr.z_hat, &tr.partials);
    }

    MlpCache dec_cache;
    const Eigen::MatrixXd x_hat = mlp_forward(p.decoder, tr.z_hat, want_grads ? &dec_cache : nullptr);
    const Eigen::MatrixXd diff = (x_hat - pb.x).cwiseProduct(pb.valid);
    sums.recon += diff.squaredNorm();
    for (const auto& partial : tr.partials) sums.commit += (z - partial).squaredNorm();

    Eigen::MatrixXd d_xhat;
    if (want_grads) d_xhat = (2.0 / norm.recon) * diff;
    if (!cfg.part_level) {
      const std::vector<int> wc = wrist_param_columns(p, cfg.variant);
      for (int slot = 0; slot < cfg.alpha; ++slot) {
        for (int c : wc) {
          const Eigen::Index col = slot * p.width() + c;
          sums.wrist += diff.col(col).squaredNorm();
          if (want_grads) d_xhat.col(col) += (2.0 * opts.lambda2 / norm.frames) * diff.col(col);
        }
      }
    }

    if (want_grads) {
      PartGradients g{zeros_like(p.encoder.layers), zeros_like(p.decoder.layers)};
      Eigen::MatrixXd dz = mlp_backward(p.decoder, dec_cache, d_xhat, g.decoder);  // straight-through
      for (const auto& partial : tr.partials) dz += (2.0 * opts.lambda1 / norm.commit) * (z - partial);
      mlp_backward(p.encoder, enc_cache, dz, g.encoder);
      sums.grads.push_back(std::move(g));
    }
    sums.trace.push_back(std::move(tr));
  }
  return sums;
}

constexpr std::size_t kBlockWindows = 32;

void add_into(std::vector<DenseLayer>& acc, const std::vector<DenseLayer>& g) {
  for (std::size_t i = 0; i < acc.size(); ++i) {
    acc[i].weight += g[i].weight;
    acc[i].bias += g[i].bias;
  }
}

}  // namespace

LossReport compute_loss(std::span<const FeatureSequence> batch, const PartTokenizer& tok, const TrainOptions& opts,
                        std::vector<PartGradients>* grads, QuantizerTrace* record, const QuantizerTrace* frozen) {
  const auto& cfg = tok.config();
  if (batch.empty()) fail(Errc::invalid_input, "compute_loss: empty batch");
  Normalizers norm;
  double frames = 0.0;
  double rows = 0.0;
  for (const auto& fs : batch) {
    check_width(fs, tok);
    frames += fs.frames();
    rows += (fs.frames() + cfg.alpha - 1) / cfg.alpha;
  }
  norm.frames = frames;
  norm.recon = frames * feature_dim(cfg.variant);
  norm.commit = rows * cfg.code_dim * static_cast<double>(tok.parts().size());

  // Fixed block partition keeps the reduction order independent of jobs.
  const std::size_t nblocks = (batch.size() + kBlockWindows - 1) / kBlockWindows;
  std::vector<std::vector<Eigen::Index>> offsets(nblocks, std::vector<Eigen::Index>(tok.parts().size(), 0));
  {
    Eigen::Index r = 0;
    for (std::size_t b = 0; b < nblocks; ++b) {
      for (auto& o : offsets[b]) o = r;
      for (std::size_t i = b * kBlockWindows; i < std::min(batch.size(), (b + 1) * kBlockWindows); ++i) {
        r += (batch[i].frames() + cfg.alpha - 1) / cfg.alpha;
      }
    }
  }
  std::vector<BlockSums> blocks(nblocks);
  parallel_for(nblocks, opts.jobs, [&](std::size_t b) {
    const std::size_t begin = b * kBlockWindows;
    const std::size_t end = std::min(batch.size(), begin + kBlockWindows);
    blocks[b] = compute_block(batch.subspan(begin, end - begin), tok, opts, norm, grads != nullptr, offsets[b], frozen);
  });

  LossReport report;
  double recon = 0.0, commit = 0.0, wrist = 0.0;
  for (const auto& b : blocks) {
    recon += b.recon;
    commit += b.commit;
    wrist += b.wrist;
  }
  report.recon = recon / norm.recon;
  report.commit = commit / norm.commit;
  report.wrist = cfg.part_level ? 0.0 : wrist / norm.frames;
  report.total = report.recon + opts.lambda1 * report.commit + opts.lambda2 * report.wrist;

  if (grads != nullptr) {
    grads->clear();
    for (const auto& p : tok.parts()) grads->push_back({zeros_like(p.encoder.layers), zeros_like(p.decoder.layers)});
    for (const auto& b : blocks) {
      for (std::size_t pi = 0; pi < b.grads.size(); ++pi) {
        add_into((*grads)[pi].encoder, b.grads[pi].encoder);
        add_into((*grads)[pi].decoder, b.grads[pi].decoder);
      }
    }
  }
  if (record != nullptr) {
    record->parts.assign(tok.parts().size(), {});
    for (std::size_t pi = 0; pi < tok.parts().size(); ++pi) {
      auto& dst = record->parts[pi];
      Eigen::Index total_rows = 0;
      for (const auto& b : blocks) total_rows += b.trace[pi].z.rows();
      dst.z.resize(total_rows, cfg.code_dim);
      dst.z_hat.resize(total_rows, cfg.code_dim);
      dst.partials.assign(static_cast<std::size_t>(cfg.layers), Eigen::MatrixXd(total_rows, cfg.code_dim));
      Eigen::Index r = 0;
      for (const auto& b : blocks) {
        const auto& src = b.trace[pi];
        dst.z.middleRows(r, src.z.rows()) = src.z;
        dst.z_hat.middleRows(r, src.z.rows()) = src.z_hat;
        for (std::size_t l = 0; l < src.partials.size(); ++l) dst.partials[l].middleRows(r, src.z.rows()) = src.partials[l];
        dst.indices.insert(dst.indices.end(), src.indices.begin(), src.indices.end());
        r += src.z.rows();
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Initialization and training

Codebook seed_codebook(const Eigen::MatrixXd& latents, int size, int layers, double decay, double epsilon,
                       Rng& rng) {
  const Eigen::Index n = latents.rows();
  const Eigen::Index w = latents.cols();
  if (n == 0) fail(Errc::invalid_input, "seed_codebook: no latent rows");
  Eigen::MatrixXd codes(size, w);
  int filled = 0;
  Eigen::MatrixXd residual = latents;
  for (int l = 0; l < layers && filled < size; ++l) {
    const int quota = size / layers + (l < size % layers ? 1 : 0);
    // k-means++: first seed uniform, then proportional to squared distance
    // from the nearest seed chosen so far in this layer.
    Eigen::VectorXd d2 = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
    for (int q = 0; q < quota; ++q) {
      Eigen::Index pick = 0;
      if (q == 0) {
        pick = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
      } else {
        const double total = d2.sum();
        if (total <= 0.0) {
          pick = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
        } else {
          double u = rng.uniform() * total;
          for (pick = 0; pick < n - 1; ++pick) {
            u -= d2[pick];
            if (u < 0) break;
          }
        }
      }
      codes.row(filled) = residual.row(pick);
      for (Eigen::Index i = 0; i < n; ++i) d2[i] = std::min(d2[i], (residual.row(i) - codes.row(filled)).squaredNorm());
      ++filled;
    }
    // Next layer's residuals against every code seeded so far.
    Codebook partial(codes.topRows(filled), decay, epsilon);
    for (Eigen::Index i = 0; i < n; ++i) residual.row(i) -= partial.codes.row(partial.nearest(residual.row(i).transpose()));
  }
  return Codebook(codes, decay, epsilon);
}

Trainer::Trainer(PartTokenizer& tok, TrainOptions opts, Rng rng) : tok_(tok), opts_(opts), rng_(rng) {
  for (const auto& p : tok_.parts()) {
    moments_.push_back({zeros_like(p.encoder.layers), zeros_like(p.encoder.layers), zeros_like(p.decoder.layers),
                        zeros_like(p.decoder.layers)});
  }
}

void Trainer::initialize(std::span<const FeatureSequence> batch) {
  const auto& cfg = tok_.config();
  if (batch.empty()) fail(Errc::invalid_input, "Trainer::initialize: empty batch");
  Rng init_rng = rng_.split("initialize");
  for (auto& p : tok_.parts()) {
    // Per-column normalization from valid frames.
    const Eigen::Index w = p.width();
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(w);
    Eigen::VectorXd sq = Eigen::VectorXd::Zero(w);
    double count = 0;
    for (const auto& fs : batch) {
      check_width(fs, tok_);
      for (int t = 0; t < fs.frames(); ++t) {
        for (Eigen::Index c = 0; c < w; ++c) {
          const double v = fs.data(t, p.columns[static_cast<std::size_t>(c)]);
          mean[c] += v;
          sq[c] += v * v;
        }
        count += 1;
      }
    }
    mean /= count;
    Eigen::VectorXd var = (sq / count - mean.cwiseProduct(mean)).cwiseMax(0.0);
    p.feature_mean = mean;
    p.feature_std = var.cwiseSqrt().cwiseMax(1e-3);

    if (cfg.hidden == 0) {
      // Principal directions of the normalized stacked input.
      const PartBatch pb = gather(batch, p, cfg.alpha);
      const Eigen::MatrixXd cov = pb.x.transpose() * pb.x / static_cast<double>(pb.x.rows());
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
      const Eigen::Index in = cov.rows();
      const Eigen::Index d = cfg.code_dim;
      Eigen::MatrixXd basis = Eigen::MatrixXd::Zero(in, d);
      const Eigen::Index keep = std::min(in, d);
      for (Eigen::Index k = 0; k < keep; ++k) basis.col(k) = eig.eigenvectors().col(in - 1 - k);
      p.encoder.layers[0].weight = basis.transpose();
      p.encoder.layers[0].bias.setZero();
      p.decoder.layers[0].weight = basis;
      p.decoder.layers[0].bias.setZero();
    }
  }
  // Codebooks from the initialized encoder's latents.
  for (auto& p : tok_.parts()) {
    const PartBatch pb = gather(batch, p, cfg.alpha);
    const Eigen::MatrixXd z = p.encoder.forward(pb.x);
    const int w = cfg.group_width();
    for (int g = 0; g < cfg.groups; ++g) {
      Rng book_rng = init_rng.split(p.name + "/" + std::to_string(g));
      p.books[static_cast<std::size_t>(g)] =
          seed_codebook(z.middleCols(g * w, w), p.codebook_size, cfg.layers, cfg.ema_decay, cfg.ema_epsilon, book_rng);
    }
  }
  for (std::size_t i = 0; i < moments_.size(); ++i) {
    const auto& p = tok_.parts()[i];
    moments_[i] = {zeros_like(p.encoder.layers), zeros_like(p.encoder.layers), zeros_like(p.decoder.layers),
                   zeros_like(p.decoder.layers)};
  }
  step_count_ = 0;
}

namespace {

void adam_update(std::vector<DenseLayer>& params, const std::vector<DenseLayer>& grads, std::vector<DenseLayer>& m,
                 std::vector<DenseLayer>& v, const TrainOptions& o, long t) {
  const double c1 = 1.0 - std::pow(o.adam_beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(o.adam_beta2, static_cast<double>(t));
  auto apply = [&](auto& p, const auto& g, auto& mm, auto& vv) {
    mm = o.adam_beta1 * mm + (1.0 - o.adam_beta1) * g;
    vv = o.adam_beta2 * vv + (1.0 - o.adam_beta2) * g.cwiseProduct(g);
    p.array() -= o.learning_rate * (mm.array() / c1) / ((vv.array() / c2).sqrt() + o.adam_epsilon);
  };
  for (std::size_t i = 0; i < params.size(); ++i) {
    apply(params[i].weight, grads[i].weight, m[i].weight, v[i].weight);
    apply(params[i].bias, grads[i].bias, m[i].bias, v[i].bias);
  }
}

}  // namespace

LossReport Trainer::step(std::span<const FeatureSequence> batch) {
  const auto& cfg = tok_.config();
  std::vector<PartGradients> grads;
  QuantizerTrace trace;
  const LossReport report = compute_loss(batch, tok_, opts_, &grads, &trace, nullptr);
  if (step_count_ == 0) first_total_ = report.total;
  if (!std::isfinite(report.total) || report.total > kDivergenceFactor * first_total_) {
    std::ostringstream os;
    os << "training diverged at step " << step_count_ << ": recon " << report.recon << ", commit " << report.commit
       << ", wrist " << report.wrist;
    fail(Errc::training_diverged, os.str());
  }
  ++step_count_;
  for (std::size_t pi = 0; pi < tok_.parts().size(); ++pi) {
    auto& p = tok_.parts()[pi];
    adam_update(p.encoder.layers, grads[pi].encoder, moments_[pi].m_enc, moments_[pi].v_enc, opts_, step_count_);
    adam_update(p.decoder.layers, grads[pi].decoder, moments_[pi].m_dec, moments_[pi].v_dec, opts_, step_count_);
  }
  if (opts_.update_codebooks) {
    const int w = cfg.group_width();
    for (std::size_t pi = 0; pi < tok_.parts().size(); ++pi) {
      auto& p = tok_.parts()[pi];
      const auto& tr = trace.parts[pi];
      const Eigen::Index rows = tr.z.rows();
      for (int g = 0; g < cfg.groups; ++g) {
        Codebook& book = p.books[static_cast<std::size_t>(g)];
        CodeAssignments a{Eigen::VectorXd::Zero(book.size()), Eigen::MatrixXd::Zero(book.size(), w),
                          Eigen::MatrixXd(rows * cfg.layers, w)};
        for (Eigen::Index i = 0; i < rows; ++i) {
          Eigen::RowVectorXd prev = Eigen::RowVectorXd::Zero(w);
          for (int l = 0; l < cfg.layers; ++l) {
            const Eigen::RowVectorXd residual = tr.z.row(i).segment(g * w, w) - prev;
            const int k = tr.indices[static_cast<std::size_t>((i * cfg.groups + g) * cfg.layers + l)];
            a.hits[k] += 1.0;
            a.sums.row(k) += residual;
            a.pool.row(i * cfg.layers + l) = residual;
            prev = tr.partials[static_cast<std::size_t>(l)].row(i).segment(g * w, w);
          }
        }
        Rng reseed = rng_.split("reseed/" + std::to_string(step_count_) + "/" + p.name + "/" + std::to_string(g));
        ema_update(book, a, &reseed, cfg.dead_code_patience);
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Model file

namespace {

static_assert(std::endian::native == std::endian::little, "model I/O assumes a little-endian host");

constexpr char kMagic[4] = {'H', 'G', 'R', 'Q'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}
  void u32(std::uint32_t v) { os_.write(reinterpret_cast<const char*>(&v), sizeof v); }
  void f32(double v) {
    const float f = static_cast<float>(v);
    os_.write(reinterpret_cast<const char*>(&f), sizeof f);
  }
  void matrix(const Eigen::MatrixXd& m) {
    u32(static_cast<std::uint32_t>(m.rows()));
    u32(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) f32(m(r, c));
    }
  }
  void vector(const Eigen::VectorXd& v) {
    u32(static_cast<std::uint32_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) f32(v[i]);
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  Reader(std::istream& is, std::string path) : is_(is), path_(std::move(path)) {}
  std::uint32_t u32() {
    std::uint32_t v = 0;
    read(&v, sizeof v);
    return v;
  }
  double f32() {
    float f = 0;
    read(&f, sizeof f);
    return f;
  }
  Eigen::MatrixXd matrix(Eigen::Index rows, Eigen::Index cols, const std::string& what) {
    const std::uint32_t r = u32();
    const std::uint32_t c = u32();
    if (r != rows || c != cols) {
      std::ostringstream os;
      os << path_ << ": " << what << " is " << r << "x" << c << ", expected " << rows << "x" << cols;
      fail(Errc::serialization, os.str());
    }
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = f32();
    }
    return m;
  }
  Eigen::VectorXd vector(Eigen::Index n, const std::string& what) {
    const std::uint32_t size = u32();
    if (size != n) fail(Errc::serialization, path_ + ": " + what + " has " + std::to_string(size) + " entries");
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = f32();
    return v;
  }
  void read(void* dst, std::size_t n) {
    is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (!is_) fail(Errc::serialization, path_ + ": truncated model file");
  }

 private:
  std::istream& is_;
  std::string path_;
};

std::uint32_t variant_tag(FeatureVariant v) { return static_cast<std::uint32_t>(feature_dim(v)); }

FeatureVariant variant_from_tag(std::uint32_t tag, const std::string& path) {
  for (FeatureVariant v : {FeatureVariant::D51, FeatureVariant::D99, FeatureVariant::D109, FeatureVariant::D114, FeatureVariant::D162}) {
    if (variant_tag(v) == tag) return v;
  }
  fail(Errc::serialization, path + ": unknown feature variant tag " + std::to_string(tag));
}

void write_mlp(Writer& w, const Mlp& m) {
  w.u32(static_cast<std::uint32_t>(m.layers.size()));
  for (const auto& l : m.layers) {
    w.matrix(l.weight);
    w.vector(l.bias);
  }
}

void read_mlp(Reader& r, Mlp& m, const std::string& what) {
  const std::uint32_t n = r.u32();
  if (n != m.layers.size()) fail(Errc::serialization, what + ": layer count mismatch");
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    auto& l = m.layers[i];
    l.weight = r.matrix(l.weight.rows(), l.weight.cols(), what + " weight " + std::to_string(i));
    l.bias = r.vector(l.bias.size(), what + " bias " + std::to_string(i));
  }
}

}  // namespace

nlohmann::json PartTokenizer::config_json() const {
  const auto& c = config_;
  nlohmann::json j;
  j["format"] = "HGRQ";
  j["version"] = kVersion;
  j["alpha"] = c.alpha;
  j["groups"] = c.groups;
  j["layers"] = c.layers;
  j["codebook_wrist"] = c.codebook_wrist;
  j["codebook_finger"] = c.codebook_finger;
  j["code_dim"] = c.code_dim;
  j["fps"] = c.fps;
  j["variant"] = std::string(variant_name(c.variant));
  j["part_level"] = c.part_level;
  j["hidden"] = c.hidden;
  j["tokens_per_hand_second"] = c.tokens_per_hand_second();
  j["vocabulary_size"] = c.vocabulary_size();
  auto parts = nlohmann::json::array();
  for (const auto& p : parts_) {
    parts.push_back({{"name", p.name}, {"columns", p.width()}, {"codebook_size", p.codebook_size},
                     {"token_offset", p.token_offset}});
  }
  j["parts"] = parts;
  return j;
}

void PartTokenizer::save(const std::string& path) const {
  if (!codebooks_ready()) fail(Errc::uninitialized_codebook, "refusing to save a model without codebooks");
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(Errc::io, "cannot write " + path);
  Writer w(os);
  os.write(kMagic, 4);
  w.u32(kVersion);
  const auto& c = config_;
  for (int v : {c.alpha, c.groups, c.layers, c.codebook_wrist, c.codebook_finger, c.code_dim, c.fps}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  w.u32(variant_tag(c.variant));
  w.u32(c.part_level ? 1u : 0u);
  w.u32(static_cast<std::uint32_t>(c.hidden));
  for (const auto& p : parts_) {
    w.vector(p.feature_mean);
    w.vector(p.feature_std);
    write_mlp(w, p.encoder);
    write_mlp(w, p.decoder);
    for (const auto& b : p.books) w.matrix(b.codes);
  }
  if (!os) fail(Errc::io, "write failed for " + path);

  std::ofstream js(path + ".json");
  if (!js) fail(Errc::io, "cannot write " + path + ".json");
  js << config_json().dump(2) << "\n";
}

PartTokenizer PartTokenizer::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(Errc::io, "cannot open model file " + path);
  Reader r(is, path);
  char magic[4];
  r.read(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) fail(Errc::serialization, path + ": not an HGRQ model file");
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    fail(Errc::serialization, path + ": unsupported model version " + std::to_string(version));
  }
  QuantizerConfig c;
  c.alpha = static_cast<int>(r.u32());
  c.groups = static_cast<int>(r.u32());
  c.layers = static_cast<int>(r.u32());
  c.codebook_wrist = static_cast<int>(r.u32());
  c.codebook_finger = static_cast<int>(r.u32());
  c.code_dim = static_cast<int>(r.u32());
  c.fps = static_cast<int>(r.u32());
  c.variant = variant_from_tag(r.u32(), path);
  c.part_level = r.u32() != 0;
  c.hidden = static_cast<int>(r.u32());
  try {
    c.validate();
  } catch (const Error& e) {
    fail(Errc::serialization, path + ": " + e.what());
  }
  PartTokenizer tok = create(c, Rng(0));
  for (auto& p : tok.parts_) {
    p.feature_mean = r.vector(p.width(), p.name + " feature mean");
    p.feature_std = r.vector(p.width(), p.name + " feature std");
    read_mlp(r, p.encoder, p.name + " encoder");
    read_mlp(r, p.decoder, p.name + " decoder");
    for (auto& b : p.books) {
      b = Codebook(r.matrix(p.codebook_size, c.group_width(), p.name + " codebook"), c.ema_decay, c.ema_epsilon);
    }
  }
  if (is.peek() != std::char_traits<char>::eof()) fail(Errc::serialization, path + ": trailing bytes");
  return tok;
}

}  // namespace hmt
