// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance            run every criterion
//   acceptance <name>...  run only the named ones
//   acceptance --list     print the names

#include "hmt/alignment.hpp"
#include "hmt/codec.hpp"
#include "hmt/error.hpp"
#include "hmt/metrics.hpp"
#include "hmt/pipeline.hpp"
#include "hmt/synth.hpp"
#include "hmt/tokenizer.hpp"
#include "hmt/training.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

#include <Eigen/Geometry>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

using namespace hmt;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Eigen::MatrixXd random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// ---------------------------------------------------------------------------

Outcome token_budget() {
  // The default configuration first.
  QuantizerConfig defaults;
  if (defaults.tokens_per_hand_second() != 128) return {false, "default config does not give 128"};

  Rng rng(11);
  int configs = 0, counted = 0;
  for (int alpha = 1; alpha <= 8; ++alpha) {
    for (int n : {1, 2, 4}) {
      for (int L = 1; L <= 10; ++L) {
        for (int fps : {8, 10, 15, 24, 25, 30, 60}) {
          QuantizerConfig c;
          c.alpha = alpha;
          c.groups = n;
          c.layers = L;
          c.fps = fps;
          c.code_dim = 2 * n;
          c.codebook_wrist = c.codebook_finger = 4;
          c.variant = FeatureVariant::D51;
          const int expected = 2 * n * L * static_cast<int>(std::ceil(static_cast<double>(fps) / alpha));
          if (c.tokens_per_hand_second() != expected) {
            return {false, fmt("alpha=%d n=%d L=%d fps=%d: %d != %d", alpha, n, L, fps, c.tokens_per_hand_second(),
                               expected)};
          }
          ++configs;
          // Emit real tokens on a sparse slice of the grid.
          if ((alpha + n + L + fps) % 7 == 0) {
            PartTokenizer tok = PartTokenizer::create(c, rng.split("w"));
            for (auto& p : tok.parts()) {
              for (auto& b : p.books) b = Codebook(random_matrix(rng, 4, c.group_width()), 0.99, 1e-5);
            }
            FeatureSequence fs;
            fs.variant = c.variant;
            fs.fps = fps;
            fs.data = random_matrix(rng, fps, feature_dim(c.variant));
            const auto ids = tokenize_window(fs, tok);
            if (static_cast<int>(ids.size()) != expected) {
              return {false, fmt("tokenize_window emitted %zu ids, expected %d", ids.size(), expected)};
            }
            ++counted;
          }
        }
      }
    }
  }
  return {true, fmt("128 at alpha=4 n=2 L=8 15 fps; %d configs match 2nL*ceil(fps/alpha), %d tokenized", configs,
                    counted)};
}

Outcome grq_correctness() {
  Rng rng(12);
  const int n = 2, w = 4, K = 64, N = 10000, Lmax = 8;
  std::vector<Codebook> books;
  for (int g = 0; g < n; ++g) {
    Eigen::MatrixXd codes = random_matrix(rng, K, w, 0.6);
    codes.row(K - 1).setZero();  // lets every layer keep or shrink the residual
    books.emplace_back(codes, 0.99, 1e-5);
  }
  const Eigen::MatrixXd z = random_matrix(rng, N, n * w);

  double worst_telescope = 0.0;
  long increases = 0;
  Eigen::VectorXd prev = Eigen::VectorXd::Constant(N, std::numeric_limits<double>::infinity());
  for (int L = 1; L <= Lmax; ++L) {
    const GrqResult r = grq_quantize(z, books, L);
    for (Eigen::Index i = 0; i < N; ++i) {
      double err = 0.0;
      for (int g = 0; g < n; ++g) {
        Eigen::VectorXd res = z.row(i).segment(g * w, w).transpose();
        for (int l = 0; l < L; ++l) res -= books[g].codes.row(r.indices[(i * n + g) * L + l]).transpose();
        const Eigen::VectorXd diff = (z.row(i) - r.z_hat.row(i)).segment(g * w, w).transpose();
        worst_telescope = std::max(worst_telescope, (diff - res).cwiseAbs().maxCoeff());
        err += res.squaredNorm();
      }
      if (err > prev[i]) ++increases;
      prev[i] = err;
    }
    if (!(grq_dequantize(r.indices, N, books, L) == r.z_hat)) {
      return {false, fmt("dequantize differs from quantize z_hat at L=%d", L)};
    }
  }
  const bool ok = worst_telescope < 1e-12 && increases == 0;
  return {ok, fmt("telescoping max |err| %.2e, per-latent error increases over L=1..8: %ld, dequantize bitwise",
                  worst_telescope, increases)};
}

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

Outcome desk_training() {
  const HandSkeleton skel = HandSkeleton::rest_default();
  const Rng root(13);
  const auto train = synthetic_windows(2000, root.split("train"));
  const auto held = synthetic_windows(200, root.split("held"));

  QuantizerConfig cfg;
  cfg.variant = FeatureVariant::D162;
  cfg.codebook_wrist = cfg.codebook_finger = 512;
  cfg.code_dim = 64;
  TrainOptions opts;
  opts.lambda1 = 0.02;
  opts.lambda2 = 1.0;
  opts.learning_rate = 1e-3;
  TrainSchedule schedule;
  schedule.steps = 600;
  schedule.batch = 256;

  std::vector<FeatureSequence> features;
  for (const auto& w : train) features.push_back(encode_feature(w, cfg.variant, skel, cfg.fps));
  PartTokenizer tok = PartTokenizer::create(cfg, root.split("model"));
  const auto history = train_tokenizer(tok, features, opts, schedule, root.split("trainer"));
  const double e = reconstruction_mpjpe(tok, held, skel);
  return {e < 1.5, fmt("held-out MPJPE %.3f cm on %zu windows (threshold 1.5), final loss %.4f", e, held.size(),
                       history.back().total)};
}

Outcome gradient_validity() {
  double worst = 0.0;
  long probes = 0;
  for (const bool part_level : {true, false}) {
    for (const int hidden : {0, 5}) {
      QuantizerConfig c;
      c.alpha = 2;
      c.groups = 2;
      c.layers = 2;
      c.codebook_wrist = c.codebook_finger = 4;
      c.code_dim = 8;
      c.fps = 4;
      c.variant = FeatureVariant::D51;
      c.part_level = part_level;
      c.hidden = hidden;
      Rng rng(14);
      PartTokenizer tok = PartTokenizer::create(c, rng.split("weights"));
      for (auto& p : tok.parts()) {
        for (auto& b : p.books) b = Codebook(random_matrix(rng, p.codebook_size, c.group_width()), 0.99, 1e-5);
        p.feature_mean = random_matrix(rng, p.width(), 1, 0.1);
        p.feature_std = (random_matrix(rng, p.width(), 1, 0.2).array().abs() + 0.5).matrix();
      }
      std::vector<FeatureSequence> batch(2);
      for (std::size_t i = 0; i < batch.size(); ++i) {
        batch[i].variant = c.variant;
        batch[i].data = random_matrix(rng, 2 + static_cast<int>(i), feature_dim(c.variant));
      }
      TrainOptions opts;
      opts.lambda1 = 0.5;
      opts.lambda2 = 0.7;
      std::vector<PartGradients> grads;
      QuantizerTrace trace;
      compute_loss(batch, tok, opts, &grads, &trace);

      // Central differences are O(h^2); a larger step keeps roundoff out of
      // the smallest (about 1e-7) gradient entries.
      const double h = 1e-4;
      for (std::size_t pi = 0; pi < tok.parts().size(); ++pi) {
        for (int which = 0; which < 2; ++which) {
          auto& layers = which == 0 ? tok.parts()[pi].encoder.layers : tok.parts()[pi].decoder.layers;
          const auto& glayers = which == 0 ? grads[pi].encoder : grads[pi].decoder;
          for (std::size_t li = 0; li < layers.size(); ++li) {
            auto probe = [&](double& param, double analytic) {
              const double keep = param;
              param = keep + h;
              const double up = compute_loss(batch, tok, opts, nullptr, nullptr, &trace).total;
              param = keep - h;
              const double down = compute_loss(batch, tok, opts, nullptr, nullptr, &trace).total;
              param = keep;
              const double numeric = (up - down) / (2 * h);
              worst = std::max(worst, std::abs(numeric - analytic) /
                                          std::max(1e-6, std::abs(numeric) + std::abs(analytic)));
              ++probes;
            };
            for (Eigen::Index k = 0; k < layers[li].weight.size(); ++k) {
              probe(layers[li].weight.data()[k], glayers[li].weight.data()[k]);
            }
            for (Eigen::Index k = 0; k < layers[li].bias.size(); ++k) probe(layers[li].bias[k], glayers[li].bias[k]);
          }
        }
      }
    }
  }
  return {worst < 1e-4, fmt("worst relative error %.2e over %ld parameters (4 toy configs)", worst, probes)};
}

double sum_squared(const Joints21& a, const Joints21& b) {
  double s = 0.0;
  for (int j = 0; j < kNumJoints; ++j) s += (a[j] - b[j]).squaredNorm();
  return s;
}

Outcome procrustes_metrics() {
  const HandSkeleton skel = HandSkeleton::rest_default();
  Rng rng(15);
  double worst_similarity = 0.0, worst_oracle = 0.0, worst_excess = 0.0;
  int squared_violations = 0, independent_violations = 0, near_violations = 0;
  for (int pair = 0; pair < 1000; ++pair) {
    // Even pairs are independent poses; odd pairs are gt plus 1 cm noise.
    const bool independent = pair % 2 == 0;
    const int frames = 1 + static_cast<int>(rng.below(4));
    std::vector<Joints21> gt, pred, moved;
    const Mat3 R = axis_angle_to_matrix(testing::random_axis_angle(rng, 3.1));
    const double s = rng.uniform(0.5, 2.0);
    const Vec3 t(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    for (int f = 0; f < frames; ++f) {
      gt.push_back(forward_kinematics(testing::random_pose(rng), skel));
      Joints21 p = independent ? forward_kinematics(testing::random_pose(rng), skel) : gt.back();
      Joints21 m;
      for (int j = 0; j < kNumJoints; ++j) {
        if (!independent) p[j] += Vec3(rng.normal(), rng.normal(), rng.normal()) * 0.01;
        m[j] = s * (R * gt.back()[j]) + t;
      }
      pred.push_back(p);
      moved.push_back(m);

      const Similarity sim = umeyama(p, gt.back());
      Joints21 aligned;
      for (int j = 0; j < kNumJoints; ++j) aligned[j] = sim.apply(p[j]);
      if (sum_squared(aligned, gt.back()) > sum_squared(p, gt.back()) * (1 + 1e-12)) ++squared_violations;
    }
    worst_similarity = std::max(worst_similarity, pa_mpjpe(moved, gt));
    const double e = mpjpe(pred, gt), w = mwte(pred, gt), pa = pa_mpjpe(pred, gt);
    if (pa > e) {
      if (independent) ++independent_violations;
      else ++near_violations;
      worst_excess = std::max(worst_excess, (pa - e) / e);
    }
    worst_oracle = std::max({worst_oracle, std::abs(e - oracle::loop_mpjpe(pred, gt)),
                             std::abs(w - oracle::loop_mpjpe(pred, gt, 0)),
                             std::abs(pa - oracle::horn_pa_mpjpe(pred, gt))});
  }
  // The least-squares alignment can only lower the summed squared error; the
  // mean of per-joint distances may rise slightly when pred is already
  // aligned up to isotropic noise, which is reported rather than gated.
  const bool ok = worst_similarity < 1e-6 && squared_violations == 0 && independent_violations == 0 &&
                  worst_oracle < 1e-10;
  return {ok, fmt("similarity pa_mpjpe max %.2e cm; squared-error increases %d; pa>mpjpe on independent pairs %d, "
                  "on noisy pairs %d (max excess %.2f%%); oracle max |diff| %.2e cm on 1000 pairs",
                  worst_similarity, squared_violations, independent_violations, near_violations, 100.0 * worst_excess,
                  worst_oracle)};
}

Image marker_image(int w, int h, int mu, int mv) {
  Image img(w, h, 1);
  for (int dv = -1; dv <= 1; ++dv)
    for (int du = -1; du <= 1; ++du) img.at(mu + du, mv + dv) = 255;
  return img;
}

Eigen::Vector2d centroid(const Image& img) {
  double sum = 0, su = 0, sv = 0;
  for (int v = 0; v < img.height; ++v) {
    for (int u = 0; u < img.width; ++u) {
      const double w = img.at(u, v);
      sum += w;
      su += w * u;
      sv += w * v;
    }
  }
  return {su / sum, sv / sum};
}

Outcome physical_alignment() {
  Rng rng(16);
  auto random_k = [&] {
    CameraIntrinsics k;
    k.fx = rng.uniform(200, 1500);
    k.fy = rng.uniform(200, 1500);
    k.width = 320 + static_cast<int>(rng.below(1000));
    k.height = 240 + static_cast<int>(rng.below(800));
    k.cx = rng.uniform(0.3, 0.7) * k.width;
    k.cy = rng.uniform(0.3, 0.7) * k.height;
    return k;
  };
  double compose = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const auto a = random_k(), b = random_k(), c = random_k();
    const AffineMap d = weak_perspective_map(a, c);
    const AffineMap m = weak_perspective_map(b, c).after(weak_perspective_map(a, b));
    compose = std::max({compose, std::abs(d.sx - m.sx), std::abs(d.sy - m.sy), std::abs(d.dx - m.dx),
                        std::abs(d.dy - m.dy)});
  }

  const CameraIntrinsics k{160, 160, 100, 80, 200, 160};
  const Eigen::Vector2d c(k.cx, k.cy);
  double offset_rel = 0.0, depth_marker = 0.0, rot_marker = 0.0, rot_proj = 0.0;
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<HandPose> poses{testing::random_pose(rng), testing::random_pose(rng)};
    const int mu = 50 + static_cast<int>(rng.below(100)), mv = 40 + static_cast<int>(rng.below(80));
    const Image img = marker_image(k.width, k.height, mu, mv);
    const Eigen::Vector2d marker(mu, mv);

    const double lambda = rng.uniform(0.7, 1.4);
    const AugmentResult ds = depth_scale_augment(poses, img, k, lambda);
    for (std::size_t t = 0; t < poses.size(); ++t) {
      const Eigen::Vector2d before = project_point(k, poses[t].tau) - c;
      const Eigen::Vector2d after = project_point(k, ds.poses[t].tau) - c;
      offset_rel = std::max(offset_rel, (after - before / lambda).norm() / std::max(1e-12, before.norm()));
    }
    depth_marker = std::max(depth_marker, (centroid(ds.image) - (c + (marker - c) / lambda)).norm());

    const double phi = rng.uniform(-3.1, 3.1);
    const AugmentResult rr = inplane_rotate_augment(poses, img, k, phi);
    const Eigen::Rotation2Dd rot(phi);
    for (std::size_t t = 0; t < poses.size(); ++t) {
      const Eigen::Vector2d expected = rot * (project_point(k, poses[t].tau) - c) + c;
      rot_proj = std::max(rot_proj, (project_point(k, rr.poses[t].tau) - expected).norm());
    }
    rot_marker = std::max(rot_marker, (centroid(rr.image) - (rot * (marker - c) + c)).norm());
  }
  const bool ok = compose < 1e-9 && offset_rel < 1e-14 && depth_marker < 0.5 && rot_marker < 0.5 && rot_proj < 0.5;
  return {ok, fmt("composition %.2e, offset*lambda rel %.2e, depth marker %.3f px, rotation marker %.3f px, "
                  "rotated projection %.2e px",
                  compose, offset_rel, depth_marker, rot_marker, rot_proj)};
}

Outcome codec_conformance() {
  Rng rng(17);
  // Round trips under the standard layout.
  {
    const Vocabulary v = Vocabulary::standard(8192, 128);
    for (int trial = 0; trial < 10000; ++trial) {
      MotionTokens t;
      const int hands = 1 + static_cast<int>(rng.below(2));
      const int seconds = 1 + static_cast<int>(rng.below(4));
      for (int h = 0; h < hands; ++h) {
        HandTokens ht;
        ht.side = hands == 1 ? Side::right : (h == 0 ? Side::left : Side::right);
        for (int s = 0; s < seconds; ++s) {
          std::vector<int> b(128);
          for (auto& x : b) x = static_cast<int>(rng.below(8192));
          ht.seconds.push_back(std::move(b));
        }
        t.hands.push_back(std::move(ht));
      }
      const TokenStream ts = serialize_blocks(t, v);
      if (!parse_stream(ts.ids, v).valid) return {false, fmt("serialized stream %d rejected", trial)};
      std::vector<Side> sides;
      for (const auto& h : t.hands) sides.push_back(h.side);
      const MotionTokens back = deserialize_blocks(ts.ids, v, sides);
      for (std::size_t h = 0; h < t.hands.size(); ++h) {
        if (back.hands[h].seconds != t.hands[h].seconds) return {false, fmt("round trip %d differs", trial)};
      }
    }
  }

  // Structural mutations: replace one token by an id of a different class.
  const Vocabulary v = Vocabulary::standard(40, 16, 30);
  const oracle::StreamGrammar g{v.text.end, v.motion.begin, v.motion.end, v.mot_open, v.mot_close,
                                v.img_open, v.img_close,    v.img_context, v.eos,     v.block_size};
  int located = 0, stayed_valid = 0, wrong = 0;
  const int mutations = 10000;
  for (int trial = 0; trial < mutations; ++trial) {
    std::vector<int> ids;
    const int pieces = 1 + static_cast<int>(rng.below(4));
    for (int i = 0; i < pieces; ++i) {
      const auto kind = rng.below(3);
      if (kind == 0) {
        ids.push_back(static_cast<int>(rng.below(30)));
      } else if (kind == 1) {
        ids.push_back(v.img_open);
        for (auto k = rng.below(3); k > 0; --k) ids.push_back(v.img_context);
        ids.push_back(v.img_close);
      }
      ids.push_back(v.mot_open);
      for (int k = 0; k < v.block_size; ++k) ids.push_back(v.motion.begin + static_cast<int>(rng.below(40)));
      ids.push_back(v.mot_close);
    }
    if (rng.bernoulli(0.5)) ids.push_back(v.eos);

    const auto pos = rng.below(ids.size());
    const TokenClass before = v.classify(ids[pos]);
    int replacement = 0;
    do {
      replacement = static_cast<int>(rng.below(static_cast<std::uint64_t>(v.size() + 3)));
    } while (v.classify(replacement) == before);
    ids[pos] = replacement;

    const std::string letters = g.letters(ids);
    const ParseResult r = parse_stream(ids, v);
    if (g.valid(letters)) {
      if (r.valid) ++stayed_valid;
      else ++wrong;
    } else if (!r.valid && r.position == g.first_offense(letters, static_cast<int>(pos))) {
      ++located;
    } else {
      ++wrong;
    }
  }
  const double located_rate = located / static_cast<double>(mutations);

  int percentile_mismatch = 0, percentile_cases = 0;
  for (int n = 1; n <= 50; ++n) {
    for (int trial = 0; trial < 60; ++trial) {
      std::vector<double> xs(static_cast<std::size_t>(n));
      const bool ties = trial % 2 == 0;
      for (auto& x : xs) x = ties ? static_cast<double>(rng.below(5)) : rng.uniform(0, 10);
      LossFilterConfig cfg;
      if (trial >= 2) {
        cfg.q_low = 0.5 * static_cast<double>(rng.below(190));
        cfg.q_high = std::min(100.0, cfg.q_low + 0.5 + 0.5 * static_cast<double>(rng.below(200)));
      }
      ++percentile_cases;
      if (std::abs(filtered_motion_loss(xs, cfg) - oracle::filtered_mean(xs, cfg.q_low, cfg.q_high)) > 1e-12) {
        ++percentile_mismatch;
      }
    }
  }

  const Vocabulary big = Vocabulary::standard(8192, 128);
  std::vector<double> logits(static_cast<std::size_t>(big.size()));
  int fired = 0;
  const int trials = 10000;
  Rng mask_rng = rng.split("mask");
  for (int i = 0; i < trials; ++i) {
    std::fill(logits.begin(), logits.end(), 0.0);
    fired += logit_mask(logits, true, 0.5, big, mask_rng) ? 1 : 0;
  }
  const double rate = fired / static_cast<double>(trials);

  const bool ok = located_rate >= 0.99 && wrong == 0 && percentile_mismatch == 0 && std::abs(rate - 0.5) <= 0.02;
  return {ok, fmt("10000 round trips ok; mutations rejected at the right position %.2f%%, %d stayed valid per "
                  "oracle, %d wrong; percentile oracle %d/%d mismatches; mask rate %.4f",
                  100.0 * located_rate, stayed_valid, wrong, percentile_mismatch, percentile_cases, rate)};
}

Outcome pipeline_determinism() {
  const HandSkeleton skel = HandSkeleton::rest_default();
  const Rng root(18);

  std::vector<SequenceRecord> records;
  for (const auto& [source, count] : std::vector<std::pair<std::string, int>>{{"lab", 6}, {"field", 2}}) {
    for (int i = 0; i < count; ++i) {
      SequenceRecord r;
      r.id = source + "_" + std::to_string(i);
      r.source = source;
      r.intrinsics = {600, 600, 320, 240, 640, 480};
      Rng rng = root.split("record:" + r.id);
      const int frames = 150 + static_cast<int>(rng.below(90));
      auto right = synthesize_motion(rng, frames, kPipelineFps, Side::right);
      auto left = synthesize_motion(rng, frames, kPipelineFps, Side::left);
      r.frames.resize(static_cast<std::size_t>(frames));
      for (int t = 0; t < frames; ++t) {
        right[t].tau.x() += 0.15;
        left[t].tau.x() -= 0.15;
        r.frames[t].right = right[t];
        if (i % 2 == 0) r.frames[t].left = left[t];
      }
      for (int s = 0; s * kPipelineFps < frames; ++s) {
        r.annotations.push_back({double(s), s + 1.0, "step " + std::to_string(s % 4) + " of " + source});
      }
      records.push_back(std::move(r));
    }
  }

  QuantizerConfig cfg;
  cfg.codebook_wrist = cfg.codebook_finger = 32;
  cfg.code_dim = 16;
  PartTokenizer tok = PartTokenizer::create(cfg, root.split("model"));
  std::vector<FeatureSequence> features;
  for (const auto& w : synthetic_windows(200, root.split("windows"))) {
    features.push_back(encode_feature(w, cfg.variant, skel, cfg.fps));
  }
  train_tokenizer(tok, features, {}, {20, 32}, root.split("train"));

  SampleContext ctx;
  ctx.tokenizer = &tok;
  ctx.skeleton = &skel;
  ctx.vocab = Vocabulary::standard(cfg.vocabulary_size(), cfg.tokens_per_hand_second());
  ctx.templates = TemplateSet::load(HMT_ASSET_DIR "/templates.json");

  BalanceConfig bc;
  bc.targets = {{"lab", 300}, {"field", 240}};

  auto dump = [](const std::vector<InstructionSample>& samples) {
    std::string s;
    for (const auto& x : samples) s += x.to_json().dump() + "\n";
    return s;
  };

  std::string manifests[2], samples_text[2], template_manifests[2], template_samples[2];
  BalanceResult first;
  bool template_replay = true;
  for (int run = 0; run < 2; ++run) {
    Rng rng(99);
    BalanceResult res = balance_corpus(records, bc, ctx, rng);
    manifests[run] = res.manifest();
    samples_text[run] = dump(res.samples);
    if (run == 0) first = std::move(res);

    const Rng trng(77);
    for (const auto& r : records) {
      Rng per = trng.split("templates:" + r.id);
      const SampleBatch b = instantiate_templates(r, chunk_and_window(r), ctx, {}, per);
      for (const auto& s : b.samples) {
        template_manifests[run] +=
            nlohmann::json{{"task", task_name(s.task)}, {"provenance", s.provenance.to_json()}}.dump() + "\n";
        if (run == 0) {
          template_replay = template_replay &&
                            replay_sample(r, s.task, s.provenance, ctx).to_json().dump() == s.to_json().dump();
        }
      }
      template_samples[run] += dump(b.samples);
    }
  }
  const bool same_manifest = manifests[0] == manifests[1] && samples_text[0] == samples_text[1];
  const bool same_templates = template_manifests[0] == template_manifests[1] && template_samples[0] == template_samples[1];

  double worst_dev = 0.0;
  for (const auto& [source, target] : bc.targets) {
    int got = 0;
    for (const auto& [task, n] : first.counts[source]) got += n;
    worst_dev = std::max(worst_dev, std::abs(got - target) / static_cast<double>(target));
  }

  const auto replayed = replay_manifest(manifests[0], records, ctx);
  const bool replay_ok = dump(replayed) == samples_text[0] && template_replay;

  const bool ok = same_manifest && same_templates && worst_dev <= 0.05 && replay_ok && first.augmented > 0;
  return {ok, fmt("balance manifest %016llx (%s), templates %016llx (%s), %zu samples with %d augmented, "
                  "worst count deviation %.2f%%, replay %s",
                  static_cast<unsigned long long>(fnv1a(manifests[0])), same_manifest ? "identical" : "DIFFERS",
                  static_cast<unsigned long long>(fnv1a(template_manifests[0])),
                  same_templates ? "identical" : "DIFFERS", first.samples.size(), first.augmented,
                  100.0 * worst_dev, replay_ok ? "bitwise" : "DIFFERS")};
}

struct Criterion {
  const char* name;
  Outcome (*run)();
};

const Criterion kCriteria[] = {
    {"token_budget", token_budget},
    {"grq_correctness", grq_correctness},
    {"desk_training", desk_training},
    {"gradient_validity", gradient_validity},
    {"procrustes_metrics", procrustes_metrics},
    {"physical_alignment", physical_alignment},
    {"codec_conformance", codec_conformance},
    {"pipeline_determinism", pipeline_determinism},
};

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> wanted(argv + 1, argv + argc);
  if (wanted.size() == 1 && wanted[0] == "--list") {
    for (const auto& c : kCriteria) std::cout << c.name << "\n";
    return 0;
  }
  for (const auto& w : wanted) {
    bool known = false;
    for (const auto& c : kCriteria) known = known || w == c.name;
    if (!known) {
      std::cerr << "unknown criterion " << w << "\n";
      return 2;
    }
  }
  int failures = 0;
  for (const auto& c : kCriteria) {
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), c.name) == wanted.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << (o.pass ? "PASS " : "FAIL ") << c.name << " (" << fmt("%.1f", secs) << " s): " << o.detail
              << std::endl;
    failures += o.pass ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
