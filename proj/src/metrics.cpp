#include "hmt/metrics.hpp"

#include "hmt/error.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>

namespace hmt {

namespace {

void check_shapes(std::span<const Joints21> pred, std::span<const Joints21> gt) {
  if (pred.empty() || pred.size() != gt.size()) {
    fail(Errc::shape_mismatch, "joint sequences have " + std::to_string(pred.size()) + " and " +
                                   std::to_string(gt.size()) + " frames");
  }
}

double frame_error(const Joints21& a, const Joints21& b) {
  double s = 0.0;
  for (int j = 0; j < kNumJoints; ++j) s += (a[j] - b[j]).norm();
  return s / kNumJoints;
}

}  // namespace

double mpjpe(std::span<const Joints21> pred, std::span<const Joints21> gt) {
  check_shapes(pred, gt);
  double s = 0.0;
  for (std::size_t t = 0; t < pred.size(); ++t) s += frame_error(pred[t], gt[t]);
  return 100.0 * s / static_cast<double>(pred.size());
}

double mwte(std::span<const Joints21> pred, std::span<const Joints21> gt) {
  check_shapes(pred, gt);
  double s = 0.0;
  for (std::size_t t = 0; t < pred.size(); ++t) s += (pred[t][0] - gt[t][0]).norm();
  return 100.0 * s / static_cast<double>(pred.size());
}

Similarity umeyama(const Joints21& from, const Joints21& to) {
  Vec3 mu_f = Vec3::Zero(), mu_t = Vec3::Zero();
  for (int j = 0; j < kNumJoints; ++j) {
    mu_f += from[j];
    mu_t += to[j];
  }
  mu_f /= kNumJoints;
  mu_t /= kNumJoints;
  double var_f = 0.0, var_t = 0.0;
  Mat3 cov = Mat3::Zero();
  for (int j = 0; j < kNumJoints; ++j) {
    const Vec3 a = from[j] - mu_f;
    const Vec3 b = to[j] - mu_t;
    var_f += a.squaredNorm();
    var_t += b.squaredNorm();
    cov += b * a.transpose();
  }
  var_f /= kNumJoints;
  var_t /= kNumJoints;
  cov /= kNumJoints;
  if (!(var_f > 1e-20) || !(var_t > 1e-20)) fail(Errc::degenerate_frame, "all joints coincide in a frame");

  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 S = Mat3::Identity();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) S(2, 2) = -1.0;
  Similarity out;
  out.R = svd.matrixU() * S * svd.matrixV().transpose();
  out.scale = (svd.singularValues().asDiagonal() * S).trace() / var_f;
  out.t = mu_t - out.scale * (out.R * mu_f);
  return out;
}

double pa_mpjpe(std::span<const Joints21> pred, std::span<const Joints21> gt) {
  check_shapes(pred, gt);
  double s = 0.0;
  for (std::size_t t = 0; t < pred.size(); ++t) {
    const Similarity sim = umeyama(pred[t], gt[t]);
    Joints21 aligned;
    for (int j = 0; j < kNumJoints; ++j) aligned[j] = sim.apply(pred[t][j]);
    s += frame_error(aligned, gt[t]);
  }
  return 100.0 * s / static_cast<double>(pred.size());
}

double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.cols() != b.cols()) {
    fail(Errc::shape_mismatch, "embedding widths differ: " + std::to_string(a.cols()) + " vs " + std::to_string(b.cols()));
  }
  if (a.rows() < 2 || b.rows() < 2) fail(Errc::invalid_input, "Frechet distance needs at least 2 embeddings per set");
  const Eigen::Index e = a.cols();
  auto stats = [e](const Eigen::MatrixXd& x, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    mu = x.colwise().mean().transpose();
    const Eigen::MatrixXd c = x.rowwise() - mu.transpose();
    cov = c.transpose() * c / static_cast<double>(x.rows() - 1);
    cov += 1e-6 * Eigen::MatrixXd::Identity(e, e);
  };
  Eigen::VectorXd mu_a, mu_b;
  Eigen::MatrixXd cov_a, cov_b;
  stats(a, mu_a, cov_a);
  stats(b, mu_b, cov_b);

  // Tr((A B)^{1/2}) = Tr((A^{1/2} B A^{1/2})^{1/2}), the latter symmetric PSD.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(cov_a);
  const Eigen::MatrixXd sqrt_a =
      ea.eigenvectors() * ea.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() * ea.eigenvectors().transpose();
  Eigen::MatrixXd m = sqrt_a * cov_b * sqrt_a;
  m = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(m, Eigen::EigenvaluesOnly);
  const double tr_sqrt = em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  return (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
}

double retrieval_topk(const Eigen::MatrixXd& queries, const Eigen::MatrixXd& gallery, std::span<const int> pairs,
                      int k) {
  const Eigen::Index n = gallery.rows();
  if (k < 1 || k > n) fail(Errc::invalid_input, "k must be in [1, gallery size]");
  if (queries.cols() != gallery.cols()) fail(Errc::shape_mismatch, "query and gallery widths differ");
  if (static_cast<Eigen::Index>(pairs.size()) != queries.rows() || queries.rows() != n) {
    fail(Errc::invalid_input, "pairs must map every query to a distinct gallery item");
  }
  std::vector<bool> seen(static_cast<std::size_t>(n), false);
  for (int p : pairs) {
    if (p < 0 || p >= n || seen[static_cast<std::size_t>(p)]) {
      fail(Errc::invalid_input, "pairs must map every query to a distinct gallery item");
    }
    seen[static_cast<std::size_t>(p)] = true;
  }
  auto unit_rows = [](const Eigen::MatrixXd& x) {
    Eigen::MatrixXd u = x;
    for (Eigen::Index i = 0; i < u.rows(); ++i) {
      const double len = u.row(i).norm();
      if (len > 0.0) u.row(i) /= len;
    }
    return u;
  };
  const Eigen::MatrixXd sim = unit_rows(queries) * unit_rows(gallery).transpose();
  int hits = 0;
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    const double truth = sim(i, pairs[static_cast<std::size_t>(i)]);
    const auto better = (sim.row(i).array() > truth).count();
    if (better < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(sim.rows());
}

double valid_rate(std::span<const std::vector<int>> streams, const Vocabulary& vocab) {
  if (streams.empty()) fail(Errc::invalid_input, "valid_rate: no streams");
  int ok = 0;
  for (const auto& s : streams) {
    const ParseResult r = parse_stream(s, vocab);
    const bool has_block = std::any_of(r.segments.begin(), r.segments.end(),
                                       [](const Segment& seg) { return seg.kind == SegmentKind::motion_block; });
    if (r.valid && has_block) ++ok;
  }
  return static_cast<double>(ok) / static_cast<double>(streams.size());
}

}  // namespace hmt
