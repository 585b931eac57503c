#pragma once

#include "hmt/codec.hpp"
#include "hmt/mano.hpp"

#include <Eigen/Core>

#include <span>
#include <vector>

namespace hmt {

using JointSequence = std::vector<Joints21>;

/// Mean per-joint Euclidean distance in centimeters. Throws
/// Errc::shape_mismatch when frame counts differ or are zero.
double mpjpe(std::span<const Joints21> pred, std::span<const Joints21> gt);

/// Wrist (joint 0) only, centimeters.
double mwte(std::span<const Joints21> pred, std::span<const Joints21> gt);

struct Similarity {
  double scale = 1.0;
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return scale * (R * p) + t; }
};

/// Least-squares similarity taking `from` onto `to` (Umeyama). Throws
/// Errc::degenerate_frame when either point set has no spread.
Similarity umeyama(const Joints21& from, const Joints21& to);

/// Per-frame similarity alignment of pred onto gt, then MPJPE (cm).
double pa_mpjpe(std::span<const Joints21> pred, std::span<const Joints21> gt);

/// Frechet distance between Gaussian fits of two N x E embedding sets
/// (unbiased covariance, +1e-6 I). Throws Errc::shape_mismatch on an E
/// mismatch and Errc::invalid_input when either set has fewer than 2 rows.
double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

/// Fraction of queries whose partner gallery[pairs[i]] ranks within the top
/// k by cosine similarity; rank counts strictly more similar items. Throws
/// Errc::invalid_input when k exceeds the gallery or pairs is not a
/// bijection.
double retrieval_topk(const Eigen::MatrixXd& queries, const Eigen::MatrixXd& gallery, std::span<const int> pairs,
                      int k = 3);

/// Fraction of streams that parse and contain at least one motion block.
/// Throws Errc::invalid_input on an empty list.
double valid_rate(std::span<const std::vector<int>> streams, const Vocabulary& vocab);

}  // namespace hmt
