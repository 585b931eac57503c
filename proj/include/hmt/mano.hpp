#pragma once

#include "hmt/rotations.hpp"

#include "json.hpp"

#include <array>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace hmt {

inline constexpr int kNumJoints = 21;
inline constexpr int kNumArticulated = 15;
inline constexpr int kNumShape = 10;
/// Flat pose parameter layout: [theta (45) | r_rot (3) | tau (3) | beta (10)].
inline constexpr int kPoseParams = 3 * kNumArticulated + 3 + 3 + kNumShape;
inline constexpr int kThetaOffset = 0;
inline constexpr int kRotOffset = 45;
inline constexpr int kTauOffset = 48;
inline constexpr int kBetaOffset = 51;

using ShapeVec = Eigen::Matrix<double, kNumShape, 1>;
using Joints21 = std::array<Vec3, kNumJoints>;

enum class Side { left, right };

std::string_view side_name(Side side);
Side side_from_name(std::string_view name);

/// Per-frame MANO parameters.
struct HandPose {
  std::array<AxisAngle, kNumArticulated> theta{};
  AxisAngle r_rot{};
  Vec3 tau = Vec3::Zero();  // meters, camera frame
  ShapeVec beta = ShapeVec::Zero();
  Side side = Side::right;

  /// Throws Errc::invalid_input when any field is non-finite, |beta_i| > 5,
  /// or an angle exceeds pi.
  void validate() const;

  Eigen::Matrix<double, kPoseParams, 1> to_params() const;
  static HandPose from_params(const Eigen::Matrix<double, kPoseParams, 1>& p, Side side);

  nlohmann::json to_json() const;
  static HandPose from_json(const nlohmann::json& j, Side side);
};

/// Rigid 21-joint kinematic tree with linear shape correctives. Joint 0 is
/// the wrist. Joints that have children (other than the root) are the 15
/// articulated joints, numbered in increasing joint order.
struct HandSkeleton {
  std::array<int, kNumJoints> parent{};
  /// offsets[0] is unused; offsets[j] is the rest bone from parent[j] to j.
  std::array<Vec3, kNumJoints> offsets{};
  /// shape_dirs[0] is ignored (the wrist sits exactly at tau).
  std::array<Eigen::Matrix<double, 3, kNumShape>, kNumJoints> shape_dirs{};

  /// articulated[j] = theta index driving joint j's children, or -1.
  std::array<int, kNumJoints> articulated{};

  void validate_and_index();

  static HandSkeleton rest_default();
  static HandSkeleton from_json(const nlohmann::json& j);
  static HandSkeleton load(const std::string& path);
  nlohmann::json to_json() const;
};

namespace detail {

template <typename T>
using V3 = Eigen::Matrix<T, 3, 1>;

/// FK over a flat parameter vector; used directly with autodiff scalars.
template <typename T, typename Params>
std::array<V3<T>, kNumJoints> forward_kinematics_params(const Params& p, const HandSkeleton& skel,
                                                        Side side) {
  std::array<V3<T>, kNumJoints> pos;
  std::array<Eigen::Matrix<T, 3, 3>, kNumJoints> rot;
  const double mirror = side == Side::left ? -1.0 : 1.0;
  pos[0] = V3<T>(p[kTauOffset], p[kTauOffset + 1], p[kTauOffset + 2]);
  rot[0] = rodrigues<T>(V3<T>(p[kRotOffset], p[kRotOffset + 1], p[kRotOffset + 2]));
  for (int j = 1; j < kNumJoints; ++j) {
    const int par = skel.parent[j];
    V3<T> bone;
    for (int r = 0; r < 3; ++r) {
      T acc = T(skel.offsets[j][r]);
      for (int b = 0; b < kNumShape; ++b) acc += skel.shape_dirs[j](r, b) * p[kBetaOffset + b];
      bone[r] = r == 0 ? acc * mirror : acc;
    }
    pos[j] = pos[par] + rot[par] * bone;
    const int a = skel.articulated[j];
    if (a >= 0) {
      rot[j] = rot[par] * rodrigues<T>(V3<T>(p[3 * a], p[3 * a + 1], p[3 * a + 2]));
    } else {
      rot[j] = rot[par];
    }
  }
  return pos;
}

}  // namespace detail

Joints21 forward_kinematics(const HandPose& pose, const HandSkeleton& skel);

// ---------------------------------------------------------------------------
// Feature encodings

enum class FeatureVariant { D51, D99, D109, D114, D162 };

int feature_dim(FeatureVariant v);
std::string_view variant_name(FeatureVariant v);
FeatureVariant variant_from_name(std::string_view name);

/// Column layout [r_rot | tau | theta | (beta) | (joints)].
struct FeatureLayout {
  bool six_d = false;
  int rot_width = 3;  // 3 (axis-angle) or 6
  int rrot_begin = 0;
  int tau_begin = 0;
  int theta_begin = 0;
  int beta_begin = -1;
  int joints_begin = -1;
  int dim = 0;
};

FeatureLayout feature_layout(FeatureVariant v);

/// Wrist part = {r_rot, tau, wrist joint}; finger part = {theta, beta,
/// remaining joints}. Index lists are sorted and partition [0, dim).
struct FeatureSplit {
  std::vector<int> wrist;
  std::vector<int> finger;
};

FeatureSplit feature_split(FeatureVariant v);

struct FeatureSequence {
  Eigen::MatrixXd data;  // T x dim
  FeatureVariant variant = FeatureVariant::D162;
  double fps = 15.0;
  ShapeVec beta_ref = ShapeVec::Zero();
  Side side = Side::right;

  int frames() const { return static_cast<int>(data.rows()); }
};

/// beta_ref is frame 0's beta. Throws Errc::encode on an empty sequence or
/// mixed sides.
FeatureSequence encode_feature(std::span<const HandPose> poses, FeatureVariant variant,
                               const HandSkeleton& skel, double fps = 15.0);

/// Auxiliary joint columns are ignored. Throws Errc::decode with the
/// offending frame/joint when a 6D block is degenerate.
std::vector<HandPose> decode_feature(const FeatureSequence& fs);

// ---------------------------------------------------------------------------
// Fitting

struct FitOptions {
  int iterations = 2000;
  double learning_rate = 1.0;
  /// Quadratic hinge on finger axis-angle components beyond +-angle_limit.
  double angle_limit = 1.5707963267948966;
  double angle_weight = 1.0;
  /// Pull toward `previous` (theta, r_rot, tau); used for temporal smoothing.
  double smooth_weight = 0.0;
  const HandPose* previous = nullptr;
  bool fit_shape = false;
  double gradient_tolerance = 1e-16;
  /// A fit ending above this mean squared joint error (m^2) is a failure.
  double max_residual = std::numeric_limits<double>::infinity();
};

struct FitResult {
  HandPose pose;
  double residual = 0.0;          // mean squared joint error, m^2
  double initial_residual = 0.0;
  double objective = 0.0;         // residual + penalties
  double max_joint_error = 0.0;   // meters
  int iterations = 0;
  int accepted_steps = 0;
  std::vector<double> history;    // objective after each accepted step
};

/// Objective and its gradient over the flat parameter vector.
double fit_objective(const Eigen::Matrix<double, kPoseParams, 1>& params, const Joints21& target,
                     const HandSkeleton& skel, Side side, const FitOptions& opts,
                     Eigen::Matrix<double, kPoseParams, 1>* gradient);

/// Jacobi-preconditioned gradient descent with step halving on increase.
/// Throws Errc::fit_failure when the objective diverges (> 10x initial),
/// turns non-finite, or the result exceeds opts.max_residual.
FitResult fit_pose_to_joints(const Joints21& target, const HandSkeleton& skel,
                             const HandPose& init, const FitOptions& opts = {});

}  // namespace hmt
