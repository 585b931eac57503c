#include "hmt/mano.hpp"

#include "hmt/error.hpp"

#include <ceres/jet.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace hmt {

using PoseParams = Eigen::Matrix<double, kPoseParams, 1>;

std::string_view side_name(Side side) { return side == Side::left ? "left" : "right"; }

Side side_from_name(std::string_view name) {
  if (name == "left") return Side::left;
  if (name == "right") return Side::right;
  fail(Errc::invalid_input, "unknown hand side '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// HandPose

void HandPose::validate() const {
  auto bad = [](const std::string& what) { fail(Errc::invalid_input, "hand pose: " + what); };
  if (!r_rot.v.allFinite() || !tau.allFinite() || !beta.allFinite()) bad("non-finite field");
  if (r_rot.angle() > std::numbers::pi + 1e-9) bad("r_rot angle exceeds pi");
  for (int i = 0; i < kNumArticulated; ++i) {
    if (!theta[i].v.allFinite()) bad("non-finite theta[" + std::to_string(i) + "]");
    if (theta[i].angle() > std::numbers::pi + 1e-9) bad("theta[" + std::to_string(i) + "] angle exceeds pi");
  }
  if (beta.cwiseAbs().maxCoeff() > 5.0) bad("|beta| exceeds 5");
}

PoseParams HandPose::to_params() const {
  PoseParams p;
  for (int i = 0; i < kNumArticulated; ++i) p.segment<3>(3 * i) = theta[i].v;
  p.segment<3>(kRotOffset) = r_rot.v;
  p.segment<3>(kTauOffset) = tau;
  p.segment<kNumShape>(kBetaOffset) = beta;
  return p;
}

HandPose HandPose::from_params(const PoseParams& p, Side side) {
  HandPose out;
  for (int i = 0; i < kNumArticulated; ++i) out.theta[i].v = p.segment<3>(3 * i);
  out.r_rot.v = p.segment<3>(kRotOffset);
  out.tau = p.segment<3>(kTauOffset);
  out.beta = p.segment<kNumShape>(kBetaOffset);
  out.side = side;
  return out;
}

nlohmann::json HandPose::to_json() const {
  std::vector<double> th;
  th.reserve(45);
  for (const auto& t : theta) th.insert(th.end(), t.v.data(), t.v.data() + 3);
  return {{"theta", th},
          {"rrot", {r_rot.v.x(), r_rot.v.y(), r_rot.v.z()}},
          {"tau", {tau.x(), tau.y(), tau.z()}},
          {"beta", std::vector<double>(beta.data(), beta.data() + kNumShape)}};
}

namespace {

std::vector<double> read_array(const nlohmann::json& j, const char* key, std::size_t n,
                               const std::string& where) {
  if (!j.contains(key)) fail(Errc::invalid_input, where + "." + key + ": missing");
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != n) {
    fail(Errc::invalid_input, where + "." + key + ": expected array of " + std::to_string(n));
  }
  std::vector<double> out;
  out.reserve(n);
  for (const auto& x : a) {
    if (!x.is_number()) fail(Errc::invalid_input, where + "." + key + ": non-numeric entry");
    out.push_back(x.get<double>());
  }
  return out;
}

}  // namespace

HandPose HandPose::from_json(const nlohmann::json& j, Side side) {
  HandPose p;
  p.side = side;
  const std::string where(side_name(side));
  const auto th = read_array(j, "theta", 45, where);
  for (int i = 0; i < kNumArticulated; ++i) p.theta[i].v = Vec3(th[3 * i], th[3 * i + 1], th[3 * i + 2]);
  const auto rr = read_array(j, "rrot", 3, where);
  p.r_rot.v = Vec3(rr[0], rr[1], rr[2]);
  const auto ta = read_array(j, "tau", 3, where);
  p.tau = Vec3(ta[0], ta[1], ta[2]);
  const auto be = read_array(j, "beta", kNumShape, where);
  for (int i = 0; i < kNumShape; ++i) p.beta[i] = be[i];
  return p;
}

// ---------------------------------------------------------------------------
// HandSkeleton

void HandSkeleton::validate_and_index() {
  if (parent[0] != -1) fail(Errc::invalid_input, "skeleton: joint 0 must be the root (parent -1)");
  std::array<bool, kNumJoints> has_child{};
  for (int j = 1; j < kNumJoints; ++j) {
    // Parents precede children, which also rules out cycles.
    if (parent[j] < 0 || parent[j] >= j) {
      fail(Errc::invalid_input, "skeleton: parent[" + std::to_string(j) + "] must be in [0, j)");
    }
    has_child[parent[j]] = true;
    if (!offsets[j].allFinite() || offsets[j].norm() <= 0.0) {
      fail(Errc::invalid_input, "skeleton: offset " + std::to_string(j) + " must be finite and non-zero");
    }
    if (!shape_dirs[j].allFinite()) fail(Errc::invalid_input, "skeleton: non-finite shape_dirs");
  }
  int next = 0;
  articulated.fill(-1);
  for (int j = 1; j < kNumJoints; ++j) {
    if (has_child[j]) articulated[j] = next++;
  }
  if (next != kNumArticulated) {
    fail(Errc::invalid_input, "skeleton: expected 15 articulated joints, found " + std::to_string(next));
  }
}

HandSkeleton HandSkeleton::rest_default() {
  HandSkeleton s;
  s.parent = {-1, 0, 1, 2, 3, 0, 5, 6, 7, 0, 9, 10, 11, 0, 13, 14, 15, 0, 17, 18, 19};
  s.offsets[0] = Vec3::Zero();
  // Right hand, palm in the xy plane, fingers along +x. Meters.
  struct Finger {
    Vec3 base;
    std::array<double, 3> bones;
    Vec3 dir;
  };
  const std::array<Finger, 5> fingers = {{
      {Vec3(0.025, 0.020, -0.012), {0.035, 0.032, 0.027}, Vec3(0.6, 0.8, 0.0).normalized()},
      {Vec3(0.090, 0.024, 0.0), {0.040, 0.024, 0.021}, Vec3::UnitX()},
      {Vec3(0.093, 0.004, 0.0), {0.044, 0.027, 0.023}, Vec3::UnitX()},
      {Vec3(0.088, -0.015, 0.0), {0.041, 0.026, 0.022}, Vec3::UnitX()},
      {Vec3(0.080, -0.032, 0.0), {0.032, 0.019, 0.018}, Vec3::UnitX()},
  }};
  for (int f = 0; f < 5; ++f) {
    const int root = 1 + 4 * f;
    s.offsets[root] = fingers[f].base;
    for (int b = 0; b < 3; ++b) s.offsets[root + 1 + b] = fingers[f].bones[b] * fingers[f].dir;
  }
  // Shape correctives: beta0 overall size, beta1 palm width, beta2 finger
  // length, the rest small fixed perturbations.
  for (int j = 0; j < kNumJoints; ++j) s.shape_dirs[j].setZero();
  for (int j = 1; j < kNumJoints; ++j) {
    const Vec3& o = s.offsets[j];
    const bool finger_root = (j - 1) % 4 == 0;
    s.shape_dirs[j].col(0) = 0.08 * o;
    if (finger_root) s.shape_dirs[j](1, 1) = 0.10 * o.y();
    if (!finger_root) s.shape_dirs[j].col(2) = 0.06 * o;
    for (int b = 3; b < kNumShape; ++b) {
      for (int r = 0; r < 3; ++r) {
        // Deterministic pattern in [-1, 1] mm.
        const double phase = 0.7 * j + 1.3 * b + 2.1 * r;
        s.shape_dirs[j](r, b) = 0.001 * std::sin(phase * 3.0);
      }
    }
  }
  s.validate_and_index();
  return s;
}

HandSkeleton HandSkeleton::from_json(const nlohmann::json& j) {
  HandSkeleton s;
  try {
    const auto& parent = j.at("parent");
    const auto& offsets = j.at("offsets");
    const auto& dirs = j.at("shape_dirs");
    if (parent.size() != kNumJoints) fail(Errc::invalid_input, "skeleton: parent needs 21 entries");
    if (offsets.size() != kNumJoints - 1) fail(Errc::invalid_input, "skeleton: offsets needs 20 entries");
    if (dirs.size() != kNumJoints) fail(Errc::invalid_input, "skeleton: shape_dirs needs 21 entries");
    for (int i = 0; i < kNumJoints; ++i) s.parent[i] = parent[i].get<int>();
    s.offsets[0].setZero();
    for (int i = 0; i < kNumJoints - 1; ++i) {
      for (int r = 0; r < 3; ++r) s.offsets[i + 1][r] = offsets[i].at(r).get<double>();
    }
    for (int i = 0; i < kNumJoints; ++i) {
      if (dirs[i].size() != 3) fail(Errc::invalid_input, "skeleton: shape_dirs entries are 3x10");
      for (int r = 0; r < 3; ++r) {
        if (dirs[i][r].size() != kNumShape) fail(Errc::invalid_input, "skeleton: shape_dirs entries are 3x10");
        for (int b = 0; b < kNumShape; ++b) s.shape_dirs[i](r, b) = dirs[i][r][b].get<double>();
      }
    }
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::invalid_input, std::string("skeleton: ") + e.what());
  }
  s.validate_and_index();
  return s;
}

HandSkeleton HandSkeleton::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::io, "cannot open skeleton file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::invalid_input, "skeleton " + path + ": " + e.what());
  }
  return from_json(j);
}

nlohmann::json HandSkeleton::to_json() const {
  nlohmann::json j;
  j["parent"] = std::vector<int>(parent.begin(), parent.end());
  auto offs = nlohmann::json::array();
  for (int i = 1; i < kNumJoints; ++i) offs.push_back({offsets[i].x(), offsets[i].y(), offsets[i].z()});
  j["offsets"] = offs;
  auto dirs = nlohmann::json::array();
  for (int i = 0; i < kNumJoints; ++i) {
    auto m = nlohmann::json::array();
    for (int r = 0; r < 3; ++r) {
      std::vector<double> row(kNumShape);
      for (int b = 0; b < kNumShape; ++b) row[b] = shape_dirs[i](r, b);
      m.push_back(row);
    }
    dirs.push_back(m);
  }
  j["shape_dirs"] = dirs;
  return j;
}

Joints21 forward_kinematics(const HandPose& pose, const HandSkeleton& skel) {
  const PoseParams p = pose.to_params();
  return detail::forward_kinematics_params<double>(p, skel, pose.side);
}

// ---------------------------------------------------------------------------
// Features

int feature_dim(FeatureVariant v) { return feature_layout(v).dim; }

std::string_view variant_name(FeatureVariant v) {
  switch (v) {
    case FeatureVariant::D51: return "D51";
    case FeatureVariant::D99: return "D99";
    case FeatureVariant::D109: return "D109";
    case FeatureVariant::D114: return "D114";
    case FeatureVariant::D162: return "D162";
  }
  return "?";
}

FeatureVariant variant_from_name(std::string_view name) {
  for (auto v : {FeatureVariant::D51, FeatureVariant::D99, FeatureVariant::D109, FeatureVariant::D114,
                 FeatureVariant::D162}) {
    if (variant_name(v) == name) return v;
  }
  fail(Errc::config, "unknown feature variant '" + std::string(name) + "'");
}

FeatureLayout feature_layout(FeatureVariant v) {
  FeatureLayout l;
  l.six_d = v == FeatureVariant::D99 || v == FeatureVariant::D109 || v == FeatureVariant::D162;
  l.rot_width = l.six_d ? 6 : 3;
  l.rrot_begin = 0;
  l.tau_begin = l.rot_width;
  l.theta_begin = l.tau_begin + 3;
  int end = l.theta_begin + kNumArticulated * l.rot_width;
  if (v == FeatureVariant::D109) {
    l.beta_begin = end;
    end += kNumShape;
  }
  if (v == FeatureVariant::D114 || v == FeatureVariant::D162) {
    l.joints_begin = end;
    end += 3 * kNumJoints;
  }
  l.dim = end;
  return l;
}

FeatureSplit feature_split(FeatureVariant v) {
  const FeatureLayout l = feature_layout(v);
  FeatureSplit s;
  for (int c = 0; c < l.theta_begin; ++c) s.wrist.push_back(c);
  for (int c = l.theta_begin; c < l.dim; ++c) {
    const bool wrist_joint = l.joints_begin >= 0 && c >= l.joints_begin && c < l.joints_begin + 3;
    (wrist_joint ? s.wrist : s.finger).push_back(c);
  }
  std::sort(s.wrist.begin(), s.wrist.end());
  return s;
}

namespace {

template <typename Row>
void put_rotation(Row&& row, int begin, const AxisAngle& a, bool six_d) {
  if (six_d) {
    row.template segment<6>(begin) = matrix_to_rot6d(axis_angle_to_matrix(a)).r.transpose();
  } else {
    row.template segment<3>(begin) = a.v.transpose();
  }
}

}  // namespace

FeatureSequence encode_feature(std::span<const HandPose> poses, FeatureVariant variant,
                               const HandSkeleton& skel, double fps) {
  if (poses.empty()) fail(Errc::encode, "encode_feature: empty pose sequence");
  const FeatureLayout l = feature_layout(variant);
  FeatureSequence fs;
  fs.variant = variant;
  fs.fps = fps;
  fs.side = poses.front().side;
  fs.beta_ref = poses.front().beta;
  fs.data.resize(static_cast<Eigen::Index>(poses.size()), l.dim);
  for (std::size_t t = 0; t < poses.size(); ++t) {
    const HandPose& p = poses[t];
    if (p.side != fs.side) fail(Errc::encode, "encode_feature: mixed hand sides at frame " + std::to_string(t));
    auto row = fs.data.row(static_cast<Eigen::Index>(t));
    put_rotation(row, l.rrot_begin, p.r_rot, l.six_d);
    row.segment<3>(l.tau_begin) = p.tau.transpose();
    for (int k = 0; k < kNumArticulated; ++k) put_rotation(row, l.theta_begin + k * l.rot_width, p.theta[k], l.six_d);
    if (l.beta_begin >= 0) row.segment<kNumShape>(l.beta_begin) = p.beta.transpose();
    if (l.joints_begin >= 0) {
      const Joints21 j = forward_kinematics(p, skel);
      for (int k = 0; k < kNumJoints; ++k) row.segment<3>(l.joints_begin + 3 * k) = j[k].transpose();
    }
  }
  return fs;
}

std::vector<HandPose> decode_feature(const FeatureSequence& fs) {
  const FeatureLayout l = feature_layout(fs.variant);
  if (fs.data.cols() != l.dim) {
    fail(Errc::decode, "decode_feature: width " + std::to_string(fs.data.cols()) + " does not match " +
                           std::string(variant_name(fs.variant)));
  }
  std::vector<HandPose> out;
  out.reserve(static_cast<std::size_t>(fs.data.rows()));
  auto read_rot = [&](Eigen::Index t, int begin, int joint) -> AxisAngle {
    if (!l.six_d) return {fs.data.row(t).segment<3>(begin).transpose()};
    Rot6D r;
    r.r = fs.data.row(t).segment<6>(begin).transpose();
    try {
      return matrix_to_axis_angle(rot6d_to_matrix(r));
    } catch (const Error& e) {
      std::ostringstream os;
      os << "decode_feature: frame " << t << ", " << (joint < 0 ? std::string("r_rot") : "theta[" + std::to_string(joint) + "]")
         << ": " << e.what();
      fail(Errc::decode, os.str());
    }
  };
  for (Eigen::Index t = 0; t < fs.data.rows(); ++t) {
    HandPose p;
    p.side = fs.side;
    p.r_rot = read_rot(t, l.rrot_begin, -1);
    p.tau = fs.data.row(t).segment<3>(l.tau_begin).transpose();
    for (int k = 0; k < kNumArticulated; ++k) p.theta[k] = read_rot(t, l.theta_begin + k * l.rot_width, k);
    p.beta = l.beta_begin >= 0 ? ShapeVec(fs.data.row(t).segment<kNumShape>(l.beta_begin).transpose())
                               : fs.beta_ref;
    out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fitting

namespace {

using Jet = ceres::Jet<double, kPoseParams>;

/// Joint positions and their Jacobian (63 x 61) at params.
void joints_and_jacobian(const PoseParams& params, const HandSkeleton& skel, Side side, Joints21& joints,
                         Eigen::Matrix<double, 3 * kNumJoints, kPoseParams>& jac) {
  std::array<Jet, kPoseParams> p;
  for (int i = 0; i < kPoseParams; ++i) p[i] = Jet(params[i], i);
  const auto pos = detail::forward_kinematics_params<Jet>(p, skel, side);
  for (int j = 0; j < kNumJoints; ++j) {
    for (int r = 0; r < 3; ++r) {
      joints[j][r] = pos[j][r].a;
      jac.row(3 * j + r) = pos[j][r].v.transpose();
    }
  }
}

double joint_residual(const Joints21& joints, const Joints21& target) {
  double acc = 0.0;
  for (int j = 0; j < kNumJoints; ++j) acc += (joints[j] - target[j]).squaredNorm();
  return acc / kNumJoints;
}

double max_error(const Joints21& joints, const Joints21& target) {
  double m = 0.0;
  for (int j = 0; j < kNumJoints; ++j) m = std::max(m, (joints[j] - target[j]).norm());
  return m;
}

struct Evaluation {
  double objective = 0.0;
  double residual = 0.0;
  PoseParams gradient = PoseParams::Zero();
  PoseParams curvature = PoseParams::Zero();  // diagonal Gauss-Newton estimate
  Joints21 joints{};
};

Evaluation evaluate(const PoseParams& params, const Joints21& target, const HandSkeleton& skel, Side side,
                    const FitOptions& opts, bool with_gradient) {
  Evaluation ev;
  Eigen::Matrix<double, 3 * kNumJoints, kPoseParams> jac;
  if (with_gradient) {
    joints_and_jacobian(params, skel, side, ev.joints, jac);
  } else {
    ev.joints = detail::forward_kinematics_params<double>(params, skel, side);
  }
  ev.residual = joint_residual(ev.joints, target);
  ev.objective = ev.residual;
  if (with_gradient) {
    Eigen::Matrix<double, 3 * kNumJoints, 1> diff;
    for (int j = 0; j < kNumJoints; ++j) diff.segment<3>(3 * j) = ev.joints[j] - target[j];
    ev.gradient = (2.0 / kNumJoints) * jac.transpose() * diff;
    ev.curvature = (2.0 / kNumJoints) * jac.colwise().squaredNorm().transpose();
  }
  for (int i = 0; i < 3 * kNumArticulated; ++i) {
    const double excess = std::abs(params[i]) - opts.angle_limit;
    if (excess > 0) {
      ev.objective += opts.angle_weight * excess * excess;
      if (with_gradient) {
        ev.gradient[i] += 2.0 * opts.angle_weight * excess * (params[i] > 0 ? 1.0 : -1.0);
        ev.curvature[i] += 2.0 * opts.angle_weight;
      }
    }
  }
  if (opts.previous != nullptr && opts.smooth_weight > 0) {
    const PoseParams prev = opts.previous->to_params();
    for (int i = 0; i < kBetaOffset; ++i) {
      const double d = params[i] - prev[i];
      ev.objective += opts.smooth_weight * d * d;
      if (with_gradient) {
        ev.gradient[i] += 2.0 * opts.smooth_weight * d;
        ev.curvature[i] += 2.0 * opts.smooth_weight;
      }
    }
  }
  if (with_gradient && !opts.fit_shape) {
    ev.gradient.segment<kNumShape>(kBetaOffset).setZero();
    ev.curvature.segment<kNumShape>(kBetaOffset).setZero();
  }
  return ev;
}

}  // namespace

double fit_objective(const PoseParams& params, const Joints21& target, const HandSkeleton& skel, Side side,
                     const FitOptions& opts, PoseParams* gradient) {
  const Evaluation ev = evaluate(params, target, skel, side, opts, gradient != nullptr);
  if (gradient != nullptr) *gradient = ev.gradient;
  return ev.objective;
}

FitResult fit_pose_to_joints(const Joints21& target, const HandSkeleton& skel, const HandPose& init,
                             const FitOptions& opts) {
  for (const auto& t : target) {
    if (!t.allFinite()) fail(Errc::invalid_input, "fit_pose_to_joints: non-finite target joint");
  }
  init.validate();
  const Side side = init.side;
  PoseParams params = init.to_params();
  Evaluation current = evaluate(params, target, skel, side, opts, true);

  FitResult result;
  result.initial_residual = current.residual;
  const double initial_objective = current.objective;
  double lr = opts.learning_rate;

  int it = 0;
  for (; it < opts.iterations; ++it) {
    if (current.gradient.norm() <= opts.gradient_tolerance || lr < 1e-14) break;
    // Jacobi preconditioning; the floor keeps unobservable directions still.
    const double floor = 1e-9 * std::max(1.0, current.curvature.maxCoeff());
    const PoseParams step = current.gradient.cwiseQuotient(current.curvature.cwiseMax(floor));
    const PoseParams trial = params - lr * step;
    const Evaluation next = evaluate(trial, target, skel, side, opts, true);
    if (!std::isfinite(next.objective)) {
      lr *= 0.5;
      continue;
    }
    if (next.objective > current.objective) {
      lr *= 0.5;
      if (next.objective > 10.0 * std::max(initial_objective, 1e-300) && lr < 1e-14) break;
      continue;
    }
    params = trial;
    current = next;
    result.history.push_back(current.objective);
    ++result.accepted_steps;
    lr = std::min(lr * 2.0, opts.learning_rate);
  }
  if (!std::isfinite(current.objective) || current.objective > 10.0 * std::max(initial_objective, 1e-300)) {
    std::ostringstream os;
    os << "fit diverged: objective " << current.objective << " vs initial " << initial_objective;
    fail(Errc::fit_failure, os.str());
  }

  result.pose = HandPose::from_params(params, side);
  for (auto& t : result.pose.theta) t = canonicalize(t);
  result.pose.r_rot = canonicalize(result.pose.r_rot);
  result.residual = current.residual;
  result.objective = current.objective;
  result.max_joint_error = max_error(current.joints, target);
  result.iterations = it;
  if (result.residual > opts.max_residual) {
    std::ostringstream os;
    os << "fit residual " << result.residual << " m^2 exceeds limit " << opts.max_residual
       << " (initial " << result.initial_residual << ", max joint error " << result.max_joint_error
       << " m, " << result.accepted_steps << " accepted steps)";
    fail(Errc::fit_failure, os.str());
  }
  return result;
}

}  // namespace hmt
