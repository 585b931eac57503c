#include "hmt/rotations.hpp"

#include "hmt/error.hpp"

#include <algorithm>
#include <numbers>
#include <sstream>

namespace hmt {

namespace {

constexpr double kPi = std::numbers::pi;

Vec3 vee_antisym(const Mat3& m) {
  return Vec3(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1));
}

void positive_first_component(Vec3& axis) {
  for (int i = 0; i < 3; ++i) {
    if (std::abs(axis[i]) > 1e-12) {
      if (axis[i] < 0) axis = -axis;
      return;
    }
  }
}

}  // namespace

RotMatrix axis_angle_to_matrix(const AxisAngle& a) {
  if (!a.v.allFinite()) fail(Errc::invalid_input, "axis-angle has non-finite components");
  return rodrigues<double>(a.v);
}

double orthonormality_error(const RotMatrix& m) {
  const double ortho = (m.transpose() * m - Mat3::Identity()).cwiseAbs().maxCoeff();
  return std::max(ortho, std::abs(m.determinant() - 1.0));
}

AxisAngle matrix_to_axis_angle(const RotMatrix& m) {
  if (!m.allFinite() || orthonormality_error(m) > 1e-6) {
    std::ostringstream os;
    os << "matrix is not a rotation (orthonormality error "
       << (m.allFinite() ? orthonormality_error(m) : INFINITY) << ")";
    fail(Errc::invalid_rotation, os.str());
  }
  const Vec3 w = vee_antisym(m);      // 2 sin(theta) axis
  const double s = 0.5 * w.norm();    // sin(theta)
  const double c = 0.5 * (m.trace() - 1.0);
  const double theta = std::atan2(s, c);

  if (theta < 1e-7) {
    // First order: m - m^T = 2 [v]x.
    return {0.5 * w};
  }
  if (c > -0.5) {
    return {theta / (2.0 * s) * w};
  }
  // Near pi: sin(theta) is small so recover the axis from the symmetric part,
  // sym = cos I + (1 - cos) a a^T, using its largest diagonal entry.
  const Mat3 sym = 0.5 * (m + m.transpose());
  const Mat3 outer = (sym - c * Mat3::Identity()) / (1.0 - c);
  int k = 0;
  outer.diagonal().maxCoeff(&k);
  Vec3 axis = outer.col(k) / std::sqrt(std::max(outer(k, k), 1e-300));
  axis.normalize();
  if (s > 1e-10) {
    if (axis.dot(w) < 0) axis = -axis;
  } else {
    positive_first_component(axis);
  }
  return {theta * axis};
}

AxisAngle canonicalize(const AxisAngle& a) {
  const double theta = a.v.norm();
  if (theta <= kPi) {
    if (theta == kPi) {
      Vec3 axis = a.v / theta;
      positive_first_component(axis);
      return {kPi * axis};
    }
    return a;
  }
  const Vec3 axis = a.v / theta;
  double t = std::fmod(theta, 2.0 * kPi);
  if (t > kPi) return {-(2.0 * kPi - t) * axis};
  if (t == kPi) return canonicalize({kPi * axis});
  return {t * axis};
}

Rot6D matrix_to_rot6d(const RotMatrix& m) {
  Rot6D out;
  out.r << m.col(0), m.col(1);
  return out;
}

RotMatrix rot6d_to_matrix(const Rot6D& r) {
  const Vec3 a = r.r.head<3>();
  const Vec3 b = r.r.tail<3>();
  if (!r.r.allFinite()) fail(Errc::degenerate_6d, "6D rotation has non-finite components");
  const double na = a.norm();
  if (na <= 1e-8) fail(Errc::degenerate_6d, "6D rotation: first column has near-zero norm");
  const Vec3 c0 = a / na;
  const Vec3 ortho = b - c0.dot(b) * c0;
  const double no = ortho.norm();
  if (no <= 1e-8) fail(Errc::degenerate_6d, "6D rotation: columns are parallel or second is zero");
  const Vec3 c1 = ortho / no;
  RotMatrix m;
  m.col(0) = c0;
  m.col(1) = c1;
  m.col(2) = c0.cross(c1);
  return m;
}

RotMatrix slerp(const RotMatrix& from, const RotMatrix& to, double t) {
  const AxisAngle delta = matrix_to_axis_angle(from.transpose() * to);
  return from * axis_angle_to_matrix({t * delta.v});
}

RotMatrix rotation_z(double phi) {
  return Eigen::AngleAxisd(phi, Vec3::UnitZ()).toRotationMatrix();
}

}  // namespace hmt
