#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>

namespace hmt {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using RotMatrix = Mat3;

/// Rotation vector: direction is the axis, norm is the angle in radians.
struct AxisAngle {
  Vec3 v = Vec3::Zero();

  double angle() const { return v.norm(); }
  bool operator==(const AxisAngle&) const = default;
};

/// First two columns of a rotation matrix, column-major.
struct Rot6D {
  Vec6 r = (Vec6() << 1, 0, 0, 0, 1, 0).finished();
};

/// Rodrigues' formula, generic over the scalar so it can run on autodiff
/// jets. Near zero the second-order expansion keeps derivatives finite.
template <typename T>
Eigen::Matrix<T, 3, 3> rodrigues(const Eigen::Matrix<T, 3, 1>& v) {
  using std::cos;
  using std::sin;
  using std::sqrt;
  Eigen::Matrix<T, 3, 3> k;
  k << T(0), -v.z(), v.y(),
       v.z(), T(0), -v.x(),
       -v.y(), v.x(), T(0);
  const T theta2 = v.squaredNorm();
  Eigen::Matrix<T, 3, 3> out = Eigen::Matrix<T, 3, 3>::Identity();
  if (theta2 > T(1e-16)) {
    const T theta = sqrt(theta2);
    out += (sin(theta) / theta) * k + ((T(1) - cos(theta)) / theta2) * (k * k);
  } else {
    out += k + T(0.5) * (k * k);
  }
  return out;
}

/// Throws Errc::invalid_input on non-finite components.
RotMatrix axis_angle_to_matrix(const AxisAngle& a);

/// Angle is canonical in [0, pi]. At exactly pi the axis sign is chosen so
/// its first significant component is positive. Throws
/// Errc::invalid_rotation when m is not orthonormal with det +1 within 1e-6.
AxisAngle matrix_to_axis_angle(const RotMatrix& m);

/// Same rotation with angle folded into [0, pi].
AxisAngle canonicalize(const AxisAngle& a);

Rot6D matrix_to_rot6d(const RotMatrix& m);

/// Gram-Schmidt on the two stored columns. Throws Errc::degenerate_6d if the
/// first column is near zero or the second is (near) parallel to it.
RotMatrix rot6d_to_matrix(const Rot6D& r);

/// Geodesic interpolation, t in [0, 1].
RotMatrix slerp(const RotMatrix& from, const RotMatrix& to, double t);

/// Rotation by phi about the z axis.
RotMatrix rotation_z(double phi);

/// max |m^T m - I| and |det - 1|.
double orthonormality_error(const RotMatrix& m);

}  // namespace hmt
