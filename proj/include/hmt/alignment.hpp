#pragma once

#include "hmt/image.hpp"
#include "hmt/mano.hpp"
#include "hmt/rng.hpp"

#include "json.hpp"

#include <span>
#include <string>
#include <vector>

namespace hmt {

struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  /// Throws Errc::invalid_input.
  void validate() const;
  nlohmann::json to_json() const;
  static CameraIntrinsics from_json(const nlohmann::json& j);
  static CameraIntrinsics load(const std::string& path);
};

/// u' = s_x u + dx, v' = s_y v + dy.
struct AffineMap {
  double sx = 1.0;
  double sy = 1.0;
  double dx = 0.0;
  double dy = 0.0;

  /// Applies `this` after `first`.
  AffineMap after(const AffineMap& first) const;
};

AffineMap weak_perspective_map(const CameraIntrinsics& src, const CameraIntrinsics& dst);

/// Bilinear resampling at the inverse map, black outside the source.
Image remap_image(const Image& img, const AffineMap& map, const CameraIntrinsics& target);

/// Horizontal field of view of 90 degrees (fx' = width/2), fy scaled by the
/// same factor, principal point centered, resolution unchanged.
CameraIntrinsics normalize_fov(const CameraIntrinsics& src);

/// Horizontal field of view in radians.
double horizontal_fov(const CameraIntrinsics& k);

/// Throws Errc::behind_camera for z <= 0.
Eigen::Vector2d project_point(const CameraIntrinsics& k, const Vec3& p);

struct AugmentRange {
  double lambda_min = 0.7;
  double lambda_max = 1.4;
};

enum class AugmentKind { depth_scale, inplane_rotation };

struct AugmentRecord {
  AugmentKind kind = AugmentKind::depth_scale;
  double lambda_s = 1.0;  // depth_scale
  double phi = 0.0;       // inplane_rotation, radians
  std::string source_id;

  nlohmann::json to_json() const;
  static AugmentRecord from_json(const nlohmann::json& j);
};

struct AugmentResult {
  std::vector<HandPose> poses;
  Image image;
  AugmentRecord record;
};

/// Scales each wrist depth by lambda_s and the image by 1/lambda_s about the
/// principal point. Throws Errc::augment_range or Errc::behind_camera.
AugmentResult depth_scale_augment(std::span<const HandPose> poses, const Image& img, const CameraIntrinsics& k,
                                  double lambda_s, const AugmentRange& range = {});

/// Premultiplies wrist translation and rotation by R_z(phi) and rotates the
/// image by phi about the principal point. Throws Errc::augment_range for
/// phi outside (-pi, pi].
AugmentResult inplane_rotate_augment(std::span<const HandPose> poses, const Image& img, const CameraIntrinsics& k,
                                     double phi);

/// Camera-from-reference rigid transform.
struct FramePose {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  static FramePose of(const HandPose& pose);
  FramePose inverse() const;
  /// Frame whose re-expression equals re-expressing by `this` and then by
  /// `second`.
  FramePose then(const FramePose& second) const;
};

/// tau' = R^T (tau - t), R_global' = R^T R_global.
std::vector<HandPose> reexpress_in_frame(std::span<const HandPose> poses, const FramePose& ref);

/// Uniform over [start - round(horizon*fps) + 1, start] clipped to the
/// sequence. Throws Errc::invalid_input on an empty sequence and
/// Errc::windowing when start is outside it.
int sample_reference_frame(int window_start, double horizon_seconds, double fps, int sequence_length, Rng& rng);

}  // namespace hmt
