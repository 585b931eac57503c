#include "hmt/alignment.hpp"

#include "hmt/error.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace hmt {

void CameraIntrinsics::validate() const {
  if (!(fx > 0.0 && fy > 0.0) || !std::isfinite(fx) || !std::isfinite(fy) || !std::isfinite(cx) ||
      !std::isfinite(cy)) {
    fail(Errc::invalid_input, "intrinsics: focal lengths must be positive and finite");
  }
  if (width <= 0 || height <= 0) fail(Errc::invalid_input, "intrinsics: width and height must be positive");
}

nlohmann::json CameraIntrinsics::to_json() const {
  return {{"fx", fx}, {"fy", fy}, {"cx", cx}, {"cy", cy}, {"width", width}, {"height", height}};
}

CameraIntrinsics CameraIntrinsics::from_json(const nlohmann::json& j) {
  CameraIntrinsics k;
  try {
    k.fx = j.at("fx").get<double>();
    k.fy = j.at("fy").get<double>();
    k.cx = j.at("cx").get<double>();
    k.cy = j.at("cy").get<double>();
    k.width = j.at("width").get<int>();
    k.height = j.at("height").get<int>();
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::invalid_input, std::string("intrinsics: ") + e.what());
  }
  k.validate();
  return k;
}

CameraIntrinsics CameraIntrinsics::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::io, "cannot open intrinsics file " + path);
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::invalid_input, path + ": " + e.what());
  }
}

AffineMap AffineMap::after(const AffineMap& first) const {
  return {sx * first.sx, sy * first.sy, sx * first.dx + dx, sy * first.dy + dy};
}

AffineMap weak_perspective_map(const CameraIntrinsics& src, const CameraIntrinsics& dst) {
  src.validate();
  dst.validate();
  const double sx = dst.fx / src.fx;
  const double sy = dst.fy / src.fy;
  return {sx, sy, dst.cx - sx * src.cx, dst.cy - sy * src.cy};
}

namespace {

/// Bilinear sample at a fractional source position; taps outside the image
/// read as black.
double sample(const Image& img, double u, double v, int c) {
  const double fu = std::floor(u);
  const double fv = std::floor(v);
  const double au = u - fu;
  const double av = v - fv;
  const int u0 = static_cast<int>(fu);
  const int v0 = static_cast<int>(fv);
  double acc = 0.0;
  for (int dv = 0; dv < 2; ++dv) {
    for (int du = 0; du < 2; ++du) {
      const double w = (du ? au : 1.0 - au) * (dv ? av : 1.0 - av);
      if (w == 0.0) continue;
      const int uu = u0 + du;
      const int vv = v0 + dv;
      if (uu < 0 || vv < 0 || uu >= img.width || vv >= img.height) continue;
      acc += w * img.at(uu, vv, c);
    }
  }
  return acc;
}

/// Output pixel (u, v) takes the source at inverse(u, v).
template <typename Inverse>
Image warp(const Image& img, int width, int height, Inverse inverse) {
  Image out(width, height, img.channels);
  out.source_id = img.source_id;
  const double far = 2.0 * std::max(img.width, img.height) + 2.0;
  for (int v = 0; v < height; ++v) {
    for (int u = 0; u < width; ++u) {
      const Eigen::Vector2d s = inverse(u, v);
      if (!(std::abs(s.x()) < far + img.width && std::abs(s.y()) < far + img.height)) continue;
      for (int c = 0; c < img.channels; ++c) {
        out.at(u, v, c) = static_cast<std::uint8_t>(std::lround(std::clamp(sample(img, s.x(), s.y(), c), 0.0, 255.0)));
      }
    }
  }
  return out;
}

void check_in_front(std::span<const HandPose> poses) {
  for (std::size_t t = 0; t < poses.size(); ++t) {
    if (!(poses[t].tau.z() > 0.0)) {
      fail(Errc::behind_camera, "frame " + std::to_string(t) + ": wrist depth must be positive");
    }
  }
}

}  // namespace

Image remap_image(const Image& img, const AffineMap& map, const CameraIntrinsics& target) {
  target.validate();
  if (!(map.sx > 0.0 && map.sy > 0.0)) fail(Errc::invalid_input, "remap_image: scales must be positive");
  return warp(img, target.width, target.height, [&](int u, int v) {
    return Eigen::Vector2d((u - map.dx) / map.sx, (v - map.dy) / map.sy);
  });
}

CameraIntrinsics normalize_fov(const CameraIntrinsics& src) {
  src.validate();
  CameraIntrinsics out = src;
  out.fx = src.width / 2.0;
  out.fy = src.fy * (out.fx / src.fx);
  out.cx = src.width / 2.0;
  out.cy = src.height / 2.0;
  return out;
}

double horizontal_fov(const CameraIntrinsics& k) { return 2.0 * std::atan(k.width / (2.0 * k.fx)); }

Eigen::Vector2d project_point(const CameraIntrinsics& k, const Vec3& p) {
  if (!(p.z() > 0.0)) {
    std::ostringstream os;
    os << "point (" << p.x() << ", " << p.y() << ", " << p.z() << ") is not in front of the camera";
    fail(Errc::behind_camera, os.str());
  }
  return {k.fx * p.x() / p.z() + k.cx, k.fy * p.y() / p.z() + k.cy};
}

nlohmann::json AugmentRecord::to_json() const {
  nlohmann::json j;
  j["kind"] = kind == AugmentKind::depth_scale ? "depth_scale" : "inplane_rotation";
  if (kind == AugmentKind::depth_scale) {
    j["lambda_s"] = lambda_s;
  } else {
    j["phi"] = phi;
  }
  j["source_id"] = source_id;
  return j;
}

AugmentRecord AugmentRecord::from_json(const nlohmann::json& j) {
  AugmentRecord r;
  try {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "depth_scale") {
      r.kind = AugmentKind::depth_scale;
      r.lambda_s = j.at("lambda_s").get<double>();
    } else if (kind == "inplane_rotation") {
      r.kind = AugmentKind::inplane_rotation;
      r.phi = j.at("phi").get<double>();
    } else {
      fail(Errc::invalid_input, "augment record: unknown kind '" + kind + "'");
    }
    r.source_id = j.value("source_id", "");
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::invalid_input, std::string("augment record: ") + e.what());
  }
  return r;
}

AugmentResult depth_scale_augment(std::span<const HandPose> poses, const Image& img, const CameraIntrinsics& k,
                                  double lambda_s, const AugmentRange& range) {
  k.validate();
  if (!(lambda_s >= range.lambda_min && lambda_s <= range.lambda_max)) {
    std::ostringstream os;
    os << "depth scale " << lambda_s << " outside [" << range.lambda_min << ", " << range.lambda_max << "]";
    fail(Errc::augment_range, os.str());
  }
  check_in_front(poses);
  AugmentResult out;
  out.poses.assign(poses.begin(), poses.end());
  for (auto& p : out.poses) p.tau.z() *= lambda_s;
  if (lambda_s == 1.0) {
    out.image = img;
  } else {
    out.image = warp(img, img.width, img.height, [&](int u, int v) {
      return Eigen::Vector2d(k.cx + lambda_s * (u - k.cx), k.cy + lambda_s * (v - k.cy));
    });
  }
  out.record = {AugmentKind::depth_scale, lambda_s, 0.0, img.source_id};
  return out;
}

AugmentResult inplane_rotate_augment(std::span<const HandPose> poses, const Image& img, const CameraIntrinsics& k,
                                     double phi) {
  k.validate();
  if (!(phi > -std::numbers::pi && phi <= std::numbers::pi)) {
    fail(Errc::augment_range, "rotation angle " + std::to_string(phi) + " outside (-pi, pi]");
  }
  const Mat3 rz = rotation_z(phi);
  AugmentResult out;
  out.poses.assign(poses.begin(), poses.end());
  for (auto& p : out.poses) {
    p.tau = rz * p.tau;
    p.r_rot = matrix_to_axis_angle(rz * axis_angle_to_matrix(p.r_rot));
  }
  if (phi == 0.0) {
    out.image = img;
  } else {
    // Pixel offsets from the principal point rotate with the camera x/y axes.
    const double c = std::cos(phi);
    const double s = std::sin(phi);
    out.image = warp(img, img.width, img.height, [&](int u, int v) {
      const double x = u - k.cx;
      const double y = v - k.cy;
      return Eigen::Vector2d(k.cx + c * x + s * y, k.cy - s * x + c * y);
    });
  }
  out.record = {AugmentKind::inplane_rotation, 1.0, phi, img.source_id};
  return out;
}

FramePose FramePose::of(const HandPose& pose) { return {axis_angle_to_matrix(pose.r_rot), pose.tau}; }

FramePose FramePose::inverse() const { return {R.transpose(), -(R.transpose() * t)}; }

FramePose FramePose::then(const FramePose& second) const { return {R * second.R, t + R * second.t}; }

std::vector<HandPose> reexpress_in_frame(std::span<const HandPose> poses, const FramePose& ref) {
  if (!ref.t.allFinite() || orthonormality_error(ref.R) > 1e-6 || ref.R.determinant() < 0.0) {
    fail(Errc::invalid_rotation, "reference frame is not a rigid transform");
  }
  std::vector<HandPose> out(poses.begin(), poses.end());
  const Mat3 rt = ref.R.transpose();
  for (auto& p : out) {
    p.tau = rt * (p.tau - ref.t);
    p.r_rot = matrix_to_axis_angle(rt * axis_angle_to_matrix(p.r_rot));
  }
  return out;
}

int sample_reference_frame(int window_start, double horizon_seconds, double fps, int sequence_length, Rng& rng) {
  if (sequence_length <= 0) fail(Errc::invalid_input, "sample_reference_frame: empty sequence");
  if (window_start < 0 || window_start >= sequence_length) {
    fail(Errc::windowing, "window start " + std::to_string(window_start) + " outside a sequence of " +
                              std::to_string(sequence_length) + " frames");
  }
  if (!(horizon_seconds >= 0.0) || !(fps > 0.0)) fail(Errc::invalid_input, "horizon must be >= 0 and fps > 0");
  const long span = std::max(1L, std::lround(horizon_seconds * fps));
  const long lo = std::max(0L, static_cast<long>(window_start) - span + 1);
  return static_cast<int>(lo + static_cast<long>(rng.below(static_cast<std::uint64_t>(window_start - lo + 1))));
}

}  // namespace hmt
