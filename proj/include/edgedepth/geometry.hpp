#pragma once

#include <cmath>
#include <numbers>

#include "edgedepth/common.hpp"

namespace edgedepth {

/// Wraps an angle into [-pi, pi).
template <typename Scalar>
Scalar wrap_angle(Scalar angle) {
  constexpr Scalar pi = std::numbers::pi_v<Scalar>;
  if (angle >= -pi && angle < pi) return angle;
  Scalar wrapped = std::fmod(angle + pi, 2 * pi);
  if (wrapped < 0) wrapped += 2 * pi;
  wrapped -= pi;
  // fmod can land exactly on +pi after the shift for inputs just below -pi.
  if (wrapped >= pi) wrapped -= 2 * pi;
  return wrapped;
}

/// Pinhole intrinsics. Lens distortion is not modelled.
template <typename Scalar>
struct Camera {
  Scalar fx{1};
  Scalar fy{1};
  Scalar cx{0};
  Scalar cy{0};

  Camera() = default;
  Camera(Scalar fx_, Scalar fy_, Scalar cx_, Scalar cy_)
      : fx(fx_), fy(fy_), cx(cx_), cy(cy_) {
    require(std::isfinite(fx) && std::isfinite(fy) && std::isfinite(cx) &&
                std::isfinite(cy),
            ErrorKind::InvalidArgument, "camera intrinsics must be finite");
    require(fx > 0 && fy > 0, ErrorKind::InvalidArgument,
            "camera focal lengths must be positive");
  }

  /// KITTI-like intrinsics for a 1280x384 padded frame.
  static Camera kitti() { return Camera(721.5, 721.5, 609.6, 172.9); }

  Matrix3<Scalar> K() const {
    Matrix3<Scalar> k;
    k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    return k;
  }

  bool operator==(const Camera&) const = default;
};

/// Yaw-only object pose: rotation about the camera's vertical (y) axis plus a
/// translation taking object-frame points into the camera frame.
template <typename Scalar>
class Pose {
 public:
  Pose() : translation_(0, 0, 1) {}
  Pose(Scalar yaw, const Vector3<Scalar>& translation)
      : yaw_(wrap_angle(yaw)), translation_(translation) {
    require(std::isfinite(yaw) && translation.allFinite(),
            ErrorKind::InvalidArgument, "pose must be finite");
  }

  Scalar yaw() const { return yaw_; }
  const Vector3<Scalar>& translation() const { return translation_; }
  Scalar x() const { return translation_.x(); }
  Scalar y() const { return translation_.y(); }
  Scalar z() const { return translation_.z(); }

  bool operator==(const Pose&) const = default;

 private:
  Scalar yaw_{0};
  Vector3<Scalar> translation_;
};

/// Object-frame keypoint with its semantic index.
template <typename Scalar>
struct Keypoint3D {
  Vector3<Scalar> position = Vector3<Scalar>::Zero();
  int index = 0;

  bool operator==(const Keypoint3D&) const = default;
};

template <typename Scalar>
struct Pixel {
  Vector2<Scalar> uv = Vector2<Scalar>::Zero();

  Scalar u() const { return uv.x(); }
  Scalar v() const { return uv.y(); }
  bool operator==(const Pixel&) const = default;
};

/// Pixel shifted by the principal point and divided by the focal length.
template <typename Scalar>
struct NormalizedPixel {
  Vector2<Scalar> uv = Vector2<Scalar>::Zero();

  Scalar u() const { return uv.x(); }
  Scalar v() const { return uv.y(); }
  bool operator==(const NormalizedPixel&) const = default;
};

template <typename Scalar>
Matrix3<Scalar> yaw_rotation(Scalar yaw) {
  const Scalar c = std::cos(yaw);
  const Scalar s = std::sin(yaw);
  Matrix3<Scalar> r;
  r << c, 0, s, 0, 1, 0, -s, 0, c;
  return r;
}

/// Rotates an object-frame point by the yaw angle (camera-aligned offset).
template <typename Scalar>
Vector3<Scalar> rotation_apply(Scalar yaw, const Vector3<Scalar>& p) {
  const Scalar c = std::cos(yaw);
  const Scalar s = std::sin(yaw);
  return {p.x() * c + p.z() * s, p.y(), -p.x() * s + p.z() * c};
}

template <typename Scalar>
Vector3<Scalar> to_camera_frame(const Pose<Scalar>& pose, const Vector3<Scalar>& p) {
  return pose.translation() + rotation_apply(pose.yaw(), p);
}

template <typename Scalar>
struct Projection {
  Pixel<Scalar> pixel;
  Scalar depth{0};
};

/// Projects an object-frame point. Throws PointBehindCamera when the point's
/// camera-frame depth is not positive.
template <typename Scalar>
Projection<Scalar> project(const Camera<Scalar>& cam, const Pose<Scalar>& pose,
                           const Vector3<Scalar>& p) {
  const Vector3<Scalar> pc = to_camera_frame(pose, p);
  const Scalar s = pc.z();
  if (!(s > 0)) {
    throw Error(ErrorKind::PointBehindCamera,
                "point depth " + std::to_string(s) + " is not in front of the camera");
  }
  Projection<Scalar> out;
  out.pixel.uv = {cam.fx * pc.x() / s + cam.cx, cam.fy * pc.y() / s + cam.cy};
  out.depth = s;
  return out;
}

template <typename Scalar>
Projection<Scalar> project(const Camera<Scalar>& cam, const Pose<Scalar>& pose,
                           const Keypoint3D<Scalar>& kp) {
  return project(cam, pose, kp.position);
}

template <typename Scalar>
NormalizedPixel<Scalar> normalize(const Camera<Scalar>& cam, const Pixel<Scalar>& px) {
  return {{(px.u() - cam.cx) / cam.fx, (px.v() - cam.cy) / cam.fy}};
}

template <typename Scalar>
Pixel<Scalar> denormalize(const Camera<Scalar>& cam, const NormalizedPixel<Scalar>& npx) {
  return {{npx.u() * cam.fx + cam.cx, npx.v() * cam.fy + cam.cy}};
}

using Camerad = Camera<double>;
using Posed = Pose<double>;
using Keypoint3Dd = Keypoint3D<double>;
using Pixeld = Pixel<double>;
using NormalizedPixeld = NormalizedPixel<double>;

}  // namespace edgedepth
