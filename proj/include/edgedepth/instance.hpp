#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "edgedepth/geometry.hpp"

namespace edgedepth {

/// One object observation: paired 2D/3D keypoints under a known yaw. The
/// `keypoints`/`pixels` pair is what an estimator sees; the `_clean` copies
/// are the noiseless ground truth. All four vectors are position-aligned.
/// The ground-truth depth is pose.z() and the ground-truth edge assignment
/// is the identity.
template <typename Scalar>
struct ObjectInstance {
  std::uint64_t id = 0;
  std::string template_name;
  Vector3<Scalar> dims = Vector3<Scalar>::Ones();  // (h, w, l)
  Camera<Scalar> camera;
  Pose<Scalar> pose;
  std::vector<Keypoint3D<Scalar>> keypoints;
  std::vector<Keypoint3D<Scalar>> keypoints_clean;
  std::vector<Pixel<Scalar>> pixels;
  std::vector<Pixel<Scalar>> pixels_clean;

  Index size() const { return static_cast<Index>(keypoints.size()); }
  Scalar depth_star() const { return pose.z(); }

  /// Storage positions sorted by semantic keypoint index.
  std::vector<Index> canonical_order() const {
    std::vector<Index> order(keypoints.size());
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
      return keypoints[a].index < keypoints[b].index;
    });
    return order;
  }

  void validate() const {
    const auto n = keypoints.size();
    require(pixels.size() == n, ErrorKind::ShapeMismatch,
            "keypoint and pixel counts differ");
    require(keypoints_clean.empty() || keypoints_clean.size() == n,
            ErrorKind::ShapeMismatch, "clean keypoint count differs");
    require(pixels_clean.empty() || pixels_clean.size() == n,
            ErrorKind::ShapeMismatch, "clean pixel count differs");
    const auto order = canonical_order();
    for (std::size_t k = 1; k < order.size(); ++k) {
      require(keypoints[order[k - 1]].index != keypoints[order[k]].index,
              ErrorKind::InvalidArgument, "duplicate semantic keypoint index");
    }
  }

  bool operator==(const ObjectInstance&) const = default;
};

using Instance = ObjectInstance<double>;

}  // namespace edgedepth
