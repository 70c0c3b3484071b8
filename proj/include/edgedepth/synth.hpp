#pragma once

// Synthetic stand-in for a keypoint detector: object templates with semantic
// keypoints, random yaw/translation, pinhole projection and a corruption
// model on both the 2D and 3D keypoints.

#include <cstdint>
#include <string>
#include <vector>

#include "edgedepth/instance.hpp"

namespace edgedepth {

enum class TemplateKind { Box, CarLike };

const char* to_string(TemplateKind kind);
TemplateKind template_kind_from_string(const std::string& s);

/// Keypoints in the object frame (origin at the box centre, y pointing down,
/// x along the length, z along the width). Order: 8 box corners, top centre,
/// bottom centre, then surface samples.
struct ObjectTemplate {
  std::string name;
  Eigen::Vector3d dims{1.5, 1.6, 3.9};  // (h, w, l)
  std::vector<Keypoint3Dd> keypoints;

  Index size() const { return static_cast<Index>(keypoints.size()); }
  /// Same semantic layout stretched to other dimensions.
  ObjectTemplate scaled(const Eigen::Vector3d& new_dims) const;
};

inline constexpr Index kBoxKeypoints = 10;

ObjectTemplate make_template(TemplateKind kind, Index n_extra, const Eigen::Vector3d& dims,
                             std::uint64_t seed);

struct NoiseModel {
  double sigma_px = 1.0;     // pixel noise std
  double sigma_3d = 0.02;    // object-frame keypoint noise std, meters
  double p_outlier = 0.05;   // chance a pixel is replaced by a gross error
  double outlier_box = 50.0; // gross errors are uniform in +-box pixels

  static NoiseModel none() { return {0, 0, 0, 50}; }
  void validate() const;
};

struct PoseRanges {
  double z_min = 5;
  double z_max = 60;
  double x_min = -10;
  double x_max = 10;
  double y_min = 0.5;
  double y_max = 2.0;
  double dims_jitter = 0.1;  // per-axis relative size jitter
};

/// Throws UnprojectableInstance when 100 pose draws all put a keypoint
/// behind the camera.
Instance sample_instance(const ObjectTemplate& tmpl, const PoseRanges& ranges,
                         const Camerad& camera, const NoiseModel& noise, std::uint64_t seed);

struct SceneConfig {
  TemplateKind kind = TemplateKind::CarLike;
  Index keypoints = 16;
  Eigen::Vector3d dims{1.5, 1.6, 3.9};
  std::uint64_t template_seed = 7;
  PoseRanges poses;
  Camerad camera = Camerad::kitti();
  NoiseModel noise;

  ObjectTemplate make_template() const;
};

/// Instance k uses seed mix_seed(seed, k) and carries id k.
std::vector<Instance> generate_instances(const SceneConfig& cfg, Index count, std::uint64_t seed);

}  // namespace edgedepth
