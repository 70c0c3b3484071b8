#include "edgedepth/synth.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace edgedepth {

const char* to_string(TemplateKind kind) {
  return kind == TemplateKind::Box ? "box" : "car_like";
}

TemplateKind template_kind_from_string(const std::string& s) {
  if (s == "box") return TemplateKind::Box;
  if (s == "car_like") return TemplateKind::CarLike;
  throw Error(ErrorKind::InvalidArgument, "unknown template kind '" + s + "'");
}

ObjectTemplate ObjectTemplate::scaled(const Eigen::Vector3d& new_dims) const {
  // dims are (h, w, l) while positions are (x ~ l, y ~ h, z ~ w).
  const Eigen::Vector3d factor{new_dims[2] / dims[2], new_dims[0] / dims[0],
                               new_dims[1] / dims[1]};
  ObjectTemplate out = *this;
  out.dims = new_dims;
  for (auto& kp : out.keypoints) kp.position = kp.position.cwiseProduct(factor);
  return out;
}

namespace {

// Axis-aligned rectangle in the object frame: `axis` is fixed at `level`,
// the other two coordinates span [lo, hi].
struct Face {
  int axis;
  double level;
  Eigen::Vector3d lo;
  Eigen::Vector3d hi;

  double area() const {
    double a = 1;
    for (int k = 0; k < 3; ++k) {
      if (k != axis) a *= hi[k] - lo[k];
    }
    return a;
  }
};

Face make_face(int axis, double level, Eigen::Vector3d lo, Eigen::Vector3d hi) {
  lo[axis] = level;
  hi[axis] = level;
  return {axis, level, lo, hi};
}

std::vector<Face> box_faces(double l, double h, double w) {
  const Eigen::Vector3d lo{-l / 2, -h / 2, -w / 2};
  const Eigen::Vector3d hi{l / 2, h / 2, w / 2};
  std::vector<Face> faces;
  for (int axis = 0; axis < 3; ++axis) {
    faces.push_back(make_face(axis, lo[axis], lo, hi));
    faces.push_back(make_face(axis, hi[axis], lo, hi));
  }
  return faces;
}

// Lower body over the full footprint plus a narrower cabin on top. The
// underside carries no keypoints.
std::vector<Face> car_faces(double l, double h, double w) {
  const double belt = -0.1 * h;  // y of the body/cabin boundary (y points down)
  std::vector<Face> faces;
  const Eigen::Vector3d body_lo{-l / 2, belt, -w / 2};
  const Eigen::Vector3d body_hi{l / 2, h / 2, w / 2};
  faces.push_back(make_face(0, -l / 2, body_lo, body_hi));
  faces.push_back(make_face(0, l / 2, body_lo, body_hi));
  faces.push_back(make_face(2, -w / 2, body_lo, body_hi));
  faces.push_back(make_face(2, w / 2, body_lo, body_hi));
  // Hood and trunk.
  faces.push_back(make_face(1, belt, {-l / 2, 0, -w / 2}, {-0.3 * l, 0, w / 2}));
  faces.push_back(make_face(1, belt, {0.3 * l, 0, -w / 2}, {l / 2, 0, w / 2}));
  const Eigen::Vector3d cab_lo{-0.3 * l, -h / 2, -0.45 * w};
  const Eigen::Vector3d cab_hi{0.3 * l, belt, 0.45 * w};
  faces.push_back(make_face(0, cab_lo[0], cab_lo, cab_hi));
  faces.push_back(make_face(0, cab_hi[0], cab_lo, cab_hi));
  faces.push_back(make_face(2, cab_lo[2], cab_lo, cab_hi));
  faces.push_back(make_face(2, cab_hi[2], cab_lo, cab_hi));
  faces.push_back(make_face(1, cab_lo[1], cab_lo, cab_hi));  // roof
  return faces;
}

}  // namespace

ObjectTemplate make_template(TemplateKind kind, Index n_extra, const Eigen::Vector3d& dims,
                             std::uint64_t seed) {
  require((dims.array() > 0).all() && dims.allFinite(), ErrorKind::InvalidArgument,
          "template dimensions must be positive");
  require(n_extra >= 0, ErrorKind::InvalidArgument, "n_extra must be non-negative");
  const double h = dims[0];
  const double w = dims[1];
  const double l = dims[2];

  ObjectTemplate t;
  t.name = to_string(kind);
  t.dims = dims;
  int index = 0;
  for (const double sx : {-1.0, 1.0}) {
    for (const double sy : {-1.0, 1.0}) {
      for (const double sz : {-1.0, 1.0}) {
        t.keypoints.push_back({{sx * l / 2, sy * h / 2, sz * w / 2}, index++});
      }
    }
  }
  t.keypoints.push_back({{0, -h / 2, 0}, index++});  // top centre
  t.keypoints.push_back({{0, h / 2, 0}, index++});   // bottom centre

  const auto faces = kind == TemplateKind::Box ? box_faces(l, h, w) : car_faces(l, h, w);
  std::vector<double> areas;
  for (const auto& f : faces) areas.push_back(f.area());
  std::mt19937_64 rng(seed);
  std::discrete_distribution<int> pick(areas.begin(), areas.end());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (Index k = 0; k < n_extra; ++k) {
    const Face& f = faces[pick(rng)];
    Eigen::Vector3d p;
    for (int a = 0; a < 3; ++a) p[a] = f.lo[a] + unit(rng) * (f.hi[a] - f.lo[a]);
    p[f.axis] = f.level;
    t.keypoints.push_back({p, index++});
  }
  return t;
}

void NoiseModel::validate() const {
  require(sigma_px >= 0 && sigma_3d >= 0 && outlier_box >= 0, ErrorKind::InvalidArgument,
          "noise magnitudes must be non-negative");
  require(p_outlier >= 0 && p_outlier <= 1, ErrorKind::InvalidArgument,
          "p_outlier must lie in [0, 1]");
}

Instance sample_instance(const ObjectTemplate& tmpl, const PoseRanges& ranges,
                         const Camerad& camera, const NoiseModel& noise, std::uint64_t seed) {
  noise.validate();
  require(ranges.z_min <= ranges.z_max && ranges.x_min <= ranges.x_max &&
              ranges.y_min <= ranges.y_max && ranges.dims_jitter >= 0 && ranges.dims_jitter < 1,
          ErrorKind::InvalidArgument, "invalid pose ranges");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  constexpr double pi = std::numbers::pi;

  Instance inst;
  inst.camera = camera;
  inst.template_name = tmpl.name;
  for (int attempt = 0;; ++attempt) {
    if (attempt == 100) {
      throw Error(ErrorKind::UnprojectableInstance,
                  "no pose in range keeps every keypoint in front of the camera");
    }
    Eigen::Vector3d dims = tmpl.dims;
    for (int a = 0; a < 3; ++a) {
      dims[a] *= uniform(1 - ranges.dims_jitter, 1 + ranges.dims_jitter);
    }
    const double yaw = uniform(-pi, pi);
    const double z = uniform(ranges.z_min, ranges.z_max);
    const double x = uniform(ranges.x_min, ranges.x_max);
    const double y = uniform(ranges.y_min, ranges.y_max);
    const ObjectTemplate shaped = tmpl.scaled(dims);
    const Posed pose(yaw, {x, y, z});
    std::vector<Pixeld> pixels;
    try {
      for (const auto& kp : shaped.keypoints) pixels.push_back(project(camera, pose, kp).pixel);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::PointBehindCamera) throw;
      continue;
    }
    inst.dims = dims;
    inst.pose = pose;
    inst.keypoints_clean = shaped.keypoints;
    inst.pixels_clean = std::move(pixels);
    break;
  }

  inst.keypoints = inst.keypoints_clean;
  inst.pixels = inst.pixels_clean;
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t k = 0; k < inst.keypoints.size(); ++k) {
    for (int a = 0; a < 3; ++a) {
      const double e = gauss(rng);
      if (noise.sigma_3d > 0) inst.keypoints[k].position[a] += noise.sigma_3d * e;
    }
    const double eu = gauss(rng);
    const double ev = gauss(rng);
    if (noise.sigma_px > 0) inst.pixels[k].uv += noise.sigma_px * Eigen::Vector2d(eu, ev);
    const double coin = unit(rng);
    const double ou = uniform(-noise.outlier_box, noise.outlier_box);
    const double ov = uniform(-noise.outlier_box, noise.outlier_box);
    if (coin < noise.p_outlier) inst.pixels[k].uv = inst.pixels_clean[k].uv + Eigen::Vector2d(ou, ov);
  }
  return inst;
}

ObjectTemplate SceneConfig::make_template() const {
  require(keypoints >= kBoxKeypoints, ErrorKind::InvalidArgument,
          "templates have at least 10 keypoints");
  return edgedepth::make_template(kind, keypoints - kBoxKeypoints, dims, template_seed);
}

std::vector<Instance> generate_instances(const SceneConfig& cfg, Index count, std::uint64_t seed) {
  require(count >= 0, ErrorKind::InvalidArgument, "instance count must be non-negative");
  const ObjectTemplate tmpl = cfg.make_template();
  std::vector<Instance> out;
  out.reserve(count);
  for (Index k = 0; k < count; ++k) {
    Instance inst = sample_instance(tmpl, cfg.poses, cfg.camera, cfg.noise,
                                    mix_seed(seed, static_cast<std::uint64_t>(k)));
    inst.id = static_cast<std::uint64_t>(k);
    out.push_back(std::move(inst));
  }
  return out;
}

}  // namespace edgedepth
