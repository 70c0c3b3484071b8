#include <doctest.h>

#include <numbers>
#include <random>

#include "edgedepth/geometry.hpp"
#include "edgedepth/synth.hpp"
#include "oracles.hpp"

using namespace edgedepth;

namespace {

constexpr double kPi = std::numbers::pi;

const Camerad kCam(100, 100, 50, 50);

}  // namespace

TEST_CASE("rotation_apply: identity and quarter turn") {
  const Eigen::Vector3d p{1, 2, 3};
  CHECK((rotation_apply(0.0, p) - p).norm() == 0.0);
  const Eigen::Vector3d q = rotation_apply(kPi / 2, Eigen::Vector3d{1, 0, 0});
  CHECK(std::abs(q.x()) < 1e-15);
  CHECK(q.y() == 0.0);
  CHECK(q.z() == doctest::Approx(-1).epsilon(1e-15));
}

TEST_CASE("rotation_apply matches a matrix multiply") {
  const double yaw = kPi / 6;
  const auto want = oracle::rotate(yaw, {1, 0.5, 2});
  const Eigen::Vector3d got = rotation_apply(yaw, Eigen::Vector3d{1, 0.5, 2});
  for (int k = 0; k < 3; ++k) CHECK(std::abs(got[k] - want[k]) < 1e-15);
  CHECK((yaw_rotation(yaw) * Eigen::Vector3d{1, 0.5, 2} - got).norm() < 1e-15);
}

TEST_CASE("project: principal point, unit offset, behind camera") {
  const Posed pose(0, {0, 0, 10});
  auto pr = project(kCam, pose, Eigen::Vector3d{0, 0, 0});
  CHECK(pr.pixel.u() == 50);
  CHECK(pr.pixel.v() == 50);
  CHECK(pr.depth == 10);

  pr = project(kCam, pose, Eigen::Vector3d{1, 0, 0});
  CHECK(pr.pixel.u() == doctest::Approx(60).epsilon(1e-15));
  CHECK(pr.pixel.v() == 50);
  CHECK(pr.depth == 10);

  const Posed behind(0, {0, 0, -1});
  try {
    project(kCam, behind, Eigen::Vector3d{0, 0, 0});
    FAIL("expected PointBehindCamera");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::PointBehindCamera);
  }
}

TEST_CASE("project agrees with a homogeneous-coordinate oracle") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 200; ++trial) {
    const double yaw = kPi * u(rng);
    const std::array<double, 3> t{10 * u(rng), 1 + u(rng), 30 + 20 * u(rng)};
    const std::array<double, 3> p{2 * u(rng), u(rng), 2 * u(rng)};
    const auto want = oracle::project(721.5, 700, 609.6, 172.9, yaw, t, p);
    const auto got = project(Camerad(721.5, 700, 609.6, 172.9), Posed(yaw, {t[0], t[1], t[2]}),
                             Eigen::Vector3d{p[0], p[1], p[2]});
    CHECK(std::abs(got.pixel.u() - want.u) < 1e-9);
    CHECK(std::abs(got.pixel.v() - want.v) < 1e-9);
    CHECK(std::abs(got.depth - want.depth) < 1e-12);
    // Depth is exactly the rotated z offset plus z_c.
    const Eigen::Vector3d rp = rotation_apply(yaw, Eigen::Vector3d{p[0], p[1], p[2]});
    CHECK(got.depth == rp.z() + t[2]);
  }
}

TEST_CASE("project is invariant under a full turn of yaw") {
  const Eigen::Vector3d p{1.2, -0.4, 0.7};
  for (const double yaw : {-3.0, -0.5, 0.0, 1.0, 3.1}) {
    const auto a = project(kCam, Posed(yaw, {1, 1, 12}), p);
    const auto b = project(kCam, Posed(yaw + 2 * kPi, {1, 1, 12}), p);
    CHECK(std::abs(a.pixel.u() - b.pixel.u()) < 1e-9);
    CHECK(std::abs(a.pixel.v() - b.pixel.v()) < 1e-9);
    CHECK(std::abs(a.depth - b.depth) < 1e-12);
  }
}

TEST_CASE("normalize and denormalize") {
  auto n = normalize(kCam, Pixeld{{50, 50}});
  CHECK(n.u() == 0);
  CHECK(n.v() == 0);
  n = normalize(kCam, Pixeld{{150, 50}});
  CHECK(n.u() == 1);
  CHECK(n.v() == 0);

  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-2000, 2000);
  const Camerad cam = Camerad::kitti();
  for (int k = 0; k < 1000; ++k) {
    const Pixeld px{{u(rng), u(rng)}};
    const Pixeld back = denormalize(cam, normalize(cam, px));
    CHECK((back.uv - px.uv).norm() < 1e-12 * (1 + px.uv.norm()));
  }
}

TEST_CASE("yaw wraps into [-pi, pi)") {
  CHECK(Posed(kPi, {0, 0, 1}).yaw() == doctest::Approx(-kPi));
  CHECK(Posed(3 * kPi / 2, {0, 0, 1}).yaw() == doctest::Approx(-kPi / 2));
  CHECK(Posed(-kPi, {0, 0, 1}).yaw() == -kPi);
  for (double a = -20; a < 20; a += 0.37) {
    const double w = wrap_angle(a);
    CHECK(w >= -kPi);
    CHECK(w < kPi);
    CHECK(std::abs(std::remainder(a - w, 2 * kPi)) < 1e-12);
  }
}

TEST_CASE("camera rejects non-positive focal lengths") {
  CHECK_THROWS_AS(Camerad(0, 1, 0, 0), Error);
  CHECK_THROWS_AS(Camerad(1, -1, 0, 0), Error);
  CHECK_THROWS_AS(Camerad(1, 1, std::nan(""), 0), Error);
}

TEST_CASE("noiseless instances satisfy the projection residual invariant") {
  SceneConfig scene;
  scene.noise = NoiseModel::none();
  for (const auto& inst : generate_instances(scene, 200, 5)) {
    for (Index k = 0; k < inst.size(); ++k) {
      const auto r = oracle::projection_residual(inst, k, false);
      CHECK(std::abs(r[0]) < 1e-10);
      CHECK(std::abs(r[1]) < 1e-10);
    }
  }
}
