#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "edgedepth/dgde.hpp"

namespace edgedepth {

/// Convex combination of candidate depths.
template <typename Scalar, typename Derived>
Scalar fuse_depth(std::span<const DepthCandidate<Scalar>> cands,
                  const Eigen::MatrixBase<Derived>& w) {
  require(static_cast<Index>(cands.size()) == w.size(), ErrorKind::ShapeMismatch,
          "candidate and weight counts differ");
  Scalar z{0};
  for (Index s = 0; s < w.size(); ++s) z += w[s] * cands[s].depth;
  return z;
}

template <typename Scalar, typename Derived>
Scalar fuse_depth(const std::vector<DepthCandidate<Scalar>>& cands,
                  const Eigen::MatrixBase<Derived>& w) {
  return fuse_depth(std::span<const DepthCandidate<Scalar>>(cands), w);
}

template <typename Scalar = double>
VectorX<Scalar> weight_uniform(Index count) {
  require(count >= 1, ErrorKind::InvalidArgument, "weight count must be at least 1");
  return VectorX<Scalar>::Constant(count, Scalar(1) / Scalar(count));
}

/// Inverse-sigma weights, w_s proportional to 1/sigma_s.
template <typename Derived>
VectorX<typename Derived::Scalar> weight_uncertainty(const Eigen::MatrixBase<Derived>& sigmas) {
  using Scalar = typename Derived::Scalar;
  require(sigmas.size() >= 1, ErrorKind::InvalidArgument, "no sigmas given");
  require((sigmas.array() > 0).all() && sigmas.allFinite(), ErrorKind::NonPositiveSigma,
          "sigmas must be positive and finite");
  VectorX<Scalar> inv = sigmas.cwiseInverse();
  return inv / inv.sum();
}

/// Heuristic baseline: weight proportional to the closed-form denominator,
/// i.e. inversely proportional to the depth's first-order noise gain.
template <typename Scalar>
VectorX<Scalar> weight_inverse_denominator(std::span<const DepthCandidate<Scalar>> cands) {
  require(!cands.empty(), ErrorKind::InvalidArgument, "no candidates given");
  VectorX<Scalar> w(static_cast<Index>(cands.size()));
  for (Index s = 0; s < w.size(); ++s) w[s] = cands[s].denom;
  const Scalar total = w.sum();
  require(total > 0, ErrorKind::InvalidArgument, "all denominators are zero");
  return w / total;
}

template <typename Derived>
typename Derived::Scalar weight_entropy(const Eigen::MatrixBase<Derived>& w) {
  using Scalar = typename Derived::Scalar;
  Scalar h{0};
  for (Index s = 0; s < w.size(); ++s) {
    if (w[s] > 0) h -= w[s] * std::log(w[s]);
  }
  return h;
}

template <typename Scalar>
struct LocationEstimate {
  Vector3<Scalar> position = Vector3<Scalar>::Zero();
  Index candidates_used = 0;
  Scalar weight_entropy{0};
};

/// Full 3D location given a fused depth: (x_c, y_c) recovered per keypoint
/// and averaged uniformly.
template <typename Scalar>
LocationEstimate<Scalar> estimate_location(const ObjectInstance<Scalar>& inst, Scalar z) {
  require(z > 0, ErrorKind::InvalidArgument, "fused depth must be positive");
  require(inst.size() >= 1, ErrorKind::TooFewKeypoints, "instance has no keypoints");
  const auto kt = keypoint_terms(inst);
  Vector2<Scalar> xy = Vector2<Scalar>::Zero();
  for (std::size_t k = 0; k < kt.terms.size(); ++k) xy += recover_xy(z, kt.terms[k], kt.npx[k]);
  xy /= static_cast<Scalar>(kt.terms.size());
  LocationEstimate<Scalar> out;
  out.position = {xy.x(), xy.y(), z};
  return out;
}

template <typename Scalar, typename Derived>
LocationEstimate<Scalar> estimate_location(const ObjectInstance<Scalar>& inst, Scalar z,
                                           const Eigen::MatrixBase<Derived>& w) {
  auto out = estimate_location(inst, z);
  out.candidates_used = w.size();
  out.weight_entropy = weight_entropy(w);
  return out;
}

}  // namespace edgedepth
