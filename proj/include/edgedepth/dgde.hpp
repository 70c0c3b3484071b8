#pragma once

// Closed-form per-edge depth candidates. Each keypoint i gives two linear
// constraints in the object translation (x_c, y_c, z_c):
//
//   u_i * z_c - l_i = x_c,     v_i * z_c - h_i = y_c
//
// (u, v normalized). Subtracting the constraints of two keypoints eliminates
// x_c (or y_c) and leaves one depth per edge.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "edgedepth/geometry.hpp"
#include "edgedepth/instance.hpp"

namespace edgedepth {

template <typename Scalar>
struct EdgeTerms {
  Scalar l{0};
  Scalar h{0};
};

enum class Axis { Horizontal, Vertical };

template <typename Scalar>
struct DepthCandidate {
  int i = 0;  // semantic indices, i < j
  int j = 0;
  Scalar depth = std::numeric_limits<Scalar>::quiet_NaN();
  Scalar denom{0};  // |du| or |dv| of the chosen closed form
  Axis axis = Axis::Horizontal;
  bool valid = false;
};

template <typename Scalar>
EdgeTerms<Scalar> edge_terms(Scalar yaw, const Vector3<Scalar>& p,
                             const NormalizedPixel<Scalar>& npx) {
  const Scalar c = std::cos(yaw);
  const Scalar s = std::sin(yaw);
  const Scalar back = p.x() * s - p.z() * c;  // minus the rotated depth offset
  return {p.x() * c + p.z() * s + npx.u() * back, p.y() + npx.v() * back};
}

/// Horizontal and vertical closed forms for one edge, before choosing.
template <typename Scalar>
struct EdgeDepthPair {
  Scalar horizontal;
  Scalar vertical;
  Scalar du;
  Scalar dv;
};

template <typename Scalar>
EdgeDepthPair<Scalar> edge_depth_both(const EdgeTerms<Scalar>& ti, const EdgeTerms<Scalar>& tj,
                                      const NormalizedPixel<Scalar>& ni,
                                      const NormalizedPixel<Scalar>& nj) {
  const Scalar du = ni.u() - nj.u();
  const Scalar dv = ni.v() - nj.v();
  return {(ti.l - tj.l) / du, (ti.h - tj.h) / dv, du, dv};
}

/// Depth from one keypoint pair, using whichever closed form has the larger
/// absolute denominator. Throws DegenerateEdge if both denominators vanish.
template <typename Scalar>
DepthCandidate<Scalar> edge_depth(const EdgeTerms<Scalar>& ti, const EdgeTerms<Scalar>& tj,
                                  const NormalizedPixel<Scalar>& ni,
                                  const NormalizedPixel<Scalar>& nj) {
  const Scalar du = ni.u() - nj.u();
  const Scalar dv = ni.v() - nj.v();
  const Scalar adu = std::abs(du);
  const Scalar adv = std::abs(dv);
  if (adu == 0 && adv == 0) {
    throw Error(ErrorKind::DegenerateEdge, "both edge denominators are zero");
  }
  DepthCandidate<Scalar> out;
  if (adu >= adv) {
    out.depth = (ti.l - tj.l) / du;
    out.denom = adu;
    out.axis = Axis::Horizontal;
  } else {
    out.depth = (ti.h - tj.h) / dv;
    out.denom = adv;
    out.axis = Axis::Vertical;
  }
  out.valid = std::isfinite(out.depth);
  return out;
}

/// Object-centre (x_c, y_c) implied by one keypoint at depth z.
template <typename Scalar>
Vector2<Scalar> recover_xy(Scalar z, const EdgeTerms<Scalar>& terms,
                           const NormalizedPixel<Scalar>& npx) {
  return {npx.u() * z - terms.l, npx.v() * z - terms.h};
}

/// Per-keypoint normalized pixels and edge terms in canonical order.
template <typename Scalar>
struct KeypointTerms {
  std::vector<int> index;
  std::vector<NormalizedPixel<Scalar>> npx;
  std::vector<EdgeTerms<Scalar>> terms;
};

template <typename Scalar>
KeypointTerms<Scalar> keypoint_terms(const ObjectInstance<Scalar>& inst) {
  inst.validate();
  KeypointTerms<Scalar> kt;
  for (const Index k : inst.canonical_order()) {
    const auto npx = normalize(inst.camera, inst.pixels[k]);
    kt.index.push_back(inst.keypoints[k].index);
    kt.npx.push_back(npx);
    kt.terms.push_back(edge_terms(inst.pose.yaw(), inst.keypoints[k].position, npx));
  }
  return kt;
}

/// All n(n-1)/2 edge depths in canonical (i<j) lexicographic order.
/// Degenerate edges stay in the list, flagged invalid with denom 0, so that
/// position s always names the same keypoint pair.
template <typename Scalar>
std::vector<DepthCandidate<Scalar>> generate_candidates(const ObjectInstance<Scalar>& inst) {
  require(inst.size() >= 2, ErrorKind::TooFewKeypoints,
          "depth candidates need at least two keypoints");
  const auto kt = keypoint_terms(inst);
  const auto n = kt.index.size();
  std::vector<DepthCandidate<Scalar>> out;
  out.reserve(pair_count(static_cast<Index>(n)));
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      DepthCandidate<Scalar> cand;
      try {
        cand = edge_depth(kt.terms[a], kt.terms[b], kt.npx[a], kt.npx[b]);
      } catch (const Error&) {
        cand = DepthCandidate<Scalar>{};
      }
      cand.i = kt.index[a];
      cand.j = kt.index[b];
      out.push_back(cand);
    }
  }
  return out;
}

struct SelectionConfig {
  double tau = 1e-3;      // minimum denominator, normalized-pixel units
  Index max_count = 1500;  // k
};

/// Positions (into `cands`) that survive the denominator mask, ranked by
/// denominator (largest first, ties by canonical order), truncated to k and
/// returned in canonical order. Throws NoValidCandidates if none survive.
template <typename Scalar>
std::vector<Index> select_indices(std::span<const DepthCandidate<Scalar>> cands, double tau,
                                  Index k) {
  require(tau >= 0, ErrorKind::InvalidArgument, "tau must be non-negative");
  require(k >= 1, ErrorKind::InvalidArgument, "k must be at least 1");
  std::vector<Index> keep;
  for (Index s = 0; s < static_cast<Index>(cands.size()); ++s) {
    const auto& c = cands[s];
    if (c.valid && std::isfinite(c.depth) && c.denom >= tau) keep.push_back(s);
  }
  if (keep.empty()) {
    throw Error(ErrorKind::NoValidCandidates, "every depth candidate was masked");
  }
  if (static_cast<Index>(keep.size()) > k) {
    std::stable_sort(keep.begin(), keep.end(),
                     [&](Index a, Index b) { return cands[a].denom > cands[b].denom; });
    keep.resize(k);
    std::sort(keep.begin(), keep.end());
  }
  return keep;
}

template <typename Scalar>
std::vector<DepthCandidate<Scalar>> mask_and_select(std::span<const DepthCandidate<Scalar>> cands,
                                                    double tau, Index k) {
  std::vector<DepthCandidate<Scalar>> out;
  for (const Index s : select_indices(cands, tau, k)) out.push_back(cands[s]);
  return out;
}

template <typename Scalar>
std::vector<DepthCandidate<Scalar>> mask_and_select(
    const std::vector<DepthCandidate<Scalar>>& cands, const SelectionConfig& cfg) {
  return mask_and_select(std::span<const DepthCandidate<Scalar>>(cands), cfg.tau,
                         cfg.max_count);
}

using DepthCandidated = DepthCandidate<double>;

}  // namespace edgedepth
