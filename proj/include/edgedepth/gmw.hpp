#pragma once

// Graph-matching weighting of depth candidates. Both the 2D and the 3D
// keypoint sets are turned into complete graphs with one edge per keypoint
// pair (canonical i<j order, shared by both graphs). Each edge gets a learned
// unit-norm feature; the m x m cost matrix holds 2D-to-3D feature distances.
// Sinkhorn turns it into a soft assignment supervised towards the identity,
// and the diagonal (same-pair) costs become fusion weights.

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "edgedepth/dgde.hpp"
#include "edgedepth/instance.hpp"
#include "edgedepth/sinkhorn.hpp"
#include "edgedepth/tinynn.hpp"

namespace edgedepth {

struct EdgeGraph {
  Index vertex_dim = 0;
  std::vector<std::pair<int, int>> edges;  // semantic indices, canonical order
  nn::Matrix features;                     // m x (2 * vertex_dim), [p_i, p_j]

  Index edge_count() const { return static_cast<Index>(edges.size()); }
};

/// 2D graph over normalized pixels and 3D graph over object-frame points.
std::pair<EdgeGraph, EdgeGraph> build_graphs(const Instance& inst);

/// M_st = || a_s - b_t ||. Off-diagonal entries use the Gram expansion; the
/// diagonal is evaluated directly so identical rows give exactly zero.
template <typename DerivedA, typename DerivedB>
MatrixX<typename DerivedA::Scalar> cost_matrix(const Eigen::MatrixBase<DerivedA>& a,
                                               const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorKind::ShapeMismatch,
          "cost matrix inputs must have equal shapes");
  const VectorX<Scalar> na = a.rowwise().squaredNorm();
  const VectorX<Scalar> nb = b.rowwise().squaredNorm();
  MatrixX<Scalar> m = Scalar(-2) * (a * b.transpose());
  m.colwise() += na;
  m.rowwise() += nb.transpose();
  m.array() = m.array().max(Scalar(0)).sqrt();
  m.diagonal() = (a - b).rowwise().norm();
  return m;
}

/// Diagonal of cost_matrix(a, b) without forming the full matrix.
template <typename DerivedA, typename DerivedB>
VectorX<typename DerivedA::Scalar> cost_diagonal(const Eigen::MatrixBase<DerivedA>& a,
                                                 const Eigen::MatrixBase<DerivedB>& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorKind::ShapeMismatch,
          "cost matrix inputs must have equal shapes");
  return (a - b).rowwise().norm();
}

/// Gradients of cost_matrix. Entries with zero distance get a zero subgradient.
std::pair<nn::Matrix, nn::Matrix> cost_matrix_backward(const nn::Matrix& a, const nn::Matrix& b,
                                                       const nn::Matrix& cost,
                                                       const nn::Matrix& d_cost);

enum class WeightRule {
  InverseDiagCost,  // softmax(1 / diag(M))
  AssignmentDiag,   // diag(P), renormalized over the selected candidates
};

struct WeightConfig {
  WeightRule rule = WeightRule::InverseDiagCost;
  double eps = 1e-6;
  double temperature = 1.0;
};

/// w = softmax((1 / (d + eps)) / temperature).
nn::Vector weights_from_cost(const nn::Vector& diag, double eps, double temperature);
/// Gradient of weights_from_cost with respect to the diagonal.
nn::Vector weights_from_cost_backward(const nn::Vector& diag, const nn::Vector& w,
                                      const nn::Vector& dw, double eps, double temperature);

struct MatchingLosses {
  double classification = 0;  // summed element-wise BCE against the identity
  double regression = 0;      // |z_fused - z_star|
  double total = 0;           // classification + beta * regression
};

MatchingLosses matching_losses(const nn::Matrix& p, double z_fused, double z_star, double beta,
                               double clamp_eps = 1e-7);
/// d(classification)/dP with clamping; zero where P lies outside the clamp.
nn::Matrix classification_loss_grad(const nn::Matrix& p, double clamp_eps = 1e-7);

/// Everything a weighting model needs from one instance, precomputed.
struct EdgeSample {
  nn::Matrix features2d;  // m x 4
  nn::Matrix features3d;  // m x 6
  std::vector<DepthCandidated> candidates;  // m, canonical order
  std::vector<Index> selected;              // surviving candidate positions; may be empty
  double depth_star = 0;

  Index edge_count() const { return features2d.rows(); }
  std::vector<DepthCandidated> selected_candidates() const;
  nn::Vector selected_depths() const;
};

EdgeSample make_sample(const Instance& inst, const SelectionConfig& selection);

struct GmwConfig {
  nn::EncoderConfig encoder2d{4, 6, 128, 128};
  nn::EncoderConfig encoder3d{6, 6, 128, 128};
  nn::NormConfig norm;
  SinkhornConfig sinkhorn;
  WeightConfig weights;
  double bce_eps = 1e-7;
};

struct BatchLoss {
  double classification = 0;  // mean over instances
  double regression = 0;      // mean over instances with selected candidates
  double total = 0;
  Index instances = 0;
  Index sinkhorn_iterations = 0;
  Index sinkhorn_unconverged = 0;
};

/// Two edge encoders plus the matching head.
class GmwModel {
 public:
  GmwModel() = default;
  GmwModel(const GmwConfig& cfg, std::uint64_t seed);
  GmwModel(const GmwModel&) = delete;
  GmwModel& operator=(const GmwModel&) = delete;
  GmwModel(GmwModel&&) = default;
  GmwModel& operator=(GmwModel&&) = default;

  const GmwConfig& config() const { return cfg_; }
  nn::ParamStore params();
  nn::Encoder& encoder2d() { return enc2d_; }
  nn::Encoder& encoder3d() { return enc3d_; }

  /// Unit-norm edge features for one instance.
  std::pair<nn::Matrix, nn::Matrix> features(const EdgeSample& sample, nn::Mode mode) const;

  /// Mean matching loss over a batch; beta weights the regression term. With
  /// `backward`, parameter gradients are accumulated (not zeroed first) and,
  /// in train mode, the normalization running statistics are updated.
  BatchLoss forward_backward(std::span<const EdgeSample* const> batch, nn::Mode mode,
                             double beta, bool backward);

  /// Fusion weights over sample.selected.
  nn::Vector weights(const EdgeSample& sample) const;
  double fused_depth(const EdgeSample& sample) const;

 private:
  GmwConfig cfg_;
  nn::Encoder enc2d_;
  nn::Encoder enc3d_;
};

}  // namespace edgedepth
