#include "edgedepth/gmw.hpp"

#include <cmath>

namespace edgedepth {

std::pair<EdgeGraph, EdgeGraph> build_graphs(const Instance& inst) {
  require(inst.size() >= 2, ErrorKind::TooFewKeypoints, "edge graphs need at least two keypoints");
  inst.validate();
  const auto order = inst.canonical_order();
  const Index n = static_cast<Index>(order.size());
  const Index m = pair_count(n);

  EdgeGraph g2;
  EdgeGraph g3;
  g2.vertex_dim = 2;
  g3.vertex_dim = 3;
  g2.features.resize(m, 4);
  g3.features.resize(m, 6);
  Index s = 0;
  for (Index a = 0; a < n; ++a) {
    const Index pa = order[a];
    const auto na = normalize(inst.camera, inst.pixels[pa]);
    for (Index b = a + 1; b < n; ++b) {
      const Index pb = order[b];
      const auto nb = normalize(inst.camera, inst.pixels[pb]);
      const std::pair<int, int> edge{inst.keypoints[pa].index, inst.keypoints[pb].index};
      g2.edges.push_back(edge);
      g3.edges.push_back(edge);
      g2.features.row(s) << na.u(), na.v(), nb.u(), nb.v();
      g3.features.row(s) << inst.keypoints[pa].position.transpose(),
          inst.keypoints[pb].position.transpose();
      ++s;
    }
  }
  return {std::move(g2), std::move(g3)};
}

std::pair<nn::Matrix, nn::Matrix> cost_matrix_backward(const nn::Matrix& a, const nn::Matrix& b,
                                                       const nn::Matrix& cost,
                                                       const nn::Matrix& d_cost) {
  require(cost.rows() == a.rows() && cost.cols() == b.rows() && d_cost.rows() == cost.rows() &&
              d_cost.cols() == cost.cols(),
          ErrorKind::ShapeMismatch, "cost matrix backward: shape mismatch");
  const nn::Matrix w = (cost.array() > 1e-300).select(d_cost.array() / cost.array(), 0.0);
  nn::Matrix da = w.rowwise().sum().asDiagonal() * a;
  da.noalias() -= w * b;
  nn::Matrix db = w.colwise().sum().transpose().asDiagonal() * b;
  db.noalias() -= w.transpose() * a;
  return {std::move(da), std::move(db)};
}

nn::Vector weights_from_cost(const nn::Vector& diag, double eps, double temperature) {
  require(diag.size() >= 1, ErrorKind::InvalidArgument, "weights need at least one entry");
  require(temperature > 0, ErrorKind::InvalidArgument, "temperature must be positive");
  require((diag.array() >= 0).all(), ErrorKind::InvalidArgument, "costs must be non-negative");
  const nn::Vector logits = (diag.array() + eps).inverse() / temperature;
  const nn::Vector e = (logits.array() - logits.maxCoeff()).exp();
  return e / e.sum();
}

nn::Vector weights_from_cost_backward(const nn::Vector& diag, const nn::Vector& w,
                                      const nn::Vector& dw, double eps, double temperature) {
  const nn::Vector d_logits = w.array() * (dw.array() - w.dot(dw));
  return -d_logits.array() / ((diag.array() + eps).square() * temperature);
}

MatchingLosses matching_losses(const nn::Matrix& p, double z_fused, double z_star, double beta,
                               double clamp_eps) {
  require(p.rows() == p.cols(), ErrorKind::ShapeMismatch, "assignment matrix must be square");
  MatchingLosses out;
  const nn::Matrix c = p.cwiseMax(clamp_eps).cwiseMin(1 - clamp_eps);
  double sum = 0;
  for (Index t = 0; t < c.cols(); ++t) {
    for (Index s = 0; s < c.rows(); ++s) {
      sum -= (s == t) ? std::log(c(s, t)) : std::log1p(-c(s, t));
    }
  }
  out.classification = sum;
  out.regression = std::abs(z_fused - z_star);
  out.total = out.classification + beta * out.regression;
  return out;
}

nn::Matrix classification_loss_grad(const nn::Matrix& p, double clamp_eps) {
  nn::Matrix g(p.rows(), p.cols());
  for (Index t = 0; t < p.cols(); ++t) {
    for (Index s = 0; s < p.rows(); ++s) {
      const double v = p(s, t);
      if (v < clamp_eps || v > 1 - clamp_eps) {
        g(s, t) = 0;
      } else {
        g(s, t) = (s == t) ? -1 / v : 1 / (1 - v);
      }
    }
  }
  return g;
}

std::vector<DepthCandidated> EdgeSample::selected_candidates() const {
  std::vector<DepthCandidated> out;
  out.reserve(selected.size());
  for (const Index s : selected) out.push_back(candidates[s]);
  return out;
}

nn::Vector EdgeSample::selected_depths() const {
  nn::Vector z(static_cast<Index>(selected.size()));
  for (Index k = 0; k < z.size(); ++k) z[k] = candidates[selected[k]].depth;
  return z;
}

EdgeSample make_sample(const Instance& inst, const SelectionConfig& selection) {
  EdgeSample out;
  auto [g2, g3] = build_graphs(inst);
  out.features2d = std::move(g2.features);
  out.features3d = std::move(g3.features);
  out.candidates = generate_candidates(inst);
  try {
    out.selected = select_indices(std::span<const DepthCandidated>(out.candidates), selection.tau,
                                  selection.max_count);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::NoValidCandidates) throw;
  }
  out.depth_star = inst.depth_star();
  return out;
}

GmwModel::GmwModel(const GmwConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  require(cfg.encoder2d.input_dim == 4 && cfg.encoder3d.input_dim == 6,
          ErrorKind::InvalidArgument, "edge encoders take 4 (2D) and 6 (3D) inputs");
  require(cfg.encoder2d.output_dim == cfg.encoder3d.output_dim, ErrorKind::InvalidArgument,
          "2D and 3D edge features must have the same width");
  std::mt19937_64 rng(seed);
  enc2d_ = nn::Encoder(cfg.encoder2d, rng, cfg.norm);
  enc3d_ = nn::Encoder(cfg.encoder3d, rng, cfg.norm);
}

nn::ParamStore GmwModel::params() {
  nn::ParamStore store;
  enc2d_.register_params(store, "enc2d");
  enc3d_.register_params(store, "enc3d");
  return store;
}

std::pair<nn::Matrix, nn::Matrix> GmwModel::features(const EdgeSample& sample,
                                                     nn::Mode mode) const {
  const auto seg = nn::single_segment(sample.edge_count());
  return {nn::l2_normalize_rows(enc2d_.forward(sample.features2d, seg, mode, nullptr)),
          nn::l2_normalize_rows(enc3d_.forward(sample.features3d, seg, mode, nullptr))};
}

namespace {

struct InstanceWeights {
  nn::Vector w;
  nn::Vector picked;  // diag costs or diag assignments over the selection
};

InstanceWeights compute_weights(const WeightConfig& cfg, const EdgeSample& sample,
                                const nn::Vector& diag_cost, const nn::Matrix* p) {
  InstanceWeights out;
  const auto k = static_cast<Index>(sample.selected.size());
  out.picked.resize(k);
  if (cfg.rule == WeightRule::InverseDiagCost) {
    for (Index i = 0; i < k; ++i) out.picked[i] = diag_cost[sample.selected[i]];
    out.w = weights_from_cost(out.picked, cfg.eps, cfg.temperature);
  } else {
    require(p != nullptr, ErrorKind::InvalidArgument, "assignment weights need P");
    for (Index i = 0; i < k; ++i) out.picked[i] = (*p)(sample.selected[i], sample.selected[i]);
    out.w = out.picked / out.picked.sum();
  }
  return out;
}

}  // namespace

BatchLoss GmwModel::forward_backward(std::span<const EdgeSample* const> batch, nn::Mode mode,
                                     double beta, bool backward) {
  require(!batch.empty(), ErrorKind::InvalidArgument, "empty batch");
  nn::Segments seg{0};
  for (const auto* s : batch) seg.push_back(seg.back() + s->edge_count());
  const Index rows = seg.back();
  nn::Matrix x2(rows, 4);
  nn::Matrix x3(rows, 6);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    x2.middleRows(seg[b], batch[b]->edge_count()) = batch[b]->features2d;
    x3.middleRows(seg[b], batch[b]->edge_count()) = batch[b]->features3d;
  }

  nn::Encoder::Cache c2;
  nn::Encoder::Cache c3;
  const nn::Matrix h2 = enc2d_.forward(x2, seg, mode, backward ? &c2 : nullptr);
  const nn::Matrix h3 = enc3d_.forward(x3, seg, mode, backward ? &c3 : nullptr);
  nn::Vector n2;
  nn::Vector n3;
  const nn::Matrix f2 = nn::l2_normalize_rows(h2, cfg_.norm.eps, &n2);
  const nn::Matrix f3 = nn::l2_normalize_rows(h3, cfg_.norm.eps, &n3);

  nn::Matrix df2;
  nn::Matrix df3;
  if (backward) {
    df2 = nn::Matrix::Zero(rows, f2.cols());
    df3 = nn::Matrix::Zero(rows, f3.cols());
  }

  const double inv_b = 1.0 / static_cast<double>(batch.size());
  const bool need_assignment_weights = cfg_.weights.rule == WeightRule::AssignmentDiag;
  SinkhornConfig sk_cfg = cfg_.sinkhorn;
  sk_cfg.keep_history = backward;
  BatchLoss out;
  out.instances = static_cast<Index>(batch.size());
  Index regression_count = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const EdgeSample& sample = *batch[b];
    const Index m = sample.edge_count();
    const nn::Matrix a = f2.middleRows(seg[b], m);
    const nn::Matrix c = f3.middleRows(seg[b], m);
    const nn::Matrix cost = cost_matrix(a, c);
    const auto sk = sinkhorn(cost, sk_cfg);
    out.sinkhorn_iterations += sk.iterations;
    if (!sk.converged) ++out.sinkhorn_unconverged;

    const bool has_selection = !sample.selected.empty();
    double z_fused = sample.depth_star;
    InstanceWeights iw;
    nn::Vector z_sel;
    if (has_selection) {
      z_sel = sample.selected_depths();
      iw = compute_weights(cfg_.weights, sample, cost.diagonal(), &sk.P);
      z_fused = iw.w.dot(z_sel);
      ++regression_count;
    }
    const auto losses = matching_losses(sk.P, z_fused, sample.depth_star, beta, cfg_.bce_eps);
    out.classification += losses.classification * inv_b;
    out.regression += losses.regression;
    out.total += losses.total * inv_b;

    if (!backward) continue;
    nn::Matrix d_p = classification_loss_grad(sk.P, cfg_.bce_eps) * inv_b;
    nn::Matrix d_cost_direct = nn::Matrix::Zero(m, m);
    if (has_selection && beta != 0) {
      const double diff = z_fused - sample.depth_star;
      const double dz = beta * inv_b * static_cast<double>((diff > 0) - (diff < 0));
      const nn::Vector dw = dz * z_sel;
      if (need_assignment_weights) {
        const double total = iw.picked.sum();
        const nn::Vector dpick = (dw.array() - iw.w.dot(dw)) / total;
        for (Index i = 0; i < dpick.size(); ++i) {
          d_p(sample.selected[i], sample.selected[i]) += dpick[i];
        }
      } else {
        const nn::Vector dd = weights_from_cost_backward(iw.picked, iw.w, dw, cfg_.weights.eps,
                                                         cfg_.weights.temperature);
        for (Index i = 0; i < dd.size(); ++i) {
          d_cost_direct(sample.selected[i], sample.selected[i]) += dd[i];
        }
      }
    }
    nn::Matrix d_cost = sinkhorn_backward(cost, sk, cfg_.sinkhorn, d_p);
    d_cost += d_cost_direct;
    auto [da, dc] = cost_matrix_backward(a, c, cost, d_cost);
    df2.middleRows(seg[b], m) = da;
    df3.middleRows(seg[b], m) = dc;
  }
  if (regression_count > 0) out.regression /= static_cast<double>(regression_count);

  if (backward) {
    enc2d_.backward(c2, nn::l2_normalize_rows_backward(f2, n2, df2, cfg_.norm.eps));
    enc3d_.backward(c3, nn::l2_normalize_rows_backward(f3, n3, df3, cfg_.norm.eps));
    if (mode == nn::Mode::Train) {
      enc2d_.update_running_stats(c2);
      enc3d_.update_running_stats(c3);
    }
  }
  return out;
}

nn::Vector GmwModel::weights(const EdgeSample& sample) const {
  require(!sample.selected.empty(), ErrorKind::NoValidCandidates, "no selected candidates");
  const auto [a, c] = features(sample, nn::Mode::Eval);
  if (cfg_.weights.rule == WeightRule::InverseDiagCost) {
    return compute_weights(cfg_.weights, sample, cost_diagonal(a, c), nullptr).w;
  }
  const nn::Matrix cost = cost_matrix(a, c);
  SinkhornConfig sk_cfg = cfg_.sinkhorn;
  sk_cfg.keep_history = false;
  const auto sk = sinkhorn(cost, sk_cfg);
  return compute_weights(cfg_.weights, sample, cost.diagonal(), &sk.P).w;
}

double GmwModel::fused_depth(const EdgeSample& sample) const {
  return weights(sample).dot(sample.selected_depths());
}

}  // namespace edgedepth
