#include "edgedepth/uncertainty.hpp"

#include <cmath>

namespace edgedepth {

namespace {

nn::Matrix joint_features(const EdgeSample& sample) {
  nn::Matrix x(sample.edge_count(), 10);
  x << sample.features2d, sample.features3d;
  return x;
}

}  // namespace

UncertaintyModel::UncertaintyModel(const UncertaintyConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  require(cfg.encoder.input_dim == 10, ErrorKind::InvalidArgument,
          "uncertainty encoder takes 10 inputs");
  std::mt19937_64 rng(seed);
  enc_ = nn::Encoder(cfg.encoder, rng, cfg.norm);
  head_ = nn::Linear(cfg.encoder.output_dim, 1, rng);
}

nn::ParamStore UncertaintyModel::params() {
  nn::ParamStore store;
  enc_.register_params(store, "unc");
  head_.register_params(store, "unc.head");
  return store;
}

nn::Vector UncertaintyModel::log_sigma(const EdgeSample& sample) const {
  const auto seg = nn::single_segment(sample.edge_count());
  return head_.forward(enc_.forward(joint_features(sample), seg, nn::Mode::Eval, nullptr)).col(0);
}

nn::Vector UncertaintyModel::weights(const EdgeSample& sample) const {
  require(!sample.selected.empty(), ErrorKind::NoValidCandidates, "no selected candidates");
  const nn::Vector all = log_sigma(sample);
  nn::Vector neg(static_cast<Index>(sample.selected.size()));
  for (Index k = 0; k < neg.size(); ++k) neg[k] = -all[sample.selected[k]];
  // 1/sigma normalized, written as a softmax of -log sigma to avoid overflow.
  const nn::Vector e = (neg.array() - neg.maxCoeff()).exp();
  return e / e.sum();
}

double UncertaintyModel::fused_depth(const EdgeSample& sample) const {
  return weights(sample).dot(sample.selected_depths());
}

UncertaintyLoss UncertaintyModel::forward_backward(std::span<const EdgeSample* const> batch,
                                                   nn::Mode mode, bool backward) {
  require(!batch.empty(), ErrorKind::InvalidArgument, "empty batch");
  nn::Segments seg{0};
  for (const auto* s : batch) seg.push_back(seg.back() + s->edge_count());
  nn::Matrix x(seg.back(), 10);
  UncertaintyLoss out;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    x.middleRows(seg[b], batch[b]->edge_count()) = joint_features(*batch[b]);
    out.candidates += static_cast<Index>(batch[b]->selected.size());
  }
  if (out.candidates == 0) return out;

  nn::Encoder::Cache cache;
  const nn::Matrix h = enc_.forward(x, seg, mode, backward ? &cache : nullptr);
  const nn::Matrix ls = head_.forward(h);
  nn::Matrix d_ls = nn::Matrix::Zero(ls.rows(), 1);
  const double inv_n = 1.0 / static_cast<double>(out.candidates);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const EdgeSample& sample = *batch[b];
    for (const Index s : sample.selected) {
      const Index row = seg[b] + s;
      const double err = std::abs(sample.candidates[s].depth - sample.depth_star);
      const double scaled = err * std::exp(-ls(row, 0));
      out.nll += (scaled + ls(row, 0)) * inv_n;
      d_ls(row, 0) = (1 - scaled) * inv_n;
    }
  }
  if (backward) {
    enc_.backward(cache, head_.backward(h, d_ls));
    if (mode == nn::Mode::Train) enc_.update_running_stats(cache);
  }
  return out;
}

}  // namespace edgedepth
