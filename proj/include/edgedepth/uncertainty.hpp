#pragma once

// Learned per-candidate uncertainty, used as a weighting baseline. An edge
// encoder over the concatenated 2D and 3D edge features predicts log sigma
// for each candidate; training minimizes the Laplace negative log-likelihood
//
//   |z - z*| exp(-log_sigma) + log_sigma
//
// over the selected candidates, and fusion weights are proportional to 1/sigma.

#include <cstdint>
#include <span>

#include "edgedepth/gmw.hpp"
#include "edgedepth/tinynn.hpp"

namespace edgedepth {

struct UncertaintyConfig {
  nn::EncoderConfig encoder{10, 4, 32, 32};
  nn::NormConfig norm;
};

struct UncertaintyLoss {
  double nll = 0;  // mean over selected candidates in the batch
  Index candidates = 0;
};

class UncertaintyModel {
 public:
  UncertaintyModel() = default;
  UncertaintyModel(const UncertaintyConfig& cfg, std::uint64_t seed);
  UncertaintyModel(const UncertaintyModel&) = delete;
  UncertaintyModel& operator=(const UncertaintyModel&) = delete;
  UncertaintyModel(UncertaintyModel&&) = default;
  UncertaintyModel& operator=(UncertaintyModel&&) = default;

  const UncertaintyConfig& config() const { return cfg_; }
  nn::ParamStore params();
  nn::Encoder& encoder() { return enc_; }

  /// log sigma for every edge of the sample (eval-mode statistics).
  nn::Vector log_sigma(const EdgeSample& sample) const;
  /// Fusion weights over sample.selected.
  nn::Vector weights(const EdgeSample& sample) const;
  double fused_depth(const EdgeSample& sample) const;

  /// Mean NLL over the selected candidates of the batch. With `backward`,
  /// gradients are accumulated and train-mode running statistics updated.
  UncertaintyLoss forward_backward(std::span<const EdgeSample* const> batch, nn::Mode mode,
                                   bool backward);

 private:
  UncertaintyConfig cfg_;
  nn::Encoder enc_;
  nn::Linear head_;
};

}  // namespace edgedepth
