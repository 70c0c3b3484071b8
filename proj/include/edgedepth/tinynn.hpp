#pragma once

// Minimal differentiable layers for per-edge encoders. Activations are
// stacked row-wise: one row per edge, one column per feature. A batch holds
// several instances back to back; `Segments` gives their row offsets so that
// context normalization can standardize within each instance.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "edgedepth/common.hpp"

namespace edgedepth::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

enum class Mode { Train, Eval };

/// Instance boundaries within stacked rows: instance k owns rows
/// [offsets[k], offsets[k+1]).
using Segments = std::vector<Index>;

inline Segments single_segment(Index rows) { return {0, rows}; }

/// A learnable array with its gradient and AdamW moments.
struct Parameter {
  Matrix value;
  Matrix grad;
  Matrix m;
  Matrix v;

  Parameter() = default;
  Parameter(Index rows, Index cols)
      : value(Matrix::Zero(rows, cols)),
        grad(Matrix::Zero(rows, cols)),
        m(Matrix::Zero(rows, cols)),
        v(Matrix::Zero(rows, cols)) {}

  void zero_grad() { grad.setZero(); }
};

/// Named, ordered view over a model's parameters. Does not own them.
class ParamStore {
 public:
  void add(std::string name, Parameter& p) { entries_.emplace_back(std::move(name), &p); }

  const std::vector<std::pair<std::string, Parameter*>>& entries() const { return entries_; }
  Parameter& at(const std::string& name) const;
  Index scalar_count() const;
  void zero_grad() const;
  bool all_finite() const;

 private:
  std::vector<std::pair<std::string, Parameter*>> entries_;
};

struct NormConfig {
  double eps = 1e-8;
  double momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch
};

/// Column-wise standardization over a set of rows.
struct Standardization {
  Matrix xhat;
  RowVector inv_std;
};

Standardization standardize(const Eigen::Ref<const Matrix>& x, double eps);
/// Gradient of standardize() with batch statistics.
Matrix standardize_backward(const Standardization& st, const Eigen::Ref<const Matrix>& dy);

/// Per-instance, per-feature standardization across edges. No parameters.
Matrix context_normalize(const Matrix& x, const Segments& seg, double eps,
                         std::vector<RowVector>* inv_std = nullptr);

/// FC -> context norm -> batch norm -> ReLU.
class Block {
 public:
  Block() = default;
  Block(Index in, Index out, std::mt19937_64& rng, NormConfig norm = {});

  struct Cache {
    Matrix x;
    Matrix cn_hat;
    Matrix cn_inv_std;  // segments x features
    Matrix bn_hat;
    RowVector bn_inv_std;
    RowVector batch_mean;
    RowVector batch_var;
    Matrix pre_relu;
    Segments seg;
    Mode mode = Mode::Eval;
  };

  struct Grads {
    Matrix dx;
    Matrix d_weight;
    RowVector d_bias;
    RowVector d_gamma;
    RowVector d_beta;
  };

  Index in_dim() const { return weight.value.rows(); }
  Index out_dim() const { return weight.value.cols(); }

  Matrix forward(const Matrix& x, const Segments& seg, Mode mode, Cache* cache) const;
  Grads backward(const Cache& cache, const Matrix& dy) const;
  void accumulate(const Grads& g);
  /// Folds the batch statistics of a train-mode forward into the running stats.
  void update_running_stats(const Cache& cache);

  void register_params(ParamStore& store, const std::string& prefix);

  Parameter weight;  // in x out
  Parameter bias;    // 1 x out
  Parameter gamma;   // 1 x out
  Parameter beta;    // 1 x out
  RowVector running_mean;
  RowVector running_var;
  NormConfig norm;
};

/// Plain fully-connected layer.
class Linear {
 public:
  Linear() = default;
  Linear(Index in, Index out, std::mt19937_64& rng);

  Matrix forward(const Matrix& x) const;
  /// Accumulates parameter gradients; returns dx.
  Matrix backward(const Matrix& x, const Matrix& dy);
  void register_params(ParamStore& store, const std::string& prefix);

  Parameter weight;
  Parameter bias;
};

struct EncoderConfig {
  Index input_dim = 4;
  Index layers = 6;
  Index hidden = 128;
  Index output_dim = 128;
};

/// Stack of Blocks: input_dim -> hidden -> ... -> output_dim.
class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderConfig& cfg, std::mt19937_64& rng, NormConfig norm = {});

  struct Cache {
    std::vector<Block::Cache> blocks;
  };

  Matrix forward(const Matrix& x, const Segments& seg, Mode mode, Cache* cache) const;
  /// Accumulates parameter gradients; returns dx.
  Matrix backward(const Cache& cache, const Matrix& dy);
  void update_running_stats(const Cache& cache);
  void register_params(ParamStore& store, const std::string& prefix);

  const EncoderConfig& config() const { return cfg_; }
  std::vector<Block>& blocks() { return blocks_; }
  const std::vector<Block>& blocks() const { return blocks_; }

 private:
  EncoderConfig cfg_;
  std::vector<Block> blocks_;
};

/// Divides each row by its Euclidean norm; rows with norm <= eps pass through.
Matrix l2_normalize_rows(const Matrix& x, double eps = 1e-8, Vector* norms = nullptr);
Matrix l2_normalize_rows_backward(const Matrix& y, const Vector& norms, const Matrix& dy,
                                  double eps = 1e-8);

struct AdamWConfig {
  double lr = 1e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Decoupled weight decay Adam. Moments live in each Parameter.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  /// Throws NonFiniteGradient (leaving parameters untouched) if any gradient
  /// is not finite.
  void step(const ParamStore& params);

  std::int64_t steps() const { return step_; }
  void set_steps(std::int64_t s) { step_ = s; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  std::int64_t step_ = 0;
};

struct GradCheckResult {
  double max_rel_error = 0;
  Index checked = 0;
  std::string worst_param;
  Index worst_offset = 0;
  double worst_analytic = 0;
  double worst_numeric = 0;
};

struct GradCheckConfig {
  Index samples = 1000;  // all scalars are checked when the model has fewer
  double step = 1e-5;
  // Denominator floor, relative to the largest analytic gradient magnitude;
  // keeps entries dominated by round-off from reading as large errors.
  double relative_floor = 1e-6;
  std::uint64_t seed = 0;
};

/// Compares analytic gradients (from `analytic`, which must fill every
/// Parameter::grad) against central differences of `loss`.
GradCheckResult grad_check(const ParamStore& params, const std::function<double()>& loss,
                           const std::function<void()>& analytic, const GradCheckConfig& cfg = {});

}  // namespace edgedepth::nn
