#include "edgedepth/tinynn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace edgedepth::nn {

Parameter& ParamStore::at(const std::string& name) const {
  for (const auto& [n, p] : entries_) {
    if (n == name) return *p;
  }
  throw Error(ErrorKind::InvalidArgument, "unknown parameter '" + name + "'");
}

Index ParamStore::scalar_count() const {
  Index total = 0;
  for (const auto& e : entries_) total += e.second->value.size();
  return total;
}

void ParamStore::zero_grad() const {
  for (const auto& e : entries_) e.second->zero_grad();
}

bool ParamStore::all_finite() const {
  return std::all_of(entries_.begin(), entries_.end(),
                     [](const auto& e) { return e.second->value.allFinite(); });
}

Standardization standardize(const Eigen::Ref<const Matrix>& x, double eps) {
  const auto rows = static_cast<double>(x.rows());
  const RowVector mean = x.colwise().sum() / rows;
  Matrix centered = x.rowwise() - mean;
  const RowVector var = centered.array().square().colwise().sum() / rows;
  Standardization st;
  st.inv_std = (var.array() + eps).rsqrt();
  st.xhat = centered.array().rowwise() * st.inv_std.array();
  return st;
}

Matrix standardize_backward(const Standardization& st, const Eigen::Ref<const Matrix>& dy) {
  const auto rows = static_cast<double>(dy.rows());
  const RowVector mean_dy = dy.colwise().sum() / rows;
  const RowVector mean_dy_xhat = dy.cwiseProduct(st.xhat).colwise().sum() / rows;
  Matrix dx = dy.rowwise() - mean_dy;
  dx.array() -= st.xhat.array().rowwise() * mean_dy_xhat.array();
  dx.array().rowwise() *= st.inv_std.array();
  return dx;
}

Matrix context_normalize(const Matrix& x, const Segments& seg, double eps,
                         std::vector<RowVector>* inv_std) {
  require(seg.size() >= 2 && seg.front() == 0 && seg.back() == x.rows(), ErrorKind::ShapeMismatch,
          "segments do not cover the input rows");
  Matrix out(x.rows(), x.cols());
  if (inv_std) inv_std->clear();
  for (std::size_t k = 0; k + 1 < seg.size(); ++k) {
    const Index begin = seg[k];
    const Index count = seg[k + 1] - begin;
    require(count > 0, ErrorKind::ShapeMismatch, "empty segment");
    auto st = standardize(x.middleRows(begin, count), eps);
    out.middleRows(begin, count) = st.xhat;
    if (inv_std) inv_std->push_back(std::move(st.inv_std));
  }
  return out;
}

namespace {

void glorot_uniform(Matrix& w, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
  std::uniform_real_distribution<double> dist(-limit, limit);
  // Column-major fill order is part of the determinism contract.
  for (Index k = 0; k < w.size(); ++k) w.data()[k] = dist(rng);
}

}  // namespace

Block::Block(Index in, Index out, std::mt19937_64& rng, NormConfig norm_cfg)
    : weight(in, out), bias(1, out), gamma(1, out), beta(1, out), norm(norm_cfg) {
  require(in >= 1 && out >= 1, ErrorKind::InvalidArgument, "layer widths must be positive");
  glorot_uniform(weight.value, rng);
  gamma.value.setOnes();
  running_mean = RowVector::Zero(out);
  running_var = RowVector::Ones(out);
}

Matrix Block::forward(const Matrix& x, const Segments& seg, Mode mode, Cache* cache) const {
  require(x.cols() == in_dim(), ErrorKind::ShapeMismatch,
          "block expects " + std::to_string(in_dim()) + " input features, got " +
              std::to_string(x.cols()));
  require(seg.size() >= 2 && seg.front() == 0 && seg.back() == x.rows(), ErrorKind::ShapeMismatch,
          "segments do not cover the input rows");
  const Index rows = x.rows();
  const Index cols = out_dim();
  const Index nseg = static_cast<Index>(seg.size()) - 1;
  const bool train = mode == Mode::Train;

  Matrix z = x * weight.value;
  z.rowwise() += bias.value.row(0);

  // Each column is processed on its own: context norm per segment, then
  // batch norm over all rows, affine, ReLU. z is overwritten with cn_hat.
  Matrix& cn = z;
  Matrix cn_inv_std(nseg, cols);
  Matrix bn_hat(rows, cols);
  Matrix pre(rows, cols);
  Matrix y(rows, cols);
  RowVector bn_inv_std(cols);
  RowVector batch_mean(cols);
  RowVector batch_var(cols);
  for (Index j = 0; j < cols; ++j) {
    for (Index k = 0; k < nseg; ++k) {
      const Index count = seg[k + 1] - seg[k];
      require(count > 0, ErrorKind::ShapeMismatch, "empty segment");
      auto s = cn.col(j).segment(seg[k], count).array();
      const double mean = s.mean();
      s -= mean;
      const double inv = 1.0 / std::sqrt(s.square().mean() + norm.eps);
      s *= inv;
      cn_inv_std(k, j) = inv;
    }
    auto c = cn.col(j).array();
    double mean;
    double inv;
    if (train) {
      mean = c.mean();
      batch_mean[j] = mean;
      batch_var[j] = (c - mean).square().mean();
      inv = 1.0 / std::sqrt(batch_var[j] + norm.eps);
    } else {
      mean = running_mean[j];
      inv = 1.0 / std::sqrt(running_var[j] + norm.eps);
    }
    bn_inv_std[j] = inv;
    bn_hat.col(j).array() = (c - mean) * inv;
    pre.col(j).array() = bn_hat.col(j).array() * gamma.value(0, j) + beta.value(0, j);
    y.col(j).array() = pre.col(j).array().max(0.0);
  }

  if (cache) {
    cache->x = x;
    cache->cn_hat = std::move(cn);
    cache->cn_inv_std = std::move(cn_inv_std);
    cache->bn_hat = std::move(bn_hat);
    cache->bn_inv_std = std::move(bn_inv_std);
    cache->batch_mean = std::move(batch_mean);
    cache->batch_var = std::move(batch_var);
    cache->pre_relu = std::move(pre);
    cache->seg = seg;
    cache->mode = mode;
  }
  return y;
}

Block::Grads Block::backward(const Cache& cache, const Matrix& dy) const {
  require(dy.rows() == cache.pre_relu.rows() && dy.cols() == out_dim(), ErrorKind::ShapeMismatch,
          "block backward: dy shape mismatch");
  const Index rows = dy.rows();
  const Index cols = dy.cols();
  const Index nseg = static_cast<Index>(cache.seg.size()) - 1;
  const bool train = cache.mode == Mode::Train;
  Grads g;
  g.d_gamma.resize(cols);
  g.d_beta.resize(cols);
  Matrix d_z(rows, cols);
  for (Index j = 0; j < cols; ++j) {
    auto d = d_z.col(j).array();
    d = (cache.pre_relu.col(j).array() > 0).select(dy.col(j).array(), 0.0);
    const auto bn_hat = cache.bn_hat.col(j).array();
    g.d_gamma[j] = (d * bn_hat).sum();
    g.d_beta[j] = d.sum();
    // d now holds d_bn_hat, then d_cn, then d_z.
    d *= gamma.value(0, j);
    if (train) {
      const double mean_d = d.mean();
      const double mean_dx = (d * bn_hat).mean();
      d = (d - mean_d - bn_hat * mean_dx) * cache.bn_inv_std[j];
    } else {
      d *= cache.bn_inv_std[j];
    }
    for (Index k = 0; k < nseg; ++k) {
      const Index begin = cache.seg[k];
      const Index count = cache.seg[k + 1] - begin;
      auto ds = d.segment(begin, count);
      const auto xh = cache.cn_hat.col(j).segment(begin, count).array();
      const double mean_d = ds.mean();
      const double mean_dx = (ds * xh).mean();
      ds = (ds - mean_d - xh * mean_dx) * cache.cn_inv_std(k, j);
    }
  }

  g.d_weight.noalias() = cache.x.transpose() * d_z;
  g.d_bias = d_z.colwise().sum();
  g.dx.noalias() = d_z * weight.value.transpose();
  return g;
}

void Block::accumulate(const Grads& g) {
  weight.grad += g.d_weight;
  bias.grad += g.d_bias;
  gamma.grad += g.d_gamma;
  beta.grad += g.d_beta;
}

void Block::update_running_stats(const Cache& cache) {
  if (cache.mode != Mode::Train) return;
  running_mean = norm.momentum * running_mean + (1 - norm.momentum) * cache.batch_mean;
  running_var = norm.momentum * running_var + (1 - norm.momentum) * cache.batch_var;
}

void Block::register_params(ParamStore& store, const std::string& prefix) {
  store.add(prefix + ".weight", weight);
  store.add(prefix + ".bias", bias);
  store.add(prefix + ".bn_gamma", gamma);
  store.add(prefix + ".bn_beta", beta);
}

Linear::Linear(Index in, Index out, std::mt19937_64& rng) : weight(in, out), bias(1, out) {
  require(in >= 1 && out >= 1, ErrorKind::InvalidArgument, "layer widths must be positive");
  glorot_uniform(weight.value, rng);
}

Matrix Linear::forward(const Matrix& x) const {
  require(x.cols() == weight.value.rows(), ErrorKind::ShapeMismatch, "linear: input width");
  Matrix y = x * weight.value;
  y.rowwise() += bias.value.row(0);
  return y;
}

Matrix Linear::backward(const Matrix& x, const Matrix& dy) {
  require(dy.cols() == weight.value.cols() && dy.rows() == x.rows(), ErrorKind::ShapeMismatch,
          "linear backward: dy shape mismatch");
  weight.grad.noalias() += x.transpose() * dy;
  bias.grad += dy.colwise().sum();
  return dy * weight.value.transpose();
}

void Linear::register_params(ParamStore& store, const std::string& prefix) {
  store.add(prefix + ".weight", weight);
  store.add(prefix + ".bias", bias);
}

Encoder::Encoder(const EncoderConfig& cfg, std::mt19937_64& rng, NormConfig norm) : cfg_(cfg) {
  require(cfg.layers >= 1 && cfg.input_dim >= 1 && cfg.hidden >= 1 && cfg.output_dim >= 1,
          ErrorKind::InvalidArgument, "encoder sizes must be positive");
  Index in = cfg.input_dim;
  for (Index k = 0; k < cfg.layers; ++k) {
    const Index out = (k + 1 == cfg.layers) ? cfg.output_dim : cfg.hidden;
    blocks_.emplace_back(in, out, rng, norm);
    in = out;
  }
}

Matrix Encoder::forward(const Matrix& x, const Segments& seg, Mode mode, Cache* cache) const {
  if (cache) cache->blocks.assign(blocks_.size(), {});
  Matrix h = x;
  for (std::size_t k = 0; k < blocks_.size(); ++k) {
    h = blocks_[k].forward(h, seg, mode, cache ? &cache->blocks[k] : nullptr);
  }
  return h;
}

Matrix Encoder::backward(const Cache& cache, const Matrix& dy) {
  Matrix d = dy;
  for (std::size_t k = blocks_.size(); k-- > 0;) {
    auto g = blocks_[k].backward(cache.blocks[k], d);
    blocks_[k].accumulate(g);
    d = std::move(g.dx);
  }
  return d;
}

void Encoder::update_running_stats(const Cache& cache) {
  for (std::size_t k = 0; k < blocks_.size(); ++k) blocks_[k].update_running_stats(cache.blocks[k]);
}

void Encoder::register_params(ParamStore& store, const std::string& prefix) {
  for (std::size_t k = 0; k < blocks_.size(); ++k) {
    blocks_[k].register_params(store, prefix + ".block" + std::to_string(k));
  }
}

Matrix l2_normalize_rows(const Matrix& x, double eps, Vector* norms) {
  Vector n = x.rowwise().norm();
  Matrix y = x;
  for (Index r = 0; r < x.rows(); ++r) {
    if (n[r] > eps) y.row(r) /= n[r];
  }
  if (norms) *norms = std::move(n);
  return y;
}

Matrix l2_normalize_rows_backward(const Matrix& y, const Vector& norms, const Matrix& dy,
                                  double eps) {
  require(y.rows() == dy.rows() && y.cols() == dy.cols(), ErrorKind::ShapeMismatch,
          "l2 normalize backward: shape mismatch");
  Matrix dx = dy;
  for (Index r = 0; r < y.rows(); ++r) {
    if (norms[r] > eps) {
      const double proj = y.row(r).dot(dy.row(r));
      dx.row(r) = (dy.row(r) - proj * y.row(r)) / norms[r];
    }
  }
  return dx;
}

void AdamW::step(const ParamStore& params) {
  for (const auto& [name, p] : params.entries()) {
    if (!p->grad.allFinite()) {
      throw Error(ErrorKind::NonFiniteGradient, "non-finite gradient in '" + name + "'");
    }
  }
  ++step_;
  const double bias1 = 1 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bias2 = 1 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (const auto& entry : params.entries()) {
    Parameter& p = *entry.second;
    p.value *= 1 - cfg_.lr * cfg_.weight_decay;
    p.m = cfg_.beta1 * p.m + (1 - cfg_.beta1) * p.grad;
    p.v = cfg_.beta2 * p.v + (1 - cfg_.beta2) * p.grad.cwiseAbs2();
    p.value.array() -=
        cfg_.lr * (p.m.array() / bias1) / ((p.v.array() / bias2).sqrt() + cfg_.eps);
  }
}

GradCheckResult grad_check(const ParamStore& params, const std::function<double()>& loss,
                           const std::function<void()>& analytic, const GradCheckConfig& cfg) {
  params.zero_grad();
  analytic();

  struct Slot {
    std::string name;
    Parameter* p;
    Index offset;
  };
  std::vector<Slot> slots;
  double grad_scale = 0;
  for (const auto& [name, p] : params.entries()) {
    for (Index k = 0; k < p->value.size(); ++k) slots.push_back({name, p, k});
    if (p->grad.size() > 0) grad_scale = std::max(grad_scale, p->grad.cwiseAbs().maxCoeff());
  }
  if (static_cast<Index>(slots.size()) > cfg.samples) {
    std::mt19937_64 rng(cfg.seed);
    std::shuffle(slots.begin(), slots.end(), rng);
    slots.resize(cfg.samples);
  }

  const double floor = cfg.relative_floor * grad_scale;
  GradCheckResult res;
  for (const auto& slot : slots) {
    double& value = slot.p->value.data()[slot.offset];
    const double saved = value;
    value = saved + cfg.step;
    const double up = loss();
    value = saved - cfg.step;
    const double down = loss();
    value = saved;

    const double numeric = (up - down) / (2 * cfg.step);
    const double a = slot.p->grad.data()[slot.offset];
    const double denom = std::max({std::abs(a), std::abs(numeric), floor});
    const double rel = denom > 0 ? std::abs(a - numeric) / denom : 0.0;
    ++res.checked;
    if (rel > res.max_rel_error || res.worst_param.empty()) {
      if (rel >= res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_param = slot.name;
        res.worst_offset = slot.offset;
        res.worst_analytic = a;
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace edgedepth::nn
