#pragma once

// Entropy-regularized assignment between two equally sized edge sets:
//
//   min_P  sum_{s,t} M_st P_st + alpha * P_st (log P_st - 1)
//   s.t.   P 1 = 1,  P^T 1 = 1,  P >= 0
//
// solved in the log domain with alternating row/column normalization. The
// solution has the form log P = -M/alpha + f 1^T + 1 g^T. Gradients are
// obtained by differentiating the executed iterations in reverse.

#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Cholesky>

#include "edgedepth/common.hpp"

namespace edgedepth {

struct SinkhornConfig {
  double alpha = 0.1;
  int max_iters = 200;
  double tol = 1e-9;  // max |row sum - 1| at exit; columns are exact
  // Kernels whose dynamic range (max - min of -M/alpha) stays within this
  // many nats are exponentiated once; iterations then rescale vectors and use
  // matrix-vector products. Wider kernels run log-sum-exp on every pass.
  double scaling_range = 300;
  // Per-iteration scalings are needed by sinkhorn_backward; forward-only
  // callers can drop them to run long budgets in constant memory.
  bool keep_history = true;
  // Newton steps on (f, g) taken when the alternating passes stop above tol.
  // Near-permutation plans couple their rows only through entries of size
  // exp(-gap/alpha), so plain passes can need millions of iterations there.
  // Forward only: requires keep_history = false.
  int newton_steps = 0;
};

template <typename Scalar>
struct SinkhornResult {
  MatrixX<Scalar> P;
  VectorX<Scalar> f;  // final row log-scaling
  VectorX<Scalar> g;  // final column log-scaling
  int iterations = 0;
  Scalar marginal_error = std::numeric_limits<Scalar>::infinity();
  bool converged = false;
  // Per-iteration scalings kept for the reverse pass: f_hist[k] is f after
  // iteration k+1; g_hist[k] is g before iteration k+1 (g_hist[0] = 0).
  std::vector<VectorX<Scalar>> f_hist;
  std::vector<VectorX<Scalar>> g_hist;
};

namespace detail {

// out_t = log sum_s exp(base_st + shift_s), one entry per column. `work`
// is scratch space; columns are reduced contiguously so exp vectorizes.
template <typename Scalar>
void log_sum_exp_cols(const MatrixX<Scalar>& base, const VectorX<Scalar>& shift,
                      MatrixX<Scalar>& work, VectorX<Scalar>& out) {
  work.noalias() = base.colwise() + shift;
  out.resize(base.cols());
  for (Index t = 0; t < base.cols(); ++t) {
    auto col = work.col(t);
    const Scalar c = col.maxCoeff();
    col.array() = (col.array() - c).exp();
    out[t] = c + std::log(col.sum());
  }
}

// exp(base + row_shift 1^T + 1 col_shift^T)
template <typename Scalar>
void exp_scaled(const MatrixX<Scalar>& base, const VectorX<Scalar>& row_shift,
                const VectorX<Scalar>& col_shift, MatrixX<Scalar>& out) {
  out.noalias() = base.colwise() + row_shift;
  out.rowwise() += col_shift.transpose();
  out.array() = out.array().exp();
}

// The kernel -M/alpha, optionally with E = exp(kernel - shift).
template <typename Scalar>
struct Kernel {
  MatrixX<Scalar> log_k;
  MatrixX<Scalar> e;  // empty when the range is too wide
  Scalar shift{0};

  template <typename Derived>
  Kernel(const Eigen::MatrixBase<Derived>& cost, const SinkhornConfig& cfg)
      : log_k(-cost / Scalar(cfg.alpha)) {
    shift = log_k.maxCoeff();
    if (shift - log_k.minCoeff() <= Scalar(cfg.scaling_range)) {
      e = (log_k.array() - shift).exp();
    }
  }

  bool scaled() const { return e.size() > 0; }

  // out_s = log sum_t exp(log_k_st + v_t), given E.
  template <typename Mat>
  static void lse(const Mat& e, Scalar shift, const VectorX<Scalar>& v, VectorX<Scalar>& out) {
    const Scalar vmax = v.maxCoeff();
    out.noalias() = e * (v.array() - vmax).exp().matrix();
    out.array() = out.array().log() + (shift + vmax);
  }
};

// Damped Newton on the marginal residuals r = P1 - 1, c = P^T 1 - 1 with
// log P = log_k + f 1^T + 1 g^T. The Jacobian [[diag(P1), P], [P^T, diag(P^T 1)]]
// is singular along (1, -1), so the last g entry is held fixed.
template <typename Scalar>
void newton_polish(const MatrixX<Scalar>& log_k, const SinkhornConfig& cfg, VectorX<Scalar>& f,
                   VectorX<Scalar>& g) {
  const Index m = log_k.rows();
  MatrixX<Scalar> p;
  VectorX<Scalar> res(2 * m);
  const auto residual = [&](const VectorX<Scalar>& ff, const VectorX<Scalar>& gg) {
    exp_scaled(log_k, ff, gg, p);
    res.head(m) = p.rowwise().sum().array() - 1;
    res.tail(m) = p.colwise().sum().transpose().array() - 1;
    return res.cwiseAbs().maxCoeff();
  };
  Scalar err = residual(f, g);
  for (int step = 0; step < cfg.newton_steps && err > Scalar(cfg.tol); ++step) {
    const Index n = 2 * m - 1;
    MatrixX<Scalar> jac = MatrixX<Scalar>::Zero(n, n);
    jac.topLeftCorner(m, m).diagonal() = p.rowwise().sum();
    jac.bottomRightCorner(m - 1, m - 1).diagonal() =
        p.colwise().sum().transpose().head(m - 1);
    jac.topRightCorner(m, m - 1) = p.leftCols(m - 1);
    jac.bottomLeftCorner(m - 1, m) = p.leftCols(m - 1).transpose();
    const VectorX<Scalar> rhs = -res.head(n);
    const VectorX<Scalar> delta = jac.ldlt().solve(rhs);
    if (!delta.allFinite()) return;
    Scalar t{1};
    bool improved = false;
    for (int halving = 0; halving < 40; ++halving, t /= 2) {
      VectorX<Scalar> f_try = f + t * delta.head(m);
      VectorX<Scalar> g_try = g;
      g_try.head(m - 1) += t * delta.tail(m - 1);
      const Scalar e = residual(f_try, g_try);
      if (e < err) {
        f = std::move(f_try);
        g = std::move(g_try);
        err = e;
        improved = true;
        break;
      }
    }
    if (!improved) return;
  }
}

}  // namespace detail

/// Runs Sinkhorn on cost matrix M. Non-convergence is reported through
/// `converged`, not thrown.
template <typename Derived>
SinkhornResult<typename Derived::Scalar> sinkhorn(const Eigen::MatrixBase<Derived>& cost,
                                                  const SinkhornConfig& cfg) {
  using Scalar = typename Derived::Scalar;
  require(cost.rows() == cost.cols() && cost.rows() > 0, ErrorKind::ShapeMismatch,
          "sinkhorn expects a non-empty square cost matrix");
  require(cfg.alpha > 0, ErrorKind::InvalidArgument, "alpha must be positive");
  require(cfg.max_iters >= 1, ErrorKind::InvalidArgument, "max_iters must be at least 1");
  require(cost.allFinite(), ErrorKind::InvalidArgument, "cost matrix must be finite");
  require(cfg.newton_steps == 0 || !cfg.keep_history, ErrorKind::InvalidArgument,
          "newton_steps needs keep_history = false");

  const Index m = cost.rows();
  const detail::Kernel<Scalar> kernel(cost, cfg);
  MatrixX<Scalar> kernel_t;
  MatrixX<Scalar> work;
  if (!kernel.scaled()) {
    kernel_t = kernel.log_k.transpose();
    work.resize(m, m);
  }
  // LSE over columns (rows of the kernel) and over rows.
  const auto row_lse = [&](const VectorX<Scalar>& g, VectorX<Scalar>& out) {
    if (kernel.scaled()) {
      detail::Kernel<Scalar>::lse(kernel.e, kernel.shift, g, out);
    } else {
      detail::log_sum_exp_cols(kernel_t, g, work, out);
    }
  };
  const auto col_lse = [&](const VectorX<Scalar>& f, VectorX<Scalar>& out) {
    if (kernel.scaled()) {
      detail::Kernel<Scalar>::lse(kernel.e.transpose(), kernel.shift, f, out);
    } else {
      detail::log_sum_exp_cols(kernel.log_k, f, work, out);
    }
  };

  SinkhornResult<Scalar> res;
  VectorX<Scalar> f = VectorX<Scalar>::Zero(m);
  VectorX<Scalar> g = VectorX<Scalar>::Zero(m);
  VectorX<Scalar> lse;
  for (int it = 0;; ++it) {
    row_lse(g, lse);
    const VectorX<Scalar> f_next = -lse;
    if (it > 0) {
      // Row sums of the current iterate are exp(f - f_next).
      res.marginal_error = ((f - f_next).array().exp() - 1).abs().maxCoeff();
      if (res.marginal_error <= cfg.tol) {
        res.converged = true;
        break;
      }
      if (it == cfg.max_iters) break;
    }
    if (cfg.keep_history) res.g_hist.push_back(g);
    f = f_next;
    if (cfg.keep_history) res.f_hist.push_back(f);
    col_lse(f, lse);
    g = -lse;
    ++res.iterations;
  }

  if (!res.converged && cfg.newton_steps > 0) {
    detail::newton_polish(kernel.log_k, cfg, f, g);
    col_lse(f, lse);
    g = -lse;
    row_lse(g, lse);
    res.marginal_error = ((f + lse).array().exp() - 1).abs().maxCoeff();
    res.converged = res.marginal_error <= cfg.tol;
  }

  detail::exp_scaled(kernel.log_k, f, g, res.P);
  res.f = std::move(f);
  res.g = std::move(g);
  return res;
}

/// Reverse pass: given dL/dP, returns dL/dM through every executed iteration.
template <typename Scalar, typename Derived>
MatrixX<Scalar> sinkhorn_backward(const Eigen::MatrixBase<Derived>& cost,
                                  const SinkhornResult<Scalar>& res, const SinkhornConfig& cfg,
                                  const MatrixX<Scalar>& d_p) {
  const Index m = cost.rows();
  require(d_p.rows() == m && d_p.cols() == m && res.P.rows() == m, ErrorKind::ShapeMismatch,
          "sinkhorn_backward shape mismatch");
  require(static_cast<int>(res.f_hist.size()) == res.iterations, ErrorKind::InvalidArgument,
          "sinkhorn_backward needs a result computed with keep_history");
  const detail::Kernel<Scalar> kernel(cost, cfg);

  const MatrixX<Scalar> d_logp = d_p.cwiseProduct(res.P);
  VectorX<Scalar> a_f = d_logp.rowwise().sum();
  VectorX<Scalar> a_g = d_logp.colwise().sum().transpose();
  const int iters = res.iterations;

  // Iteration k has f_k = -LSE_t(kernel + g_{k-1}) and g_k = -LSE_s(kernel + f_k);
  // the softmax matrices of both steps are exp(kernel + f_k + g_{k-1}) and
  // exp(kernel + f_k + g_k).
  const auto g_after = [&](int k) -> const VectorX<Scalar>& {
    return k + 1 < iters ? res.g_hist[k + 1] : res.g;
  };

  if (kernel.scaled()) {
    // Both softmax matrices are E o (a b^T), so the kernel gradient is
    // d_logp - E o (U V^T) with one rank-1 term per step.
    MatrixX<Scalar> u(m, 2 * iters);
    MatrixX<Scalar> v(m, 2 * iters);
    VectorX<Scalar> tmp;
    for (int k = iters - 1; k >= 0; --k) {
      const VectorX<Scalar> fk = res.f_hist[k].array() + kernel.shift;
      const VectorX<Scalar>& gk = g_after(k);
      const VectorX<Scalar>& gp = res.g_hist[k];
      const Scalar mu = (fk.maxCoeff() - gk.maxCoeff()) / 2;
      const VectorX<Scalar> a = (fk.array() - mu).exp();
      const VectorX<Scalar> b = (gk.array() + mu).exp();
      const VectorX<Scalar> b_prev = (gp.array() + mu).exp();

      u.col(2 * k) = a;
      v.col(2 * k) = b.cwiseProduct(a_g);
      tmp.noalias() = kernel.e * v.col(2 * k);
      a_f -= a.cwiseProduct(tmp);

      u.col(2 * k + 1) = a_f.cwiseProduct(a);
      v.col(2 * k + 1) = b_prev;
      tmp.noalias() = kernel.e.transpose() * u.col(2 * k + 1);
      a_g = -b_prev.cwiseProduct(tmp);
      a_f.setZero();
    }
    MatrixX<Scalar> d_kernel = d_logp;
    if (iters > 0) d_kernel.array() -= kernel.e.array() * (u * v.transpose()).array();
    return -d_kernel / Scalar(cfg.alpha);
  }

  MatrixX<Scalar> d_kernel = d_logp;
  MatrixX<Scalar> soft(m, m);
  for (int k = iters - 1; k >= 0; --k) {
    const VectorX<Scalar>& f_k = res.f_hist[k];
    // g_k = -LSE_s(kernel + f_k): columns of `soft` are softmax weights.
    detail::exp_scaled(kernel.log_k, f_k, g_after(k), soft);
    d_kernel.noalias() -= soft * a_g.asDiagonal();
    a_f.noalias() -= soft * a_g;
    // f_k = -LSE_t(kernel + g_{k-1}): rows of `soft` are softmax weights.
    detail::exp_scaled(kernel.log_k, f_k, res.g_hist[k], soft);
    d_kernel.noalias() -= a_f.asDiagonal() * soft;
    a_g.noalias() = -(soft.transpose() * a_f);
    a_f.setZero();
  }
  return -d_kernel / Scalar(cfg.alpha);
}

/// Primal objective sum M.P + alpha P (log P - 1).
template <typename DerivedM, typename DerivedP>
typename DerivedM::Scalar sinkhorn_objective(const Eigen::MatrixBase<DerivedM>& cost,
                                             const Eigen::MatrixBase<DerivedP>& p, double alpha) {
  using Scalar = typename DerivedM::Scalar;
  Scalar total{0};
  for (Index t = 0; t < p.cols(); ++t) {
    for (Index s = 0; s < p.rows(); ++s) {
      const Scalar v = p(s, t);
      total += cost(s, t) * v;
      if (v > 0) total += Scalar(alpha) * v * (std::log(v) - 1);
    }
  }
  return total;
}

/// Dual objective at log-scalings (f, g); non-decreasing along iterations and
/// equal to the primal optimum at convergence.
template <typename Derived>
typename Derived::Scalar sinkhorn_dual(const Eigen::MatrixBase<Derived>& cost,
                                       const VectorX<typename Derived::Scalar>& f,
                                       const VectorX<typename Derived::Scalar>& g, double alpha) {
  using Scalar = typename Derived::Scalar;
  const MatrixX<Scalar> kernel = -cost / Scalar(alpha);
  const Scalar mass = ((kernel.colwise() + f).rowwise() + g.transpose()).array().exp().sum();
  return Scalar(alpha) * (f.sum() + g.sum() - mass);
}

}  // namespace edgedepth
