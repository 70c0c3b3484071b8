#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "edgedepth/tinynn.hpp"
#include "oracles.hpp"

using namespace edgedepth;
using namespace edgedepth::nn;

namespace {

// Scalar re-implementation of FC -> context norm -> batch norm (batch
// statistics) -> affine -> ReLU over row segments.
Matrix block_oracle(const Block& b, const Matrix& x, const Segments& seg, double eps) {
  const Index rows = x.rows();
  const Index in = b.in_dim();
  const Index out = b.out_dim();
  std::vector<std::vector<double>> z(rows, std::vector<double>(out, 0.0));
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < out; ++c) {
      double acc = b.bias.value(0, c);
      for (Index k = 0; k < in; ++k) acc += x(r, k) * b.weight.value(k, c);
      z[r][c] = acc;
    }
  }
  for (std::size_t s = 0; s + 1 < seg.size(); ++s) {
    for (Index c = 0; c < out; ++c) {
      double mean = 0, var = 0;
      for (Index r = seg[s]; r < seg[s + 1]; ++r) mean += z[r][c];
      mean /= static_cast<double>(seg[s + 1] - seg[s]);
      for (Index r = seg[s]; r < seg[s + 1]; ++r) var += (z[r][c] - mean) * (z[r][c] - mean);
      var /= static_cast<double>(seg[s + 1] - seg[s]);
      for (Index r = seg[s]; r < seg[s + 1]; ++r) z[r][c] = (z[r][c] - mean) / std::sqrt(var + eps);
    }
  }
  Matrix y(rows, out);
  for (Index c = 0; c < out; ++c) {
    double mean = 0, var = 0;
    for (Index r = 0; r < rows; ++r) mean += z[r][c];
    mean /= static_cast<double>(rows);
    for (Index r = 0; r < rows; ++r) var += (z[r][c] - mean) * (z[r][c] - mean);
    var /= static_cast<double>(rows);
    for (Index r = 0; r < rows; ++r) {
      const double v = (z[r][c] - mean) / std::sqrt(var + eps) * b.gamma.value(0, c) + b.beta.value(0, c);
      y(r, c) = std::max(v, 0.0);
    }
  }
  return y;
}

Block random_block(Index in, Index out, std::mt19937_64& rng) {
  Block b(in, out, rng);
  b.gamma.value = oracle::random_matrix(1, out, rng, 0.5, 1.5);
  b.beta.value = oracle::random_matrix(1, out, rng, -0.3, 0.3);
  b.bias.value = oracle::random_matrix(1, out, rng);
  b.running_mean = oracle::random_matrix(1, out, rng, -0.2, 0.2);
  b.running_var = oracle::random_matrix(1, out, rng, 0.5, 2);
  return b;
}

// Finite-difference check of a single block for sum(y .* g).
double block_grad_error(Block& b, const Matrix& x, const Segments& seg, Mode mode, const Matrix& g) {
  Block::Cache cache;
  const Matrix y = b.forward(x, seg, mode, &cache);
  const auto grads = b.backward(cache, g);
  const auto loss = [&](const Block& blk, const Matrix& in) {
    return (blk.forward(in, seg, mode, nullptr).array() * g.array()).sum();
  };
  const double h = 1e-5;
  double worst = 0;
  const auto compare = [&](double analytic, double numeric) {
    worst = std::max(worst, std::abs(analytic - numeric) / std::max({std::abs(analytic),
                                                                     std::abs(numeric), 1e-5}));
  };
  for (Index k = 0; k < x.size(); ++k) {
    Matrix p = x, q = x;
    p.data()[k] += h;
    q.data()[k] -= h;
    compare(grads.dx.data()[k], (loss(b, p) - loss(b, q)) / (2 * h));
  }
  const std::pair<Parameter*, const double*> params[] = {{&b.weight, grads.d_weight.data()},
                                                         {&b.bias, grads.d_bias.data()},
                                                         {&b.gamma, grads.d_gamma.data()},
                                                         {&b.beta, grads.d_beta.data()}};
  for (const auto& [param, analytic] : params) {
    for (Index k = 0; k < param->value.size(); ++k) {
      const double saved = param->value.data()[k];
      param->value.data()[k] = saved + h;
      const double up = loss(b, x);
      param->value.data()[k] = saved - h;
      const double down = loss(b, x);
      param->value.data()[k] = saved;
      compare(analytic[k], (up - down) / (2 * h));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("context normalization: zero variance and standardization") {
  Matrix flat(5, 3);
  flat.rowwise() = RowVector::LinSpaced(3, 1, 3);
  CHECK(context_normalize(flat, single_segment(5), 1e-8).cwiseAbs().maxCoeff() == 0.0);

  std::mt19937_64 rng(1);
  const Matrix x = oracle::random_matrix(40, 4, rng, -5, 5);
  const Segments seg{0, 7, 25, 40};
  const Matrix y = context_normalize(x, seg, 1e-8);
  for (std::size_t s = 0; s + 1 < seg.size(); ++s) {
    const auto part = y.middleRows(seg[s], seg[s + 1] - seg[s]);
    const RowVector mean = part.colwise().mean();
    CHECK(mean.cwiseAbs().maxCoeff() < 1e-10);
    const RowVector sd = ((part.rowwise() - mean).array().square().colwise().mean()).sqrt();
    CHECK((sd.array() - 1).abs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("context normalization is equivariant to row permutations") {
  std::mt19937_64 rng(2);
  const Matrix x = oracle::random_matrix(12, 3, rng);
  std::vector<Index> perm(12);
  std::iota(perm.begin(), perm.end(), Index{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  Matrix px(12, 3);
  for (Index r = 0; r < 12; ++r) px.row(r) = x.row(perm[r]);
  const Matrix y = context_normalize(x, single_segment(12), 1e-8);
  const Matrix py = context_normalize(px, single_segment(12), 1e-8);
  for (Index r = 0; r < 12; ++r) CHECK((py.row(r) - y.row(perm[r])).cwiseAbs().maxCoeff() < 1e-14);

  // The whole encoder inherits the property in eval mode.
  Encoder enc({3, 3, 5, 4}, rng);
  const Matrix e = enc.forward(x, single_segment(12), Mode::Eval, nullptr);
  const Matrix pe = enc.forward(px, single_segment(12), Mode::Eval, nullptr);
  for (Index r = 0; r < 12; ++r) CHECK((pe.row(r) - e.row(perm[r])).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("block forward matches a scalar oracle") {
  std::mt19937_64 rng(3);
  for (const auto& [rows, seg] : {std::pair<Index, Segments>{3, {0, 3}}, {9, {0, 4, 9}}}) {
    Block b = random_block(2, 3, rng);
    const Matrix x = oracle::random_matrix(rows, 2, rng);
    const Matrix got = b.forward(x, seg, Mode::Train, nullptr);
    const Matrix want = block_oracle(b, x, seg, b.norm.eps);
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("block backward matches finite differences") {
  std::mt19937_64 rng(4);
  for (const Mode mode : {Mode::Train, Mode::Eval}) {
    Block b = random_block(2, 2, rng);
    const Matrix x = oracle::random_matrix(3, 2, rng);
    const Matrix g = oracle::random_matrix(3, 2, rng);
    CHECK(block_grad_error(b, x, single_segment(3), mode, g) < 1e-4);

    Block wide = random_block(3, 4, rng);
    const Matrix x2 = oracle::random_matrix(11, 3, rng);
    const Matrix g2 = oracle::random_matrix(11, 4, rng);
    CHECK(block_grad_error(wide, x2, {0, 5, 11}, mode, g2) < 1e-4);
  }
}

TEST_CASE("block backward: zero upstream and dead units") {
  std::mt19937_64 rng(5);
  Block b = random_block(2, 3, rng);
  const Matrix x = oracle::random_matrix(6, 2, rng);
  Block::Cache cache;
  b.forward(x, single_segment(6), Mode::Train, &cache);
  const auto zero = b.backward(cache, Matrix::Zero(6, 3));
  CHECK(zero.dx.cwiseAbs().maxCoeff() == 0.0);
  CHECK(zero.d_weight.cwiseAbs().maxCoeff() == 0.0);
  CHECK(zero.d_gamma.cwiseAbs().maxCoeff() == 0.0);

  // A strongly negative shift kills unit 1 on every row.
  b.beta.value(0, 1) = -100;
  b.forward(x, single_segment(6), Mode::Train, &cache);
  const auto g = b.backward(cache, Matrix::Ones(6, 3));
  CHECK(g.d_weight.col(1).cwiseAbs().maxCoeff() == 0.0);
  CHECK(g.d_bias[1] == 0.0);
  CHECK(g.d_gamma[1] == 0.0);
  CHECK(g.d_beta[1] == 0.0);
}

TEST_CASE("block rejects a wrong input width") {
  std::mt19937_64 rng(6);
  Block b(3, 2, rng);
  try {
    b.forward(Matrix::Zero(4, 2), single_segment(4), Mode::Eval, nullptr);
    FAIL("expected ShapeMismatch");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ShapeMismatch);
  }
}

TEST_CASE("running statistics follow the momentum rule") {
  std::mt19937_64 rng(7);
  Block b(2, 2, rng);
  const Matrix x = oracle::random_matrix(8, 2, rng);
  Block::Cache cache;
  b.forward(x, single_segment(8), Mode::Train, &cache);
  b.update_running_stats(cache);
  CHECK((b.running_mean - 0.1 * cache.batch_mean).cwiseAbs().maxCoeff() < 1e-15);
  CHECK((b.running_var - (RowVector::Constant(2, 0.9) + 0.1 * cache.batch_var))
            .cwiseAbs()
            .maxCoeff() < 1e-15);
}

TEST_CASE("l2_normalize_rows") {
  Matrix x(3, 2);
  x << 3, 4, 0.6, 0.8, 0, 0;
  const Matrix y = l2_normalize_rows(x);
  CHECK(y(0, 0) == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(y(0, 1) == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(y.row(1) == x.row(1));
  CHECK(y.row(2).norm() == 0.0);

  std::mt19937_64 rng(8);
  const Matrix r = oracle::random_matrix(5, 4, rng);
  Vector norms;
  const Matrix u = l2_normalize_rows(r, 1e-8, &norms);
  CHECK((u.rowwise().norm().array() - 1).abs().maxCoeff() < 1e-12);

  const Matrix g = oracle::random_matrix(5, 4, rng);
  const Matrix dx = l2_normalize_rows_backward(u, norms, g);
  for (Index k = 0; k < r.size(); ++k) {
    Matrix p = r, q = r;
    p.data()[k] += 1e-6;
    q.data()[k] -= 1e-6;
    const double fd = ((l2_normalize_rows(p).array() - l2_normalize_rows(q).array()) * g.array()).sum() / 2e-6;
    CHECK(std::abs(fd - dx.data()[k]) < 1e-8);
  }
}

TEST_CASE("adamw: fixed point, decay, and a two-step scalar recurrence") {
  Parameter p(1, 3);
  p.value << 1, -2, 3;
  ParamStore store;
  store.add("p", p);
  const Matrix start = p.value;

  AdamW plain({1e-2, 0.0});
  plain.step(store);
  CHECK(p.value == start);

  AdamW decay({1e-2, 0.5});
  decay.step(store);
  CHECK((p.value - start * (1 - 1e-2 * 0.5)).cwiseAbs().maxCoeff() < 1e-15);

  // Constant gradient g: m1 = (1-b1) g, v1 = (1-b2) g^2, mhat = g, vhat = g^2.
  Parameter s(1, 1);
  s.value(0, 0) = 0.5;
  ParamStore one;
  one.add("s", s);
  const AdamWConfig cfg{0.1, 0.01, 0.9, 0.999, 1e-8};
  AdamW opt(cfg);
  const double g = 2.0;
  double theta = 0.5, m = 0, v = 0;
  for (int t = 1; t <= 2; ++t) {
    s.grad(0, 0) = g;
    opt.step(one);
    theta *= 1 - cfg.lr * cfg.weight_decay;
    m = cfg.beta1 * m + (1 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1 - cfg.beta2) * g * g;
    const double mhat = m / (1 - std::pow(cfg.beta1, t));
    const double vhat = v / (1 - std::pow(cfg.beta2, t));
    theta -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    CHECK(std::abs(s.value(0, 0) - theta) < 1e-15);
  }
  CHECK(opt.steps() == 2);

  s.grad(0, 0) = std::nan("");
  const double before = s.value(0, 0);
  try {
    opt.step(one);
    FAIL("expected NonFiniteGradient");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::NonFiniteGradient);
  }
  CHECK(s.value(0, 0) == before);
  CHECK(opt.steps() == 2);
}

TEST_CASE("grad_check: exact on a quadratic, catches a corrupted backward") {
  std::mt19937_64 rng(9);
  Linear lin(3, 2, rng);
  ParamStore store;
  lin.register_params(store, "lin");
  const Matrix x = oracle::random_matrix(10, 3, rng);
  // Central differences are exact here; only the loss's round-off remains,
  // so keep the loss small next to its gradient.
  const Matrix target = lin.forward(x) + 0.1 * oracle::random_matrix(10, 2, rng);
  const auto loss = [&] { return 0.5 * (lin.forward(x) - target).squaredNorm(); };
  const auto analytic = [&] { lin.backward(x, lin.forward(x) - target); };
  const auto ok = grad_check(store, loss, analytic);
  CHECK(ok.checked == 8);
  CHECK(ok.max_rel_error < 1e-10);

  const auto corrupted = [&] {
    lin.backward(x, lin.forward(x) - target);
    lin.weight.grad(1, 0) *= 1.1;
  };
  const auto bad = grad_check(store, loss, corrupted);
  CHECK(bad.max_rel_error > 1e-2);
  CHECK(bad.worst_param == "lin.weight");
}

TEST_CASE("encoder gradient over many parameters") {
  std::mt19937_64 rng(10);
  Encoder enc({4, 3, 16, 8}, rng);
  ParamStore store;
  enc.register_params(store, "enc");
  REQUIRE(store.scalar_count() >= 500);
  const Matrix x = oracle::random_matrix(30, 4, rng);
  const Matrix g = oracle::random_matrix(30, 8, rng);
  const Segments seg{0, 12, 30};
  const auto loss = [&] {
    return (enc.forward(x, seg, Mode::Train, nullptr).array() * g.array()).sum();
  };
  const auto analytic = [&] {
    Encoder::Cache cache;
    enc.forward(x, seg, Mode::Train, &cache);
    enc.backward(cache, g);
  };
  const auto res = grad_check(store, loss, analytic);
  CHECK(res.checked == store.scalar_count());
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("initialization is deterministic and Glorot-bounded") {
  std::mt19937_64 a(11), b(11);
  const Encoder e1({6, 3, 10, 7}, a);
  const Encoder e2({6, 3, 10, 7}, b);
  for (std::size_t k = 0; k < e1.blocks().size(); ++k) {
    const auto& w = e1.blocks()[k].weight.value;
    CHECK(w == e2.blocks()[k].weight.value);
    const double bound = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    CHECK(w.cwiseAbs().maxCoeff() <= bound);
    CHECK(e1.blocks()[k].bias.value.isZero());
    CHECK(e1.blocks()[k].gamma.value.isOnes());
  }
}
