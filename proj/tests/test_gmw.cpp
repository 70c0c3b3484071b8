#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "edgedepth/gmw.hpp"
#include "edgedepth/synth.hpp"
#include "oracles.hpp"

using namespace edgedepth;

namespace {

Eigen::MatrixXd random_cost(Index m, std::mt19937_64& rng) {
  return oracle::random_matrix(m, m, rng, 0, 1);
}

double max_marginal_error(const Eigen::MatrixXd& p) {
  return std::max((p.rowwise().sum().array() - 1).abs().maxCoeff(),
                  (p.colwise().sum().array() - 1).abs().maxCoeff());
}

SinkhornConfig log_path(SinkhornConfig cfg) {
  cfg.scaling_range = -1;
  return cfg;
}

// Templates start at 10 keypoints; smaller objects keep the first few.
std::vector<EdgeSample> small_samples(Index count, Index keypoints, std::uint64_t seed) {
  SceneConfig scene;
  scene.keypoints = std::max<Index>(keypoints, 10);
  std::vector<EdgeSample> out;
  for (auto inst : generate_instances(scene, count, seed)) {
    const auto n = static_cast<std::size_t>(keypoints);
    inst.keypoints.resize(n);
    inst.pixels.resize(n);
    inst.keypoints_clean.resize(n);
    inst.pixels_clean.resize(n);
    out.push_back(make_sample(inst, SelectionConfig{}));
  }
  return out;
}

GmwConfig small_gmw(Index layers = 2, Index width = 5) {
  GmwConfig cfg;
  cfg.encoder2d = {4, layers, width, width};
  cfg.encoder3d = {6, layers, width, width};
  cfg.sinkhorn.max_iters = 15;
  cfg.sinkhorn.tol = 0;
  return cfg;
}

}  // namespace

TEST_CASE("build_graphs: canonical edges and concatenated endpoints") {
  SceneConfig scene;
  scene.keypoints = 10;
  auto inst = generate_instances(scene, 1, 3).front();
  inst.keypoints.resize(3);
  inst.pixels.resize(3);
  inst.keypoints_clean.clear();
  inst.pixels_clean.clear();
  const auto [g2, g3] = build_graphs(inst);
  const std::vector<std::pair<int, int>> want{{0, 1}, {0, 2}, {1, 2}};
  CHECK(g2.edges == want);
  CHECK(g3.edges == want);
  CHECK(g2.features.cols() == 4);
  CHECK(g3.features.cols() == 6);
  const auto n0 = normalize(inst.camera, inst.pixels[0]);
  const auto n2 = normalize(inst.camera, inst.pixels[2]);
  CHECK(g2.features.row(1) == Eigen::RowVector4d(n0.u(), n0.v(), n2.u(), n2.v()));
  CHECK(g3.features.row(2).head<3>() == inst.keypoints[1].position.transpose());
  CHECK(g3.features.row(2).tail<3>() == inst.keypoints[2].position.transpose());

  scene.keypoints = 73;
  const auto big = generate_instances(scene, 1, 3).front();
  CHECK(build_graphs(big).first.edge_count() == 2628);

  // Storage order does not matter, semantic indices do.
  auto shuffled = big;
  std::mt19937_64 rng(2);
  std::vector<std::size_t> perm(big.keypoints.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  for (std::size_t k = 0; k < perm.size(); ++k) {
    shuffled.keypoints[k] = big.keypoints[perm[k]];
    shuffled.pixels[k] = big.pixels[perm[k]];
    shuffled.keypoints_clean[k] = big.keypoints_clean[perm[k]];
    shuffled.pixels_clean[k] = big.pixels_clean[perm[k]];
  }
  const auto a = build_graphs(big);
  const auto b = build_graphs(shuffled);
  CHECK(a.first.edges == b.first.edges);
  CHECK(a.first.features == b.first.features);
  CHECK(a.second.features == b.second.features);
}

TEST_CASE("cost_matrix") {
  std::mt19937_64 rng(4);
  const Eigen::MatrixXd f = oracle::unit_rows(oracle::random_matrix(5, 3, rng));
  CHECK(cost_matrix(f, f).diagonal().cwiseAbs().maxCoeff() == 0.0);

  Eigen::MatrixXd a(2, 2), b(2, 2);
  a << 1, 0, 0, 1;
  b << 0, 1, 1, 0;
  const auto m = cost_matrix(a, b);
  CHECK(m(0, 0) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));
  CHECK(m(1, 1) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));

  const Eigen::MatrixXd x = oracle::unit_rows(oracle::random_matrix(3, 2, rng));
  const Eigen::MatrixXd y = oracle::unit_rows(oracle::random_matrix(3, 2, rng));
  const auto c = cost_matrix(x, y);
  for (Index s = 0; s < 3; ++s) {
    for (Index t = 0; t < 3; ++t) CHECK(std::abs(c(s, t) - oracle::pairwise_distance(x, y, s, t)) < 1e-12);
  }
  CHECK((cost_diagonal(x, y) - c.diagonal()).norm() == 0.0);
  CHECK_THROWS_AS(cost_matrix(x, Eigen::MatrixXd(2, 2)), Error);
}

TEST_CASE("cost_matrix_backward matches finite differences") {
  std::mt19937_64 rng(8);
  const Eigen::MatrixXd a = oracle::unit_rows(oracle::random_matrix(4, 3, rng));
  const Eigen::MatrixXd b = oracle::unit_rows(oracle::random_matrix(4, 3, rng));
  const Eigen::MatrixXd g = oracle::random_matrix(4, 4, rng);
  const auto loss = [&](const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
    return (cost_matrix(x, y).array() * g.array()).sum();
  };
  const auto [da, db] = cost_matrix_backward(a, b, cost_matrix(a, b), g);
  const double h = 1e-6;
  for (Index r = 0; r < 4; ++r) {
    for (Index c = 0; c < 3; ++c) {
      Eigen::MatrixXd ap = a, am = a, bp = b, bm = b;
      ap(r, c) += h;
      am(r, c) -= h;
      bp(r, c) += h;
      bm(r, c) -= h;
      CHECK(std::abs((loss(ap, b) - loss(am, b)) / (2 * h) - da(r, c)) < 1e-7);
      CHECK(std::abs((loss(a, bp) - loss(a, bm)) / (2 * h) - db(r, c)) < 1e-7);
    }
  }
}

TEST_CASE("sinkhorn: constant cost gives the uniform plan") {
  const auto r = sinkhorn(Eigen::MatrixXd::Constant(6, 6, 0.7), SinkhornConfig{});
  CHECK(r.converged);
  CHECK((r.P.array() - 1.0 / 6).abs().maxCoeff() < 1e-12);
}

TEST_CASE("sinkhorn: 2x2 matches plain fixed-point scaling") {
  Eigen::Matrix2d m;
  m << 0, 10, 10, 0;
  SinkhornConfig cfg;
  cfg.alpha = 0.1;
  const auto r = sinkhorn(m, cfg);
  CHECK((r.P - Eigen::Matrix2d::Identity()).cwiseAbs().maxCoeff() < 1e-3);

  // A softer 2x2 where the plain-arithmetic kernel does not underflow.
  Eigen::Matrix2d soft;
  soft << 0.1, 0.3, 0.25, 0.05;
  const auto want = oracle::plain_sinkhorn({{0.1, 0.3}, {0.25, 0.05}}, 0.1, 500);
  const auto got = sinkhorn(soft, cfg);
  for (int s = 0; s < 2; ++s) {
    for (int t = 0; t < 2; ++t) CHECK(std::abs(got.P(s, t) - want[s][t]) < 1e-12);
  }
}

TEST_CASE("sinkhorn: plain oracle on random 5x5, both evaluation paths") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::MatrixXd m = random_cost(5, rng);
    std::vector<std::vector<double>> c(5, std::vector<double>(5));
    for (int s = 0; s < 5; ++s) {
      for (int t = 0; t < 5; ++t) c[s][t] = m(s, t);
    }
    SinkhornConfig cfg;
    cfg.alpha = 0.2;
    cfg.max_iters = 1000;
    cfg.tol = 0;  // same iteration count as the oracle
    const auto want = oracle::plain_sinkhorn(c, 0.2, 1000);
    for (const auto& run : {cfg, log_path(cfg)}) {
      const auto got = sinkhorn(m, run);
      CHECK(got.marginal_error < 1e-14);
      for (int s = 0; s < 5; ++s) {
        for (int t = 0; t < 5; ++t) CHECK(std::abs(got.P(s, t) - want[s][t]) < 1e-10);
      }
    }
  }
}

TEST_CASE("sinkhorn: marginals, positivity and flagged non-convergence") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const auto r = sinkhorn(random_cost(20, rng), SinkhornConfig{});
    REQUIRE(r.converged);
    CHECK(max_marginal_error(r.P) < 1e-9);
    CHECK((r.P.array() > 0).all());
  }
  SinkhornConfig tight;
  tight.alpha = 0.01;
  tight.max_iters = 3;
  const auto r = sinkhorn(random_cost(20, rng), tight);
  CHECK_FALSE(r.converged);
  CHECK(r.iterations == 3);
  CHECK(r.marginal_error > tight.tol);
  // Columns are exact after the final column pass even when unconverged.
  CHECK((r.P.colwise().sum().array() - 1).abs().maxCoeff() < 1e-12);

  CHECK_THROWS_AS(sinkhorn(Eigen::MatrixXd(2, 3), SinkhornConfig{}), Error);
  SinkhornConfig bad;
  bad.alpha = 0;
  CHECK_THROWS_AS(sinkhorn(Eigen::MatrixXd::Zero(2, 2), bad), Error);
}

TEST_CASE("sinkhorn: small alpha recovers the brute-force assignment") {
  std::mt19937_64 rng(14);
  int agree = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const Index m = 3 + trial % 4;
    const Eigen::MatrixXd cost = random_cost(m, rng);
    SinkhornConfig cfg;
    cfg.alpha = 0.005;
    cfg.max_iters = 5000;
    cfg.keep_history = false;
    cfg.newton_steps = 50;
    const auto r = sinkhorn(cost, cfg);
    CHECK(r.converged);
    const auto best = oracle::min_cost_permutation(cost);
    bool same = true;
    for (Index s = 0; s < m; ++s) {
      Index arg;
      r.P.row(s).maxCoeff(&arg);
      same = same && arg == best[s];
    }
    agree += same;
  }
  CHECK(agree >= 49);
}

TEST_CASE("sinkhorn: newton refinement and history options") {
  std::mt19937_64 rng(16);
  const Eigen::MatrixXd cost = random_cost(6, rng);
  SinkhornConfig cfg;
  cfg.alpha = 0.02;
  cfg.max_iters = 50;
  cfg.tol = 1e-12;
  cfg.keep_history = false;
  const auto plain = sinkhorn(cost, cfg);
  CHECK(plain.f_hist.empty());
  CHECK_FALSE(plain.converged);
  CHECK_THROWS_AS(sinkhorn_backward(cost, plain, cfg, Eigen::MatrixXd::Ones(6, 6).eval()), Error);

  cfg.newton_steps = 30;
  const auto polished = sinkhorn(cost, cfg);
  CHECK(polished.converged);
  CHECK(polished.iterations == 50);
  CHECK(max_marginal_error(polished.P) < 1e-11);

  // Matches the plain fixed point once that is reached.
  SinkhornConfig slow = cfg;
  slow.newton_steps = 0;
  slow.max_iters = 2000000;
  const auto reference = sinkhorn(cost, slow);
  REQUIRE(reference.converged);
  CHECK((reference.P - polished.P).cwiseAbs().maxCoeff() < 1e-9);

  cfg.keep_history = true;
  CHECK_THROWS_AS(sinkhorn(cost, cfg), Error);
}

TEST_CASE("sinkhorn: dual objective is non-decreasing and meets the primal") {
  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::MatrixXd m = random_cost(6, rng);
    SinkhornConfig cfg;
    cfg.alpha = 0.1;
    cfg.max_iters = 500;
    cfg.tol = 1e-12;
    const auto r = sinkhorn(m, cfg);
    double prev = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < r.iterations; ++k) {
      const auto& g_next = k + 1 < r.iterations ? r.g_hist[k + 1] : r.g;
      const double half = sinkhorn_dual(m, r.f_hist[k], r.g_hist[k], cfg.alpha);
      const double full = sinkhorn_dual(m, r.f_hist[k], g_next, cfg.alpha);
      CHECK(half >= prev - 1e-9);
      CHECK(full >= half - 1e-9);
      prev = full;
    }
    const double primal = sinkhorn_objective(m, r.P, cfg.alpha);
    CHECK(std::abs(primal - sinkhorn_dual(m, r.f, r.g, cfg.alpha)) < 1e-9);
  }
}

TEST_CASE("sinkhorn_backward matches finite differences on both paths") {
  std::mt19937_64 rng(16);
  const Eigen::MatrixXd m = random_cost(5, rng);
  const Eigen::MatrixXd g = oracle::random_matrix(5, 5, rng);
  SinkhornConfig cfg;
  cfg.alpha = 0.1;
  cfg.max_iters = 25;
  cfg.tol = 0;
  for (const auto& run : {cfg, log_path(cfg)}) {
    const auto loss = [&](const Eigen::MatrixXd& c) {
      return (sinkhorn(c, run).P.array() * g.array()).sum();
    };
    const auto r = sinkhorn(m, run);
    CHECK(r.iterations == 25);
    const Eigen::MatrixXd d = sinkhorn_backward(m, r, run, g);
    const double h = 1e-6;
    for (Index s = 0; s < 5; ++s) {
      for (Index t = 0; t < 5; ++t) {
        Eigen::MatrixXd p = m, q = m;
        p(s, t) += h;
        q(s, t) -= h;
        const double fd = (loss(p) - loss(q)) / (2 * h);
        CHECK(std::abs(fd - d(s, t)) < 1e-6 * (1 + std::abs(fd)));
      }
    }
  }
}

TEST_CASE("sinkhorn: scaled-kernel and log-domain paths agree") {
  std::mt19937_64 rng(17);
  const Eigen::MatrixXd m = random_cost(40, rng) * 2;
  const Eigen::MatrixXd g = oracle::random_matrix(40, 40, rng);
  SinkhornConfig cfg;
  cfg.max_iters = 30;
  cfg.tol = 0;
  const auto fast = sinkhorn(m, cfg);
  const auto slow = sinkhorn(m, log_path(cfg));
  CHECK((fast.P - slow.P).cwiseAbs().maxCoeff() < 1e-13);
  const Eigen::MatrixXd dfast = sinkhorn_backward(m, fast, cfg, g);
  const Eigen::MatrixXd dslow = sinkhorn_backward(m, slow, log_path(cfg), g);
  CHECK((dfast - dslow).cwiseAbs().maxCoeff() < 1e-10 * (1 + dslow.cwiseAbs().maxCoeff()));
}

TEST_CASE("sinkhorn: wide kernels stay finite in the log domain") {
  std::mt19937_64 rng(18);
  SinkhornConfig cfg;
  cfg.alpha = 1e-3;  // kernel range ~ 2000 nats: exp would underflow
  const auto r = sinkhorn(random_cost(30, rng) * 2, cfg);
  CHECK(r.P.allFinite());
  CHECK((r.P.colwise().sum().array() - 1).abs().maxCoeff() < 1e-12);
}

TEST_CASE("weights_from_cost") {
  const auto eq = weights_from_cost(Eigen::VectorXd::Constant(8, 0.3), 1e-6, 1);
  CHECK((eq.array() - 1.0 / 8).abs().maxCoeff() < 1e-15);

  Eigen::VectorXd d = Eigen::VectorXd::Ones(5);
  d[2] = 0;
  const auto w = weights_from_cost(d, 1e-6, 1);
  CHECK(w[2] > 1 - 1e-3);

  std::mt19937_64 rng(19);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::VectorXd diag = oracle::random_matrix(50, 1, rng, 0, 2);
    const auto v = weights_from_cost(diag, 1e-6, 0.5 + trial);
    CHECK(std::abs(v.sum() - 1) < 1e-12);
    CHECK((v.array() >= 0).all());
  }
}

TEST_CASE("weights_from_cost_backward matches finite differences") {
  std::mt19937_64 rng(20);
  const Eigen::VectorXd d = oracle::random_matrix(6, 1, rng, 0.5, 2);
  const Eigen::VectorXd dw = oracle::random_matrix(6, 1, rng);
  const double eps = 1e-6, temp = 0.7;
  const auto w = weights_from_cost(d, eps, temp);
  const auto grad = weights_from_cost_backward(d, w, dw, eps, temp);
  for (Index s = 0; s < 6; ++s) {
    Eigen::VectorXd p = d, q = d;
    p[s] += 1e-6;
    q[s] -= 1e-6;
    const double fd = (weights_from_cost(p, eps, temp).dot(dw) -
                       weights_from_cost(q, eps, temp).dot(dw)) / 2e-6;
    CHECK(std::abs(fd - grad[s]) < 1e-8);
  }
}

TEST_CASE("matching_losses") {
  const double eps = 1e-7;
  const auto ident = matching_losses(Eigen::MatrixXd::Identity(4, 4), 10, 10, 1, eps);
  CHECK(ident.classification <= 16 * 2 * eps);
  CHECK(ident.classification >= 0);
  CHECK(ident.regression == 0);

  Eigen::Matrix2d p;
  p << 0.7, 0.2, 0.4, 0.9;
  const auto l = matching_losses(p, 12.5, 11.0, 0.5, eps);
  const double bce = -std::log(0.7) - std::log(1 - 0.2) - std::log(1 - 0.4) - std::log(0.9);
  CHECK(std::abs(l.classification - bce) < 1e-12);
  CHECK(std::abs(l.classification - oracle::bce_identity(p, eps)) < 1e-12);
  CHECK(l.regression == 1.5);
  CHECK(std::abs(l.total - (bce + 0.75)) < 1e-12);

  const Eigen::MatrixXd grad = classification_loss_grad(p, eps);
  for (Index s = 0; s < 2; ++s) {
    for (Index t = 0; t < 2; ++t) {
      Eigen::Matrix2d a = p, b = p;
      a(s, t) += 1e-7;
      b(s, t) -= 1e-7;
      const double fd =
          (oracle::bce_identity(a, eps) - oracle::bce_identity(b, eps)) / 2e-7;
      CHECK(std::abs(fd - grad(s, t)) < 1e-6);
    }
  }
  CHECK_THROWS_AS(matching_losses(Eigen::MatrixXd(2, 3), 0, 0, 1), Error);
}

TEST_CASE("edge permutations permute the cost matrix and the weights") {
  auto samples = small_samples(1, 8, 21);
  EdgeSample sample = samples.front();
  sample.selected.resize(sample.candidates.size());
  std::iota(sample.selected.begin(), sample.selected.end(), Index{0});
  GmwModel model(small_gmw(3, 8), 5);
  const auto [a, c] = model.features(sample, nn::Mode::Eval);
  const Eigen::MatrixXd cost = cost_matrix(a, c);
  const auto w = model.weights(sample);

  const Index m = sample.edge_count();
  std::vector<Index> perm(static_cast<std::size_t>(m));
  std::iota(perm.begin(), perm.end(), Index{0});
  std::mt19937_64 rng(1);
  std::shuffle(perm.begin(), perm.end(), rng);
  EdgeSample shuffled = sample;
  for (Index s = 0; s < m; ++s) {
    shuffled.features2d.row(s) = sample.features2d.row(perm[s]);
    shuffled.features3d.row(s) = sample.features3d.row(perm[s]);
    shuffled.candidates[s] = sample.candidates[perm[s]];
  }
  const auto [pa, pc] = model.features(shuffled, nn::Mode::Eval);
  const Eigen::MatrixXd pcost = cost_matrix(pa, pc);
  const auto pw = model.weights(shuffled);
  for (Index s = 0; s < m; ++s) {
    CHECK(std::abs(pw[s] - w[perm[s]]) < 1e-12);
    for (Index t = 0; t < m; ++t) CHECK(std::abs(pcost(s, t) - cost(perm[s], perm[t])) < 1e-12);
  }
}

TEST_CASE("end-to-end matching loss gradient matches finite differences") {
  const auto samples = small_samples(2, 6, 22);
  for (const auto rule : {WeightRule::InverseDiagCost, WeightRule::AssignmentDiag}) {
    auto cfg = small_gmw(2, 6);
    cfg.weights.rule = rule;
    cfg.weights.temperature = 20;  // keeps the softmax away from one-hot
    GmwModel model(cfg, 9);
    const auto params = model.params();
    std::vector<const EdgeSample*> batch{&samples[0], &samples[1]};
    const auto loss = [&] { return model.forward_backward(batch, nn::Mode::Eval, 1.0, false).total; };
    const auto analytic = [&] {
      params.zero_grad();
      model.forward_backward(batch, nn::Mode::Eval, 1.0, true);
    };
    nn::GradCheckConfig gc;
    gc.samples = 400;
    const auto res = nn::grad_check(params, loss, analytic, gc);
    CHECK(res.checked == std::min<Index>(400, params.scalar_count()));
    CHECK(res.max_rel_error < 1e-4);
  }
}

TEST_CASE("model weights are a distribution over the selection") {
  const auto samples = small_samples(3, 16, 23);
  GmwModel model(small_gmw(), 1);
  for (const auto& s : samples) {
    const auto w = model.weights(s);
    CHECK(w.size() == static_cast<Index>(s.selected.size()));
    CHECK(std::abs(w.sum() - 1) < 1e-12);
    const double z = model.fused_depth(s);
    const auto depths = s.selected_depths();
    CHECK(z >= depths.minCoeff() - 1e-12);
    CHECK(z <= depths.maxCoeff() + 1e-12);
  }
}
