#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dsmgp/data.hpp"
#include "dsmgp/hyperopt.hpp"
#include "dsmgp/inference.hpp"
#include "dsmgp/rng.hpp"
#include "dsmgp/structure.hpp"

using namespace dsmgp;

namespace {

struct Problem {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  DsmgpGraph graph;
};

Problem make_problem(int n, const BuildConfig& cfg, std::uint64_t seed) {
  SplitRng rng(seed);
  Problem p;
  p.X.resize(n, 1);
  p.y.resize(n);
  for (int i = 0; i < n; ++i) {
    p.X(i, 0) = rng.uniform(0, 1);
    p.y(i) = std::sin(5.0 * p.X(i, 0)) + 0.1 * rng.normal();
  }
  BuildConfig c = cfg;
  c.seed = seed;
  c.leaf_hp = Hyperparameters::isotropic(1, 0.4, 1.0, 0.1);
  p.graph = build(p.X, c);
  return p;
}

BuildConfig small_cfg(int ks = 2) {
  BuildConfig c;
  c.sum_children = ks;
  c.product_children = 2;
  c.repetitions = 2;
  c.min_observations = 4;
  return c;
}

double rel_err(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return (a - b).lpNorm<Eigen::Infinity>() / std::max(1.0, b.lpNorm<Eigen::Infinity>());
}

}  // namespace

TEST_CASE("leaf gradient weights") {
  SECTION("single leaf gets weight 1") {
    BuildConfig cfg;
    cfg.min_observations = 1000;
    Problem p = make_problem(25, cfg, 1);
    log_marginal(p.graph, p.X, p.y);
    const Eigen::VectorXd w = leaf_gradient_weights(p.graph);
    REQUIRE(w.size() == 1);
    CHECK(w(0) == 1.0);
  }

  SECTION("sum over two leaves gives posterior responsibilities") {
    SplitRng rng(2);
    Eigen::MatrixXd X(18, 1);
    Eigen::VectorXd y(18);
    for (int i = 0; i < 18; ++i) {
      X(i, 0) = rng.uniform(0, 1);
      y(i) = std::sin(4 * X(i, 0)) + 0.05 * rng.normal();
    }
    DsmgpGraph g;
    Region r = Region::bounding_box(X);
    std::vector<int> all(18);
    std::iota(all.begin(), all.end(), 0);
    Node sum;
    sum.kind = NodeKind::sum;
    sum.children = {1, 2};
    sum.log_weights = {std::log(0.3), std::log(0.7)};
    g.nodes.push_back(sum);
    g.scope.push_back(r);
    g.data_idx.push_back(all);
    for (int k = 0; k < 2; ++k) {
      Node leaf;
      leaf.kind = NodeKind::leaf;
      leaf.hp = Hyperparameters::isotropic(1, k == 0 ? 0.15 : 0.8, 1.0, 0.1);
      g.nodes.push_back(leaf);
      g.scope.push_back(r);
      g.data_idx.push_back(all);
    }
    const double lm = log_marginal(g, X, y);
    const Eigen::VectorXd w = leaf_gradient_weights(g);
    // Hand Bayes oracle.
    const double l0 = g.nodes[1].posterior->lml, l1 = g.nodes[2].posterior->lml;
    const double r0 = 0.3 * std::exp(l0 - lm), r1 = 0.7 * std::exp(l1 - lm);
    CHECK(w(0) == Catch::Approx(r0).epsilon(1e-12));
    CHECK(w(1) == Catch::Approx(r1).epsilon(1e-12));
    CHECK(w.sum() == Catch::Approx(1.0).epsilon(1e-12));

    SECTION("posterior-weight form agrees") {
      posterior_update(g, X, y);
      const Eigen::VectorXd wp = leaf_gradient_weights(g);
      CHECK(wp(0) == Catch::Approx(w(0)).epsilon(1e-12));
      CHECK(wp(1) == Catch::Approx(w(1)).epsilon(1e-12));
    }
  }

  SECTION("first-order response to a leaf lml perturbation") {
    for (std::uint64_t seed = 10; seed < 14; ++seed) {
      Problem p = make_problem(40, small_cfg(), seed);
      const double base = log_marginal(p.graph, p.X, p.y);
      const Eigen::VectorXd w = leaf_gradient_weights(p.graph);
      const std::vector<int> leaves = p.graph.leaves();
      const double eps = 1e-6;
      for (std::size_t i = 0; i < leaves.size(); ++i) {
        DsmgpGraph g2 = p.graph;
        g2.nodes[static_cast<std::size_t>(leaves[i])].posterior->lml += eps;
        const double bumped = upward_pass(g2);
        const double fd = (bumped - base) / eps;
        CHECK(std::abs(fd - w(i)) <= 1e-4 * std::max(1.0, std::abs(w(i))));
      }
    }
  }

  SECTION("missing upward cache is a state error") {
    Problem p = make_problem(30, small_cfg(), 20);
    CHECK_THROWS_AS(leaf_gradient_weights(p.graph), StateError);
  }
}

TEST_CASE("global gradient") {
  const Hyperparameters shared = Hyperparameters::isotropic(1, 0.5, 1.2, 0.08);

  SECTION("single leaf equals the expert gradient") {
    BuildConfig cfg;
    cfg.min_observations = 1000;
    Problem p = make_problem(25, cfg, 30);
    const Eigen::VectorXd g = global_gradient(p.graph, p.X, p.y, shared);
    const Eigen::VectorXd expected = lml_grad(fit(p.X, p.y, shared));
    CHECK((g - expected).norm() == 0.0);
  }

  SECTION("K_S = 1 chain sums the leaf gradients") {
    Problem p = make_problem(60, small_cfg(1), 31);
    const Eigen::VectorXd g = global_gradient(p.graph, p.X, p.y, shared);
    Eigen::VectorXd expected = Eigen::VectorXd::Zero(shared.parameter_count());
    for (int id : p.graph.leaves()) {
      expected += lml_grad(*p.graph.nodes[static_cast<std::size_t>(id)].posterior);
    }
    CHECK(rel_err(g, expected) <= 1e-12);
  }

  SECTION("matches central finite differences of log_marginal") {
    for (std::uint64_t seed = 40; seed < 44; ++seed) {
      Problem p = make_problem(36, small_cfg(), seed);
      const Eigen::VectorXd g = global_gradient(p.graph, p.X, p.y, shared);
      const Eigen::VectorXd theta = shared.to_vector();
      Eigen::VectorXd fd(theta.size());
      const double h = 1e-5;
      for (int k = 0; k < theta.size(); ++k) {
        Eigen::VectorXd tp = theta, tm = theta;
        tp(k) += h;
        tm(k) -= h;
        for (int id : p.graph.leaves()) {
          p.graph.nodes[static_cast<std::size_t>(id)].hp = Hyperparameters::from_vector(tp);
        }
        const double fp = log_marginal(p.graph, p.X, p.y);
        for (int id : p.graph.leaves()) {
          p.graph.nodes[static_cast<std::size_t>(id)].hp = Hyperparameters::from_vector(tm);
        }
        const double fm = log_marginal(p.graph, p.X, p.y);
        fd(k) = (fp - fm) / (2 * h);
      }
      CHECK(rel_err(g, fd) <= 1e-4);
    }
  }
}

TEST_CASE("overlap similarity") {
  SECTION("disjoint leaves give the identity") {
    Problem p = make_problem(50, small_cfg(1), 50);  // K_S = 1: one partition
    const Eigen::MatrixXd S = overlap_similarity(p.graph);
    CHECK((S - Eigen::MatrixXd::Identity(S.rows(), S.cols())).norm() == 0.0);
  }

  SECTION("containment gives 1, and rows match brute-force set intersections") {
    Problem p = make_problem(60, small_cfg(3), 51);
    const Eigen::MatrixXd S = overlap_similarity(p.graph);
    const std::vector<int> leaves = p.graph.leaves();
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      CHECK(S(i, i) == 1.0);
      for (std::size_t j = 0; j < leaves.size(); ++j) {
        const auto& a = p.graph.data_idx[static_cast<std::size_t>(leaves[i])];
        const auto& b = p.graph.data_idx[static_cast<std::size_t>(leaves[j])];
        int count = 0;
        for (int u : a) {
          for (int v : b) count += (u == v);
        }
        CHECK(S(i, j) ==
              Catch::Approx(static_cast<double>(count) / a.size()).epsilon(1e-15));
        CHECK(S(i, j) >= 0.0);
        CHECK(S(i, j) <= 1.0);
      }
    }
  }
}

TEST_CASE("finetune gradient") {
  SECTION("all-ones S with tied parameters equals the global gradient exactly") {
    Problem p = make_problem(48, small_cfg(), 60);
    const Hyperparameters shared = Hyperparameters::isotropic(1, 0.5, 1.0, 0.1);
    const Eigen::VectorXd g = global_gradient(p.graph, p.X, p.y, shared);
    const std::vector<Hyperparameters> tied(p.graph.leaves().size(), shared);
    const Eigen::MatrixXd ones =
        Eigen::MatrixXd::Ones(static_cast<int>(tied.size()), static_cast<int>(tied.size()));
    const Eigen::MatrixXd rows = finetune_gradient(p.graph, p.X, p.y, tied, ones);
    for (int i = 0; i < rows.rows(); ++i) {
      CHECK((rows.row(i).transpose() - g).norm() == 0.0);  // exact, not approximate
    }
  }

  SECTION("identity S isolates each leaf's own weighted gradient") {
    Problem p = make_problem(48, small_cfg(), 61);
    std::vector<Hyperparameters> per_leaf;
    SplitRng rng(61);
    for (std::size_t i = 0; i < p.graph.leaves().size(); ++i) {
      per_leaf.push_back(
          Hyperparameters::isotropic(1, rng.uniform(0.3, 0.9), 1.0, rng.uniform(0.05, 0.2)));
    }
    const int L = static_cast<int>(per_leaf.size());
    const Eigen::MatrixXd rows = finetune_gradient(
        p.graph, p.X, p.y, per_leaf, Eigen::MatrixXd::Identity(L, L));
    const Eigen::VectorXd w = leaf_gradient_weights(p.graph);
    const std::vector<int> leaves = p.graph.leaves();
    for (int i = 0; i < L; ++i) {
      const Eigen::VectorXd expected =
          w(i) * lml_grad(*p.graph.nodes[static_cast<std::size_t>(leaves[i])].posterior);
      CHECK((rows.row(i).transpose() - expected).norm() == 0.0);
    }
  }

  SECTION("identity S matches finite differences of log_marginal per leaf") {
    Problem p = make_problem(30, small_cfg(), 62);
    std::vector<Hyperparameters> per_leaf(p.graph.leaves().size(),
                                          Hyperparameters::isotropic(1, 0.5, 1.0, 0.1));
    const int L = static_cast<int>(per_leaf.size());
    const Eigen::MatrixXd rows = finetune_gradient(
        p.graph, p.X, p.y, per_leaf, Eigen::MatrixXd::Identity(L, L));
    const std::vector<int> leaves = p.graph.leaves();
    const double h = 1e-5;
    for (int i = 0; i < L; ++i) {
      const Eigen::VectorXd theta = per_leaf[static_cast<std::size_t>(i)].to_vector();
      for (int k = 0; k < theta.size(); ++k) {
        auto eval = [&](double delta) {
          Eigen::VectorXd t = theta;
          t(k) += delta;
          for (int j = 0; j < L; ++j) {
            p.graph.nodes[static_cast<std::size_t>(leaves[j])].hp =
                (j == i) ? Hyperparameters::from_vector(t) : per_leaf[static_cast<std::size_t>(j)];
          }
          return log_marginal(p.graph, p.X, p.y);
        };
        const double fd = (eval(h) - eval(-h)) / (2 * h);
        CHECK(std::abs(rows(i, k) - fd) <= 1e-4 * std::max(1.0, std::abs(fd)));
      }
    }
  }

  SECTION("two-leaf case with S12 = 0.5 matches the explicit summation oracle") {
    SplitRng rng(63);
    Eigen::MatrixXd X(16, 1);
    Eigen::VectorXd y(16);
    for (int i = 0; i < 16; ++i) {
      X(i, 0) = rng.uniform(0, 1);
      y(i) = rng.normal();
    }
    DsmgpGraph g;
    Region r = Region::bounding_box(X);
    std::vector<int> all(16);
    std::iota(all.begin(), all.end(), 0);
    Node sum;
    sum.kind = NodeKind::sum;
    sum.children = {1, 2};
    sum.log_weights = {-std::log(2.0), -std::log(2.0)};
    g.nodes.push_back(sum);
    g.scope.push_back(r);
    g.data_idx.push_back(all);
    for (int k = 0; k < 2; ++k) {
      Node leaf;
      leaf.kind = NodeKind::leaf;
      g.nodes.push_back(leaf);
      g.scope.push_back(r);
      g.data_idx.push_back(all);
    }
    std::vector<Hyperparameters> per_leaf = {Hyperparameters::isotropic(1, 0.3, 1.0, 0.1),
                                             Hyperparameters::isotropic(1, 0.9, 0.8, 0.2)};
    Eigen::MatrixXd S(2, 2);
    S << 1.0, 0.5, 0.5, 1.0;
    const Eigen::MatrixXd rows = finetune_gradient(g, X, y, per_leaf, S);

    const Eigen::VectorXd w = leaf_gradient_weights(g);
    // Explicit summation: row 0 = S00 w0 grad0(theta0) + S01 w1 grad1(theta0).
    const Eigen::VectorXd g00 = lml_grad(*g.nodes[1].posterior);
    const Eigen::VectorXd g11 = lml_grad(*g.nodes[2].posterior);
    const Eigen::VectorXd g10 = lml_grad(fit(X, y, per_leaf[0]));  // leaf 2 data == all
    const Eigen::VectorXd g01 = lml_grad(fit(X, y, per_leaf[1]));
    const Eigen::VectorXd row0 = 1.0 * w(0) * g00 + 0.5 * w(1) * g10;
    const Eigen::VectorXd row1 = 0.5 * w(0) * g01 + 1.0 * w(1) * g11;
    CHECK((rows.row(0).transpose() - row0).norm() <= 1e-12 * std::max(1.0, row0.norm()));
    CHECK((rows.row(1).transpose() - row1).norm() <= 1e-12 * std::max(1.0, row1.norm()));
  }

  SECTION("dimension mismatch in S") {
    Problem p = make_problem(30, small_cfg(), 64);
    std::vector<Hyperparameters> per_leaf(p.graph.leaves().size(),
                                          Hyperparameters::isotropic(1));
    CHECK_THROWS_AS(finetune_gradient(p.graph, p.X, p.y, per_leaf, Eigen::MatrixXd::Ones(2, 2)),
                    UsageError);
  }
}

TEST_CASE("rmsprop optimization") {
  SECTION("toy sine, global mode: final log marginal at least the initial one") {
    Problem p = make_problem(80, small_cfg(), 70);
    DsmgpGraph fresh = p.graph;
    const double initial = log_marginal(fresh, p.X, p.y);
    RmspropOptions opt;
    opt.iterations = 40;
    const OptimizeResult res = optimize(p.graph, p.X, p.y, OptimizeMode::global, opt);
    CHECK_FALSE(res.aborted);
    CHECK(res.best_log_marginal >= initial);
    // Returned graph carries the best parameters.
    const double final_lm = log_marginal(p.graph, p.X, p.y);
    CHECK(final_lm == Catch::Approx(res.best_log_marginal).epsilon(1e-12));
  }

  SECTION("zero learning rate leaves parameters unchanged") {
    Problem p = make_problem(40, small_cfg(), 71);
    const Hyperparameters before = p.graph.nodes[p.graph.leaves()[0]].hp;
    RmspropOptions opt;
    opt.iterations = 5;
    opt.step = 0.0;
    optimize(p.graph, p.X, p.y, OptimizeMode::global, opt);
    const Hyperparameters after = p.graph.nodes[p.graph.leaves()[0]].hp;
    CHECK(after == before);
  }

  SECTION("same seed and settings are bit-reproducible") {
    RmspropOptions opt;
    opt.iterations = 15;
    Problem a = make_problem(60, small_cfg(), 72);
    Problem b = make_problem(60, small_cfg(), 72);
    const OptimizeResult ra = optimize(a.graph, a.X, a.y, OptimizeMode::global, opt);
    const OptimizeResult rb = optimize(b.graph, b.X, b.y, OptimizeMode::global, opt);
    CHECK(ra.best_log_marginal == rb.best_log_marginal);
    CHECK(ra.best_shared.to_vector() == rb.best_shared.to_vector());
    REQUIRE(ra.trace.size() == rb.trace.size());
    for (std::size_t i = 0; i < ra.trace.size(); ++i) {
      CHECK(ra.trace[i].log_marginal == rb.trace[i].log_marginal);
    }
  }

  SECTION("fine-tuning on heteroscedastic data tracks local noise (per-leaf ML oracle)") {
    const Dataset data = synth_hetero(300, 5);
    BuildConfig cfg;
    cfg.sum_children = 2;
    cfg.product_children = 4;
    cfg.repetitions = 1;
    cfg.min_observations = 20;
    cfg.seed = 5;
    cfg.leaf_hp = Hyperparameters::isotropic(1, 0.3, 1.0, 0.1);
    DsmgpGraph g = build(data.X, cfg);

    RmspropOptions opt;
    opt.iterations = 120;
    optimize(g, data.X, data.y, OptimizeMode::finetune, opt);

    // Oracle: per-leaf maximum-likelihood noise via a 1-D grid scan, all
    // other parameters fixed at the initial values.
    const std::vector<int> leaves = g.leaves();
    std::vector<double> learned, oracle;
    for (int id : leaves) {
      const auto& idx = g.data_idx[static_cast<std::size_t>(id)];
      Eigen::MatrixXd Xl(static_cast<Eigen::Index>(idx.size()), 1);
      Eigen::VectorXd yl(static_cast<Eigen::Index>(idx.size()));
      for (std::size_t i = 0; i < idx.size(); ++i) {
        Xl(static_cast<Eigen::Index>(i), 0) = data.X(idx[i], 0);
        yl(static_cast<Eigen::Index>(i)) = data.y(idx[i]);
      }
      double best = -1e300, best_ln = 0.0;
      for (double ln = std::log(1e-4); ln <= std::log(1.0); ln += 0.05) {
        Hyperparameters hp = cfg.leaf_hp;
        hp.log_noise_var = ln;
        const double v = fit(Xl, yl, hp).lml;
        if (v > best) {
          best = v;
          best_ln = ln;
        }
      }
      learned.push_back(g.nodes[static_cast<std::size_t>(id)].hp.log_noise_var);
      oracle.push_back(best_ln);
    }
    // The leaf the oracle marks noisiest must have learned more noise than
    // the one it marks quietest, i.e. the orderings agree at the extremes.
    const auto lo = std::min_element(oracle.begin(), oracle.end()) - oracle.begin();
    const auto hi = std::max_element(oracle.begin(), oracle.end()) - oracle.begin();
    REQUIRE(oracle[hi] - oracle[lo] > std::log(4.0));  // real heteroscedasticity
    CHECK(learned[hi] > learned[lo]);
    // Noise parameters genuinely differ across regions after fine-tuning.
    CHECK(learned[hi] - learned[lo] > std::log(2.0));
  }
}
