#pragma once

#include <Eigen/Core>
#include <chrono>
#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "dsmgp/common.hpp"
#include "dsmgp/gp.hpp"
#include "dsmgp/inference.hpp"
#include "dsmgp/structure.hpp"

namespace dsmgp {

/// Per-leaf gradient coefficients of the model log marginal likelihood with
/// respect to each leaf's own log likelihood: the product of posterior
/// responsibilities w * value(child) / value(sum) along the root-to-leaf
/// path (sibling terms at products cancel exactly). Entries follow
/// g.leaves() order. Requires a cached upward pass consistent with the
/// current weights, except after posterior_update, where the stored
/// weights already are the responsibilities.
inline Eigen::VectorXd leaf_gradient_weights(const DsmgpGraph& g) {
  if (!g.posterior_weights && !g.upward_cached) {
    throw StateError("leaf_gradient_weights: upward pass values are not cached");
  }
  const std::vector<int> leaf_ids = g.leaves();
  std::unordered_map<int, int> leaf_pos;
  for (std::size_t i = 0; i < leaf_ids.size(); ++i) leaf_pos[leaf_ids[i]] = static_cast<int>(i);

  Eigen::VectorXd grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(leaf_ids.size()));
  auto rec = [&](auto&& self, int id, double signal) -> void {
    const Node& nd = g.nodes[static_cast<std::size_t>(id)];
    switch (nd.kind) {
      case NodeKind::leaf:
        grad(leaf_pos.at(id)) = std::exp(signal);
        return;
      case NodeKind::product:
        for (int c : nd.children) self(self, c, signal);
        return;
      case NodeKind::sum:
        for (std::size_t k = 0; k < nd.children.size(); ++k) {
          double edge = nd.log_weights[k];
          if (!g.posterior_weights) {
            edge += g.log_value[static_cast<std::size_t>(nd.children[k])] -
                    g.log_value[static_cast<std::size_t>(id)];
          }
          self(self, nd.children[k], signal + edge);
        }
        return;
    }
  };
  rec(rec, g.root, 0.0);
  return grad;
}

/// Gradient of log p(y | X) with respect to one shared hyperparameter
/// vector: sum over leaves of gradient-weight times the leaf's local lml
/// gradient. Sets every leaf to `shared`, refits, and runs the upward pass.
inline Eigen::VectorXd global_gradient(DsmgpGraph& g, const Eigen::MatrixXd& X,
                                       const Eigen::VectorXd& y, const Hyperparameters& shared,
                                       const InferenceOptions& opts = {},
                                       double* log_marginal_out = nullptr) {
  for (int id : g.leaves()) g.nodes[static_cast<std::size_t>(id)].hp = shared;
  fit_leaves(g, X, y, opts);
  const double lm = upward_pass(g);
  if (log_marginal_out != nullptr) *log_marginal_out = lm;
  const Eigen::VectorXd weights = leaf_gradient_weights(g);
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(shared.parameter_count());
  const std::vector<int> leaf_ids = g.leaves();
  for (std::size_t i = 0; i < leaf_ids.size(); ++i) {
    const Node& nd = g.nodes[static_cast<std::size_t>(leaf_ids[i])];
    grad += weights(static_cast<Eigen::Index>(i)) * lml_grad(*nd.posterior);
  }
  return grad;
}

/// Similarity matrix of normalized data overlaps,
/// S_ij = |D_i intersect D_j| / |D_i| (not symmetric in general). An empty
/// leaf gets S_ii = 1 and zeros elsewhere in its row.
inline Eigen::MatrixXd overlap_similarity(const DsmgpGraph& g) {
  const std::vector<int> leaf_ids = g.leaves();
  const int L = static_cast<int>(leaf_ids.size());
  std::vector<std::vector<int>> sorted(static_cast<std::size_t>(L));
  for (int i = 0; i < L; ++i) {
    sorted[static_cast<std::size_t>(i)] = g.data_idx[static_cast<std::size_t>(leaf_ids[i])];
    std::sort(sorted[static_cast<std::size_t>(i)].begin(), sorted[static_cast<std::size_t>(i)].end());
  }
  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(L, L);
  for (int i = 0; i < L; ++i) {
    const auto& a = sorted[static_cast<std::size_t>(i)];
    if (a.empty()) {
      S(i, i) = 1.0;
      continue;
    }
    for (int j = 0; j < L; ++j) {
      const auto& b = sorted[static_cast<std::size_t>(j)];
      std::size_t ai = 0, bi = 0, inter = 0;
      while (ai < a.size() && bi < b.size()) {
        if (a[ai] < b[bi]) ++ai;
        else if (b[bi] < a[ai]) ++bi;
        else { ++inter; ++ai; ++bi; }
      }
      S(i, j) = static_cast<double>(inter) / static_cast<double>(a.size());
    }
  }
  return S;
}

/// Similarity-constrained per-leaf gradients: row i is
/// sum_j S_ij * grad_weight_j * d lml_j(theta_j := theta_i) / d theta —
/// leaf j's local gradient evaluated at leaf i's parameters. With S = I
/// this is the true gradient of log p(y | X) with respect to theta_i; with
/// all-ones S and tied parameters every row equals the shared gradient.
/// Sets leaf hyperparameters from `per_leaf`, refits, and runs the upward
/// pass. Rows follow g.leaves() order.
inline Eigen::MatrixXd finetune_gradient(DsmgpGraph& g, const Eigen::MatrixXd& X,
                                         const Eigen::VectorXd& y,
                                         const std::vector<Hyperparameters>& per_leaf,
                                         const Eigen::MatrixXd& S,
                                         const InferenceOptions& opts = {},
                                         double* log_marginal_out = nullptr) {
  const std::vector<int> leaf_ids = g.leaves();
  const int L = static_cast<int>(leaf_ids.size());
  if (static_cast<int>(per_leaf.size()) != L) {
    throw UsageError("finetune_gradient: one hyperparameter set per leaf required");
  }
  if (S.rows() != L || S.cols() != L) {
    throw UsageError("finetune_gradient: similarity matrix must be #L x #L");
  }
  for (int i = 0; i < L; ++i) {
    g.nodes[static_cast<std::size_t>(leaf_ids[i])].hp = per_leaf[static_cast<std::size_t>(i)];
  }
  InferenceOptions fit_opts = opts;
  fit_opts.use_sharing = false;  // distinct kernels invalidate factor reuse
  fit_leaves(g, X, y, fit_opts);
  const double lm = upward_pass(g);
  if (log_marginal_out != nullptr) *log_marginal_out = lm;
  const Eigen::VectorXd weights = leaf_gradient_weights(g);

  const int P = per_leaf.empty() ? 2 : per_leaf[0].parameter_count();
  Eigen::MatrixXd grads = Eigen::MatrixXd::Zero(L, P);
  for (int i = 0; i < L; ++i) {
    Eigen::VectorXd row = Eigen::VectorXd::Zero(P);
    for (int j = 0; j < L; ++j) {
      if (S(i, j) == 0.0) continue;
      const Node& leaf_j = g.nodes[static_cast<std::size_t>(leaf_ids[j])];
      Eigen::VectorXd gj;
      if (per_leaf[static_cast<std::size_t>(j)] == per_leaf[static_cast<std::size_t>(i)]) {
        gj = lml_grad(*leaf_j.posterior);
      } else {
        // Leaf j refitted at leaf i's parameters.
        const GpPosterior sub =
            fit(leaf_j.posterior->X, leaf_j.posterior->y, per_leaf[static_cast<std::size_t>(i)]);
        gj = lml_grad(sub);
      }
      row += S(i, j) * weights(j) * gj;
    }
    grads.row(i) = row;
  }
  return grads;
}

struct RmspropOptions {
  double step = 0.05;     ///< step size on the log parameters
  double decay = 0.9;
  double epsilon = 1e-8;
  int iterations = 100;
};

enum class OptimizeMode { global, finetune };

struct TracePoint {
  int iteration = 0;
  double log_marginal = 0.0;
  double seconds = 0.0;  ///< wall-clock seconds spent on this iteration
};

struct OptimizeResult {
  std::vector<TracePoint> trace;
  double best_log_marginal = neg_inf;
  Hyperparameters best_shared;                 ///< global mode
  std::vector<Hyperparameters> best_per_leaf;  ///< finetune mode
  bool aborted = false;
};

/// RMSprop ascent on the model log marginal likelihood. Global mode moves
/// one shared hyperparameter vector; finetune mode moves per-leaf vectors
/// constrained by the normalized-overlap similarity matrix. Leaves are
/// refitted from scratch every step. The best-scoring state seen along the
/// trace is kept and re-applied to the graph at the end; a non-finite loss
/// or gradient aborts with the last good state.
inline OptimizeResult optimize(DsmgpGraph& g, const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                               OptimizeMode mode, const RmspropOptions& opt,
                               const InferenceOptions& infer = {}) {
  if (opt.iterations < 1) throw UsageError("optimize: iterations must be >= 1");
  if (g.posterior_weights) {
    throw StateError("optimize: hyperparameters must be optimized before posterior_update");
  }
  using clock = std::chrono::steady_clock;
  OptimizeResult res;
  const std::vector<int> leaf_ids = g.leaves();

  if (mode == OptimizeMode::global) {
    Hyperparameters theta = g.nodes[static_cast<std::size_t>(leaf_ids[0])].hp;
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(theta.parameter_count());
    res.best_shared = theta;
    for (int it = 1; it <= opt.iterations; ++it) {
      const auto t0 = clock::now();
      double lm = 0.0;
      Eigen::VectorXd grad;
      try {
        grad = global_gradient(g, X, y, theta, infer, &lm);
      } catch (const NumericalError&) {
        res.aborted = true;
        break;
      }
      if (!std::isfinite(lm) || !grad.allFinite()) {
        res.aborted = true;
        break;
      }
      const double dt = std::chrono::duration<double>(clock::now() - t0).count();
      res.trace.push_back({it, lm, dt});
      if (lm > res.best_log_marginal) {
        res.best_log_marginal = lm;
        res.best_shared = theta;
      }
      acc = opt.decay * acc.array() + (1.0 - opt.decay) * grad.array().square();
      const Eigen::VectorXd step =
          opt.step * grad.array() / (acc.array().sqrt() + opt.epsilon);
      theta = Hyperparameters::from_vector(theta.to_vector() + step);
    }
    for (int id : leaf_ids) g.nodes[static_cast<std::size_t>(id)].hp = res.best_shared;
  } else {
    std::vector<Hyperparameters> theta(leaf_ids.size());
    for (std::size_t i = 0; i < leaf_ids.size(); ++i) {
      theta[i] = g.nodes[static_cast<std::size_t>(leaf_ids[i])].hp;
    }
    const Eigen::MatrixXd S = overlap_similarity(g);
    const int P = theta[0].parameter_count();
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(static_cast<int>(leaf_ids.size()), P);
    res.best_per_leaf = theta;
    for (int it = 1; it <= opt.iterations; ++it) {
      const auto t0 = clock::now();
      double lm = 0.0;
      Eigen::MatrixXd grads;
      try {
        grads = finetune_gradient(g, X, y, theta, S, infer, &lm);
      } catch (const NumericalError&) {
        res.aborted = true;
        break;
      }
      if (!std::isfinite(lm) || !grads.allFinite()) {
        res.aborted = true;
        break;
      }
      const double dt = std::chrono::duration<double>(clock::now() - t0).count();
      res.trace.push_back({it, lm, dt});
      if (lm > res.best_log_marginal) {
        res.best_log_marginal = lm;
        res.best_per_leaf = theta;
      }
      acc = opt.decay * acc.array() + (1.0 - opt.decay) * grads.array().square();
      for (std::size_t i = 0; i < leaf_ids.size(); ++i) {
        const Eigen::VectorXd step =
            opt.step * grads.row(static_cast<int>(i)).transpose().array() /
            (acc.row(static_cast<int>(i)).transpose().array().sqrt() + opt.epsilon);
        theta[i] = Hyperparameters::from_vector(theta[i].to_vector() + step);
      }
    }
    for (std::size_t i = 0; i < leaf_ids.size(); ++i) {
      g.nodes[static_cast<std::size_t>(leaf_ids[i])].hp = res.best_per_leaf[i];
    }
  }
  g.upward_cached = false;  // leaves no longer match the cached values
  return res;
}

}  // namespace dsmgp
