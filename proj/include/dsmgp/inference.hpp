#pragma once

#include <Eigen/Core>
#include <cmath>
#include <string>
#include <vector>

#include "dsmgp/common.hpp"
#include "dsmgp/gp.hpp"
#include "dsmgp/shared_cholesky.hpp"
#include "dsmgp/structure.hpp"

namespace dsmgp {

struct InferenceOptions {
  bool use_sharing = false;  ///< reuse Cholesky factors across nested leaves
  int component_cap = 10000; ///< predict_moments enumerates components up to this count
};

/// Fit every leaf expert on its assigned rows. With sharing enabled (and
/// identical leaf hyperparameters) factorizations are reused across leaves.
/// Invalidates the upward cache. Leaf fit failures carry the node id.
inline void fit_leaves(DsmgpGraph& g, const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                       const InferenceOptions& opts = {}) {
  if (opts.use_sharing) {
    execute_plan(g, plan(g), X, y);
    return;
  }
  for (int id : g.leaves()) {
    const auto& idx = g.data_idx[static_cast<std::size_t>(id)];
    Eigen::MatrixXd Xl(static_cast<Eigen::Index>(idx.size()), X.cols());
    Eigen::VectorXd yl(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      Xl.row(static_cast<Eigen::Index>(i)) = X.row(idx[i]);
      yl(static_cast<Eigen::Index>(i)) = y(idx[i]);
    }
    try {
      g.nodes[static_cast<std::size_t>(id)].posterior = fit(Xl, yl, g.nodes[static_cast<std::size_t>(id)].hp);
    } catch (const std::exception& e) {
      throw NumericalError("leaf " + std::to_string(id) + ": " + e.what());
    }
  }
  g.upward_cached = false;
}

/// Upward pass in log space over fitted leaves: a leaf contributes its log
/// marginal likelihood, a product the sum of its children, a sum the
/// log-sum-exp of child log-weight + child value. Caches per-node values
/// and returns the root value.
inline double upward_pass(DsmgpGraph& g) {
  g.log_value.assign(static_cast<std::size_t>(g.num_nodes()), 0.0);
  auto rec = [&](auto&& self, int id) -> double {
    const Node& nd = g.nodes[static_cast<std::size_t>(id)];
    double v = 0.0;
    switch (nd.kind) {
      case NodeKind::leaf:
        if (!nd.posterior.has_value()) {
          throw StateError("upward_pass: leaf " + std::to_string(id) + " is not fitted");
        }
        v = nd.posterior->lml;
        break;
      case NodeKind::product:
        for (int c : nd.children) v += self(self, c);
        break;
      case NodeKind::sum: {
        std::vector<double> terms;
        terms.reserve(nd.children.size());
        for (std::size_t k = 0; k < nd.children.size(); ++k) {
          terms.push_back(nd.log_weights[k] + self(self, nd.children[k]));
        }
        v = log_sum_exp(terms);
        break;
      }
    }
    g.log_value[static_cast<std::size_t>(id)] = v;
    return v;
  };
  const double root = rec(rec, g.root);
  g.upward_cached = true;
  return root;
}

/// Model log marginal likelihood: fits leaves and runs the upward pass
/// without touching the sum weights.
inline double log_marginal(DsmgpGraph& g, const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                           const InferenceOptions& opts = {}) {
  fit_leaves(g, X, y, opts);
  return upward_pass(g);
}

/// Exact posterior update: fits leaves, runs the upward pass, and replaces
/// every sum's weights with the normalized posterior weights
/// log w + value(child) - value(sum). Returns log Z, the model log marginal
/// likelihood. Refuses to run twice on the same graph.
inline double posterior_update(DsmgpGraph& g, const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                               const InferenceOptions& opts = {}) {
  if (g.posterior_weights) {
    throw StateError("posterior_update: posterior weights already applied");
  }
  fit_leaves(g, X, y, opts);
  const double log_z = upward_pass(g);
  for (int i = 0; i < g.num_nodes(); ++i) {
    Node& nd = g.nodes[static_cast<std::size_t>(i)];
    if (nd.kind != NodeKind::sum) continue;
    const double vs = g.log_value[static_cast<std::size_t>(i)];
    for (std::size_t k = 0; k < nd.children.size(); ++k) {
      nd.log_weights[k] += g.log_value[static_cast<std::size_t>(nd.children[k])] - vs;
    }
  }
  g.posterior_weights = true;
  // The cached values were produced under the prior weights.
  g.upward_cached = false;
  return log_z;
}

struct PredictiveComponent {
  double log_weight = 0.0;
  double mean = 0.0;
  double var = 0.0;
};

/// Weighted Gaussian mixture at a query point plus its moment-matched
/// Gaussian. Components are enumerated only while the reachable sub-mixture
/// stays within the configured cap; the moments are always present.
struct PredictiveMixture {
  std::vector<PredictiveComponent> components;
  double mm_mean = 0.0;
  double mm_var = 0.0;
  bool components_complete = false;
};

namespace detail {

inline void require_posterior(const DsmgpGraph& g, const char* op) {
  if (!g.posterior_weights) {
    throw StateError(std::string(op) + ": posterior_update has not been applied");
  }
}

/// (E[m], E[m^2 + V]) of the reachable sub-mixture under `id`.
inline std::pair<double, double> moment_pass(const DsmgpGraph& g, int id,
                                             const Eigen::Ref<const Eigen::VectorXd>& x) {
  const Node& nd = g.nodes[static_cast<std::size_t>(id)];
  switch (nd.kind) {
    case NodeKind::leaf: {
      if (!nd.posterior.has_value()) {
        throw StateError("predict: leaf " + std::to_string(id) + " is not fitted");
      }
      const GpPrediction p = predict(*nd.posterior, x);
      return {p.mean, p.mean * p.mean + p.var};
    }
    case NodeKind::product:
      return moment_pass(g, product_child_for(g, id, x), x);
    case NodeKind::sum: {
      double e1 = 0.0, e2 = 0.0;
      for (std::size_t k = 0; k < nd.children.size(); ++k) {
        if (nd.log_weights[k] == neg_inf) continue;
        const double w = std::exp(nd.log_weights[k]);
        const auto [c1, c2] = moment_pass(g, nd.children[k], x);
        e1 += w * c1;
        e2 += w * c2;
      }
      return {e1, e2};
    }
  }
  return {0.0, 0.0};
}

/// Number of mixture components reachable at x, saturating at `cap + 1`.
inline long long reachable_components(const DsmgpGraph& g, int id,
                                      const Eigen::Ref<const Eigen::VectorXd>& x, long long cap) {
  const Node& nd = g.nodes[static_cast<std::size_t>(id)];
  switch (nd.kind) {
    case NodeKind::leaf:
      return 1;
    case NodeKind::product:
      return reachable_components(g, product_child_for(g, id, x), x, cap);
    case NodeKind::sum: {
      long long total = 0;
      for (int c : nd.children) {
        total += reachable_components(g, c, x, cap);
        if (total > cap) return cap + 1;
      }
      return total;
    }
  }
  return 1;
}

inline void enumerate_components(const DsmgpGraph& g, int id,
                                 const Eigen::Ref<const Eigen::VectorXd>& x, double log_w,
                                 std::vector<PredictiveComponent>& out) {
  const Node& nd = g.nodes[static_cast<std::size_t>(id)];
  switch (nd.kind) {
    case NodeKind::leaf: {
      const GpPrediction p = predict(*nd.posterior, x);
      out.push_back({log_w, p.mean, p.var});
      return;
    }
    case NodeKind::product:
      enumerate_components(g, product_child_for(g, id, x), x, log_w, out);
      return;
    case NodeKind::sum:
      for (std::size_t k = 0; k < nd.children.size(); ++k) {
        if (nd.log_weights[k] == neg_inf) continue;
        enumerate_components(g, nd.children[k], x, log_w + nd.log_weights[k], out);
      }
      return;
  }
}

/// Mixture log density of the observation (noise included) at the query.
inline double logdensity_pass(const DsmgpGraph& g, int id,
                              const Eigen::Ref<const Eigen::VectorXd>& x, double y) {
  const Node& nd = g.nodes[static_cast<std::size_t>(id)];
  switch (nd.kind) {
    case NodeKind::leaf: {
      if (!nd.posterior.has_value()) {
        throw StateError("predictive_logdensity: leaf " + std::to_string(id) + " is not fitted");
      }
      const GpPrediction p = predict(*nd.posterior, x);
      return gaussian_logpdf(y, p.mean, p.var + nd.hp.noise_var());
    }
    case NodeKind::product:
      return logdensity_pass(g, product_child_for(g, id, x), x, y);
    case NodeKind::sum: {
      std::vector<double> terms;
      terms.reserve(nd.children.size());
      for (std::size_t k = 0; k < nd.children.size(); ++k) {
        if (nd.log_weights[k] == neg_inf) continue;
        terms.push_back(nd.log_weights[k] + logdensity_pass(g, nd.children[k], x, y));
      }
      return log_sum_exp(terms);
    }
  }
  return neg_inf;
}

/// (E[m], E[m^2 + V + sigma^2]) — observation-space moments for the
/// moment-matched predictive density.
inline std::pair<double, double> noisy_moment_pass(const DsmgpGraph& g, int id,
                                                   const Eigen::Ref<const Eigen::VectorXd>& x) {
  const Node& nd = g.nodes[static_cast<std::size_t>(id)];
  switch (nd.kind) {
    case NodeKind::leaf: {
      const GpPrediction p = predict(*nd.posterior, x);
      return {p.mean, p.mean * p.mean + p.var + nd.hp.noise_var()};
    }
    case NodeKind::product:
      return noisy_moment_pass(g, product_child_for(g, id, x), x);
    case NodeKind::sum: {
      double e1 = 0.0, e2 = 0.0;
      for (std::size_t k = 0; k < nd.children.size(); ++k) {
        if (nd.log_weights[k] == neg_inf) continue;
        const double w = std::exp(nd.log_weights[k]);
        const auto [c1, c2] = noisy_moment_pass(g, nd.children[k], x);
        e1 += w * c1;
        e2 += w * c2;
      }
      return {e1, e2};
    }
  }
  return {0.0, 0.0};
}

}  // namespace detail

/// Predictive mixture at a query point under the posterior weights: one
/// Gaussian per reachable induced-tree leaf, weighted by the product of
/// posterior sum weights along the tree, plus the moment-matched Gaussian
/// (the default prediction).
inline PredictiveMixture predict_moments(const DsmgpGraph& g,
                                         const Eigen::Ref<const Eigen::VectorXd>& x,
                                         int component_cap = 10000) {
  detail::require_posterior(g, "predict_moments");
  PredictiveMixture out;
  const auto [e1, e2] = detail::moment_pass(g, g.root, x);
  out.mm_mean = e1;
  out.mm_var = std::max(0.0, e2 - e1 * e1);
  if (detail::reachable_components(g, g.root, x, component_cap) <= component_cap) {
    detail::enumerate_components(g, g.root, x, 0.0, out.components);
    out.components_complete = true;
  }
  return out;
}

/// Log density of observation ystar at xstar under the exact posterior
/// predictive mixture (observation noise included).
inline double predictive_logdensity(const DsmgpGraph& g,
                                    const Eigen::Ref<const Eigen::VectorXd>& x, double ystar) {
  detail::require_posterior(g, "predictive_logdensity");
  return detail::logdensity_pass(g, g.root, x, ystar);
}

/// Log density of ystar under the moment-matched Gaussian (the alternative
/// to the exact mixture density).
inline double predictive_logdensity_mm(const DsmgpGraph& g,
                                       const Eigen::Ref<const Eigen::VectorXd>& x, double ystar) {
  detail::require_posterior(g, "predictive_logdensity");
  const auto [e1, e2] = detail::noisy_moment_pass(g, g.root, x);
  return gaussian_logpdf(ystar, e1, std::max(e2 - e1 * e1, 1e-300));
}

}  // namespace dsmgp
