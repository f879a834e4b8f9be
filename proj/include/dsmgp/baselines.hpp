#pragma once

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "dsmgp/common.hpp"
#include "dsmgp/gp.hpp"
#include "dsmgp/kernels.hpp"
#include "dsmgp/structure.hpp"

namespace dsmgp {

enum class BetaRule { uniform, entropy };

/// Independent GP experts over disjoint covariate-region shards, plus the
/// product-style aggregation rules. Aggregations operate on observation
/// (noisy) predictive Gaussians; nle_predict returns the latent posterior
/// of the responsible expert like gp predict does.
struct ExpertEnsemble {
  std::vector<GpPosterior> experts;
  std::vector<Region> regions;  ///< one per expert, interior-disjoint, covering the data
  Hyperparameters hp;           ///< shared hyperparameters
};

/// Shards from the leaves of a K_S = 1 structure build, so every method
/// under comparison sees the same contiguous region partition.
inline ExpertEnsemble make_partition_ensemble(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                              const DsmgpGraph& partition,
                                              const Hyperparameters& hp) {
  ExpertEnsemble e;
  e.hp = hp;
  for (int id : partition.leaves()) {
    const auto& idx = partition.data_idx[static_cast<std::size_t>(id)];
    if (idx.empty()) continue;
    Eigen::MatrixXd Xl(static_cast<Eigen::Index>(idx.size()), X.cols());
    Eigen::VectorXd yl(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      Xl.row(static_cast<Eigen::Index>(i)) = X.row(idx[i]);
      yl(static_cast<Eigen::Index>(i)) = y(idx[i]);
    }
    e.experts.push_back(fit(Xl, yl, hp));
    e.regions.push_back(partition.scope[static_cast<std::size_t>(id)]);
  }
  return e;
}

/// Naive-local-experts prediction: the unique expert whose region contains
/// the query (queries outside every region are clamped to the nearest one).
inline GpPrediction nle_predict(const ExpertEnsemble& e,
                                const Eigen::Ref<const Eigen::VectorXd>& x) {
  if (e.experts.empty()) throw UsageError("nle_predict: empty ensemble");
  for (std::size_t k = 0; k < e.regions.size(); ++k) {
    if (e.regions[k].contains(x)) return predict(e.experts[k], x);
  }
  // Outside every shard: clamp to the region with the smallest box distance.
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_k = 0;
  for (std::size_t k = 0; k < e.regions.size(); ++k) {
    const Region& r = e.regions[k];
    double d2 = 0.0;
    for (Eigen::Index d = 0; d < x.size(); ++d) {
      const double c = std::max({r.lower(d) - x(d), x(d) - r.upper(d), 0.0});
      d2 += c * c;
    }
    if (d2 < best) {
      best = d2;
      best_k = k;
    }
  }
  return predict(e.experts[best_k], x);
}

namespace detail {

struct NoisyPrediction {
  double mean = 0.0;
  double var = 0.0;  ///< latent variance + noise variance
};

inline std::vector<NoisyPrediction> expert_predictions(const ExpertEnsemble& e,
                                                       const Eigen::Ref<const Eigen::VectorXd>& x) {
  std::vector<NoisyPrediction> out;
  out.reserve(e.experts.size());
  const double noise = e.hp.noise_var();
  for (const GpPosterior& p : e.experts) {
    const GpPrediction g = predict(p, x);
    const double var = g.var + noise;
    if (!(var > 0.0)) throw NumericalError("expert predictive variance is not positive");
    out.push_back({g.mean, var});
  }
  return out;
}

inline std::vector<double> beta_values(const std::vector<NoisyPrediction>& preds, BetaRule rule,
                                       double prior_var) {
  std::vector<double> beta(preds.size());
  if (rule == BetaRule::uniform) {
    std::fill(beta.begin(), beta.end(), 1.0 / static_cast<double>(preds.size()));
  } else {
    for (std::size_t k = 0; k < preds.size(); ++k) {
      beta[k] = 0.5 * (std::log(prior_var) - std::log(preds[k].var));
    }
  }
  return beta;
}

}  // namespace detail

/// Generalized product of experts: precision-weighted product of the expert
/// predictive Gaussians,
///   var^-1 = sum_k beta_k var_k^-1,  mean = var sum_k beta_k var_k^-1 mean_k.
inline GpPrediction gpoe_predict(const ExpertEnsemble& e,
                                 const Eigen::Ref<const Eigen::VectorXd>& x,
                                 BetaRule rule = BetaRule::uniform) {
  if (e.experts.empty()) throw UsageError("gpoe_predict: empty ensemble");
  const auto preds = detail::expert_predictions(e, x);
  const double prior_var = e.hp.signal_var() + e.hp.noise_var();
  const auto beta = detail::beta_values(preds, rule, prior_var);
  double prec = 0.0, wm = 0.0;
  for (std::size_t k = 0; k < preds.size(); ++k) {
    prec += beta[k] / preds[k].var;
    wm += beta[k] * preds[k].mean / preds[k].var;
  }
  if (!(prec > 0.0)) throw NumericalError("gpoe_predict: aggregated precision is not positive");
  return {wm / prec, 1.0 / prec};
}

/// Robust Bayesian committee machine: gPoE plus a prior-precision
/// correction,
///   var^-1 = sum_k beta_k var_k^-1 + (1 - sum_k beta_k) prior_var^-1
/// with beta_k = 1/2 (log prior_var - log var_k) by default. prior_var
/// defaults to k(x*, x*) + sigma^2 from the shared hyperparameters.
inline GpPrediction rbcm_predict(const ExpertEnsemble& e,
                                 const Eigen::Ref<const Eigen::VectorXd>& x,
                                 BetaRule rule = BetaRule::entropy, double prior_var = -1.0) {
  if (e.experts.empty()) throw UsageError("rbcm_predict: empty ensemble");
  if (prior_var <= 0.0) prior_var = e.hp.signal_var() + e.hp.noise_var();
  const auto preds = detail::expert_predictions(e, x);
  const auto beta = detail::beta_values(preds, rule, prior_var);
  double prec = 0.0, wm = 0.0, beta_sum = 0.0;
  for (std::size_t k = 0; k < preds.size(); ++k) {
    prec += beta[k] / preds[k].var;
    wm += beta[k] * preds[k].mean / preds[k].var;
    beta_sum += beta[k];
  }
  prec += (1.0 - beta_sum) / prior_var;
  if (!(prec > 0.0)) throw NumericalError("rbcm_predict: aggregated precision is not positive");
  return {wm / prec, 1.0 / prec};
}

}  // namespace dsmgp
