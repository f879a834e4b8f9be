#pragma once

#include <Eigen/Core>
#include <cmath>

#include "dsmgp/common.hpp"

namespace dsmgp {

struct Scores {
  double rmse = 0.0;
  double mae = 0.0;
  double nlpd = 0.0;
};

/// RMSE = sqrt(mean((yhat - y)^2)), MAE = mean(|yhat - y|),
/// NLPD = mean(-log p(y_n)) from per-point predictive log densities. For
/// Gaussian predictors the caller supplies log N(y_n; mean_n, var_n) —
/// models with a single inferred noise level use that noise as the
/// predictive variance.
inline Scores metrics(const Eigen::VectorXd& yhat, const Eigen::VectorXd& log_densities,
                      const Eigen::VectorXd& y) {
  if (yhat.size() != y.size() || log_densities.size() != y.size()) {
    throw UsageError("metrics: size mismatch");
  }
  if (y.size() == 0) throw UsageError("metrics: empty inputs");
  Scores s;
  const Eigen::ArrayXd err = (yhat - y).array();
  s.rmse = std::sqrt(err.square().mean());
  s.mae = err.abs().mean();
  s.nlpd = -log_densities.mean();
  return s;
}

/// Convenience for Gaussian predictive distributions.
inline Scores metrics_gaussian(const Eigen::VectorXd& mean, const Eigen::VectorXd& var,
                               const Eigen::VectorXd& y) {
  if (mean.size() != y.size() || var.size() != y.size()) throw UsageError("metrics: size mismatch");
  Eigen::VectorXd logd(y.size());
  for (Eigen::Index i = 0; i < y.size(); ++i) logd(i) = gaussian_logpdf(y(i), mean(i), var(i));
  return metrics(mean, logd, y);
}

}  // namespace dsmgp
