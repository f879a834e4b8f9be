#pragma once

#include <Eigen/Core>
#include <cmath>
#include <string>
#include <utility>

#include "dsmgp/common.hpp"
#include "dsmgp/kernels.hpp"
#include "dsmgp/linalg.hpp"

namespace dsmgp {

struct GpPrediction {
  double mean = 0.0;
  double var = 0.0;  ///< latent posterior variance, excludes observation noise
};

/// Cached exact posterior of one GP expert: the Cholesky factor of
/// C = k_XX + sigma^2 I, the solve vector alpha = C^-1 y, and the log
/// marginal likelihood. Immutable after fit.
struct GpPosterior {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  Hyperparameters hp;
  Eigen::MatrixXd chol_L;
  Eigen::VectorXd alpha;
  double lml = 0.0;
  double jitter = 0.0;

  Eigen::Index size() const { return X.rows(); }
  int dims() const { return static_cast<int>(X.cols()); }
};

namespace detail {

inline GpPosterior finish_fit(Eigen::MatrixXd X, Eigen::VectorXd y, Hyperparameters hp,
                              CholFactor factor) {
  GpPosterior p;
  p.X = std::move(X);
  p.y = std::move(y);
  p.hp = std::move(hp);
  p.chol_L = std::move(factor.L);
  p.jitter = factor.jitter;
  // alpha = C^-1 y via two triangular solves.
  p.alpha = p.chol_L.triangularView<Eigen::Lower>().solve(p.y);
  p.chol_L.transpose().triangularView<Eigen::Upper>().solveInPlace(p.alpha);
  const double n = static_cast<double>(p.y.size());
  p.lml = -0.5 * (p.y.dot(p.alpha) + 2.0 * p.chol_L.diagonal().array().log().sum() + n * log_2pi);
  return p;
}

}  // namespace detail

/// Exact GP fit: factorizes C = k_XX + sigma^2 I (with jitter escalation on
/// failure) and caches alpha and the log marginal likelihood.
inline GpPosterior fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                       const Hyperparameters& hp) {
  if (X.rows() < 1) throw UsageError("fit: need at least one observation");
  if (X.rows() != y.size()) throw UsageError("fit: X and y row counts differ");
  if (X.cols() != hp.dims()) throw UsageError("fit: covariate/hyperparameter dimension mismatch");
  if (!X.allFinite() || !y.allFinite()) throw UsageError("fit: non-finite inputs");
  hp.check();
  Eigen::MatrixXd C = gram(X, X, hp);
  C.diagonal().array() += hp.noise_var();
  return detail::finish_fit(X, y, hp, jittered_cholesky(std::move(C)));
}

/// Fit using a factor produced elsewhere (the shared-Cholesky path). The
/// factor must be the Cholesky factor of k_XX + sigma^2 I (+ jitter I).
inline GpPosterior fit_with_factor(Eigen::MatrixXd X, Eigen::VectorXd y, Hyperparameters hp,
                                   CholFactor factor) {
  if (factor.L.rows() != X.rows()) throw UsageError("fit_with_factor: factor size mismatch");
  return detail::finish_fit(std::move(X), std::move(y), std::move(hp), std::move(factor));
}

/// Log marginal likelihood, Eq. form -1/2 (y^T C^-1 y + log|C| + N log 2pi)
/// with log|C| read off the factor diagonal.
inline double lml(const GpPosterior& p) { return p.lml; }

/// Posterior mean and latent variance at a query point.
inline GpPrediction predict(const GpPosterior& p, const Eigen::Ref<const Eigen::VectorXd>& xstar) {
  if (xstar.size() != p.dims()) throw UsageError("predict: query dimension mismatch");
  const Eigen::Index n = p.size();
  Eigen::VectorXd kstar(n);
  const Eigen::VectorXd inv_ls = (-p.hp.log_lengthscales).array().exp();
  const double sf2 = p.hp.signal_var();
  for (Eigen::Index i = 0; i < n; ++i) {
    kstar(i) = detail::se_ard_unchecked(&p.X(i, 0), p.X.outerStride(), xstar.data(),
                                        xstar.innerStride(), inv_ls, sf2);
  }
  GpPrediction out;
  out.mean = kstar.dot(p.alpha);
  const Eigen::VectorXd v = p.chol_L.triangularView<Eigen::Lower>().solve(kstar);
  double var = sf2 - v.squaredNorm();
  if (var < 0.0) {
    if (var < -1e-8) {
      throw NumericalError("predict: negative variance " + std::to_string(var));
    }
    diagnostics::negative_variance_clamps().fetch_add(1, std::memory_order_relaxed);
    var = 0.0;
  }
  out.var = var;
  return out;
}

/// Gradient of the log marginal likelihood with respect to the log-scale
/// parameters [log_lengthscales..., log_signal_var, log_noise_var], using
/// d lml / d theta = 1/2 tr((alpha alpha^T - C^-1) dC/d theta) with the
/// chain rule through exp already applied.
inline Eigen::VectorXd lml_grad(const GpPosterior& p) {
  const Eigen::Index n = p.size();
  const int d = p.dims();
  // C^-1 from the factor: Linv^T Linv.
  Eigen::MatrixXd Linv = Eigen::MatrixXd::Identity(n, n);
  p.chol_L.triangularView<Eigen::Lower>().solveInPlace(Linv);
  Eigen::MatrixXd A = p.alpha * p.alpha.transpose() - Linv.transpose() * Linv;

  const Eigen::MatrixXd K = gram(p.X, p.X, p.hp);  // noise-free gram
  const Eigen::VectorXd inv_ls2 = (-2.0 * p.hp.log_lengthscales).array().exp();

  Eigen::VectorXd grad = Eigen::VectorXd::Zero(d + 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const double ak = A(i, j) * K(i, j);
      for (int k = 0; k < d; ++k) {
        const double diff = p.X(i, k) - p.X(j, k);
        grad(k) += ak * diff * diff * inv_ls2(k);  // dC/d log l_k = K .* sqdist_k / l_k^2
      }
      grad(d) += ak;  // dC/d log sigma_f^2 = K
    }
  }
  grad *= 0.5;
  grad(d + 1) = 0.5 * p.hp.noise_var() * A.trace();  // dC/d log sigma^2 = sigma^2 I
  return grad;
}

}  // namespace dsmgp
