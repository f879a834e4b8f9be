#pragma once

#include <Eigen/Core>
#include <cmath>
#include <string>

#include "dsmgp/common.hpp"

namespace dsmgp {

/// Kernel and noise parameters of one GP expert, stored on log scale so
/// unconstrained gradient steps keep the exponentiated values positive.
struct Hyperparameters {
  Eigen::VectorXd log_lengthscales;  ///< log of the ARD lengthscales, one per covariate
  double log_signal_var = 0.0;       ///< log of the signal variance sigma_f^2
  double log_noise_var = std::log(0.1);  ///< log of the noise variance sigma^2

  Hyperparameters() = default;
  Hyperparameters(Eigen::VectorXd log_ls, double log_sf2, double log_sn2)
      : log_lengthscales(std::move(log_ls)), log_signal_var(log_sf2), log_noise_var(log_sn2) {}

  static Hyperparameters isotropic(int dims, double lengthscale = 1.0, double signal_var = 1.0,
                                   double noise_var = 0.1) {
    return Hyperparameters(Eigen::VectorXd::Constant(dims, std::log(lengthscale)),
                           std::log(signal_var), std::log(noise_var));
  }

  int dims() const { return static_cast<int>(log_lengthscales.size()); }
  Eigen::VectorXd lengthscales() const { return log_lengthscales.array().exp(); }
  double signal_var() const { return std::exp(log_signal_var); }
  double noise_var() const { return std::exp(log_noise_var); }

  /// Number of free parameters: D lengthscales + signal variance + noise variance.
  int parameter_count() const { return dims() + 2; }

  /// Flat parameter vector [log_lengthscales..., log_signal_var, log_noise_var].
  Eigen::VectorXd to_vector() const {
    Eigen::VectorXd v(parameter_count());
    v.head(dims()) = log_lengthscales;
    v(dims()) = log_signal_var;
    v(dims() + 1) = log_noise_var;
    return v;
  }

  static Hyperparameters from_vector(const Eigen::VectorXd& v) {
    if (v.size() < 2) throw UsageError("Hyperparameters::from_vector: need at least 2 entries");
    const int d = static_cast<int>(v.size()) - 2;
    return Hyperparameters(v.head(d), v(d), v(d + 1));
  }

  /// Throws UsageError unless every log parameter is finite, i.e. the
  /// exponentiated values are strictly positive and finite.
  void check() const {
    if (!log_lengthscales.allFinite() || !std::isfinite(log_signal_var) ||
        !std::isfinite(log_noise_var)) {
      throw UsageError("Hyperparameters: log parameters must be finite");
    }
  }

  bool operator==(const Hyperparameters& o) const {
    return log_signal_var == o.log_signal_var && log_noise_var == o.log_noise_var &&
           log_lengthscales.size() == o.log_lengthscales.size() &&
           log_lengthscales == o.log_lengthscales;
  }
};

namespace detail {

/// Shared squared-distance accumulation so se_ard and gram are bit-identical.
inline double se_ard_unchecked(const double* a, Eigen::Index stride_a, const double* b,
                               Eigen::Index stride_b, const Eigen::VectorXd& inv_ls,
                               double signal_var) {
  double s = 0.0;
  for (Eigen::Index d = 0; d < inv_ls.size(); ++d) {
    const double diff = (a[d * stride_a] - b[d * stride_b]) * inv_ls(d);
    s += diff * diff;
  }
  return signal_var * std::exp(-0.5 * s);
}

}  // namespace detail

/// Squared-exponential ARD covariance
///   k(x, x') = sigma_f^2 exp(-1/2 sum_d (x_d - x'_d)^2 / l_d^2).
/// Symmetric in its arguments; 0 < result <= sigma_f^2.
inline double se_ard(const Eigen::Ref<const Eigen::VectorXd>& x,
                     const Eigen::Ref<const Eigen::VectorXd>& x2, const Hyperparameters& hp) {
  hp.check();
  if (x.size() != x2.size() || x.size() != hp.dims()) {
    throw UsageError("se_ard: dimension mismatch (x: " + std::to_string(x.size()) +
                     ", x2: " + std::to_string(x2.size()) +
                     ", hp: " + std::to_string(hp.dims()) + ")");
  }
  if (!x.allFinite() || !x2.allFinite()) throw UsageError("se_ard: non-finite input");
  const Eigen::VectorXd inv_ls = (-hp.log_lengthscales).array().exp();
  return detail::se_ard_unchecked(x.data(), x.innerStride(), x2.data(), x2.innerStride(), inv_ls,
                                  hp.signal_var());
}

/// Cross-covariance matrix with entry (n, m) = se_ard(X.row(n), X2.row(m), hp).
inline Eigen::MatrixXd gram(const Eigen::Ref<const Eigen::MatrixXd>& X,
                            const Eigen::Ref<const Eigen::MatrixXd>& X2,
                            const Hyperparameters& hp) {
  hp.check();
  if (X.cols() != X2.cols() || X.cols() != hp.dims()) {
    throw UsageError("gram: column counts must match the hyperparameter dimensionality");
  }
  const Eigen::VectorXd inv_ls = (-hp.log_lengthscales).array().exp();
  const double sf2 = hp.signal_var();
  const bool symmetric = X.data() == X2.data() && X.rows() == X2.rows();
  Eigen::MatrixXd K(X.rows(), X2.rows());
  for (Eigen::Index n = 0; n < X.rows(); ++n) {
    const Eigen::Index m0 = symmetric ? n : 0;
    for (Eigen::Index m = m0; m < X2.rows(); ++m) {
      K(n, m) = detail::se_ard_unchecked(X.data() + n * X.innerStride(), X.outerStride(),
                                         X2.data() + m * X2.innerStride(), X2.outerStride(),
                                         inv_ls, sf2);
      if (symmetric) K(m, n) = K(n, m);
    }
  }
  return K;
}

}  // namespace dsmgp
