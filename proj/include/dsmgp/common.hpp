#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace dsmgp {

inline constexpr const char* library_version = "0.1.0";

inline constexpr double log_2pi = 1.8378770664093454836;
inline constexpr double neg_inf = -std::numeric_limits<double>::infinity();

/// Caller passed invalid arguments (dimension mismatch, non-finite input, ...).
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A numerical procedure failed beyond recovery (Cholesky after jitter
/// escalation, negative variance below tolerance, ...).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An operation was called in the wrong state (missing upward pass,
/// posterior not applied, ...).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace diagnostics {

/// Counts predictive variances clamped to zero from small negative round-off.
inline std::atomic<std::uint64_t>& negative_variance_clamps() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

}  // namespace diagnostics

/// log(sum_i exp(v_i)), tolerant of -inf entries; empty input gives -inf.
inline double log_sum_exp(const std::vector<double>& values) {
  double m = neg_inf;
  for (double v : values) m = std::max(m, v);
  if (!std::isfinite(m)) return m;  // all -inf (or empty)
  double acc = 0.0;
  for (double v : values) {
    if (v != neg_inf) acc += std::exp(v - m);
  }
  return m + std::log(acc);
}

inline double log_sum_exp(double a, double b) {
  if (a == neg_inf) return b;
  if (b == neg_inf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

/// Density of N(mean, var) at y, in natural log.
inline double gaussian_logpdf(double y, double mean, double var) {
  if (!(var > 0.0)) throw NumericalError("gaussian_logpdf: variance must be positive");
  const double d = y - mean;
  return -0.5 * (d * d / var + std::log(var) + log_2pi);
}

}  // namespace dsmgp
