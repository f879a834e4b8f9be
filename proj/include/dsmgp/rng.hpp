#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "dsmgp/common.hpp"

namespace dsmgp {

/// Seedable, splittable pseudo-random generator used for structure
/// construction and synthetic data. The core is splitmix64, so streams are
/// identical across platforms and child generators can be derived from a
/// parent without sharing state.
class SplitRng {
 public:
  explicit SplitRng(std::uint64_t seed) : state_(mix(seed ^ 0x9e3779b97f4a7c15ULL)) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Derive an independent child generator for stream index `stream`.
  /// Does not advance this generator.
  SplitRng split(std::uint64_t stream) const {
    SplitRng child(0);
    child.state_ = mix(state_ ^ mix(stream + 0x1000193ULL));
    return child;
  }

  /// Uniform on [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Beta(2,2) sample: the median of three independent uniforms.
  double beta22() {
    double a = uniform(), b = uniform(), c = uniform();
    double lo = std::min({a, b, c}), hi = std::max({a, b, c});
    return a + b + c - lo - hi;
  }

  /// Standard normal via Box-Muller (two uniforms per draw, no caching).
  double normal() {
    double u1 = uniform(), u2 = uniform();
    u1 = std::max(u1, 0x1.0p-60);  // keep log() finite
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  /// Index sampled proportionally to nonnegative weights; all-zero weights
  /// fall back to a uniform choice.
  int categorical(const std::vector<double>& weights) {
    if (weights.empty()) throw UsageError("categorical: empty weight vector");
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    if (!(total > 0.0)) return static_cast<int>(next_u64() % weights.size());
    double u = uniform() * total;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      u -= weights[i];
      if (u < 0.0) return static_cast<int>(i);
    }
    return static_cast<int>(weights.size()) - 1;
  }

  /// Fisher-Yates shuffle of `items`.
  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = next_u64() % i;
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t state_;
};

}  // namespace dsmgp
