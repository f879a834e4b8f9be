#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <cmath>
#include <string>
#include <utility>

#include "dsmgp/common.hpp"

namespace dsmgp {

struct CholFactor {
  Eigen::MatrixXd L;    ///< lower-triangular factor, L L^T = C + jitter * I
  double jitter = 0.0;  ///< diagonal shift that was needed, 0 for a clean factorization
};

namespace detail {

inline bool lower_factor_ok(const Eigen::MatrixXd& L) {
  for (Eigen::Index i = 0; i < L.rows(); ++i) {
    const double d = L(i, i);
    if (!(d > 0.0) || !std::isfinite(d)) return false;
  }
  return true;
}

}  // namespace detail

/// Cholesky factorization with jitter escalation: on failure, adds
/// 1e-8 * mean(diag) to the diagonal and escalates by 10x up to 1e-2 before
/// giving up with a NumericalError.
inline CholFactor jittered_cholesky(Eigen::MatrixXd C) {
  if (C.rows() != C.cols() || C.rows() == 0) {
    throw UsageError("jittered_cholesky: matrix must be square and non-empty");
  }
  const double mean_diag = C.diagonal().mean();
  double jitter = 0.0;
  for (double level = 0.0;;) {
    Eigen::MatrixXd W = C;
    Eigen::LLT<Eigen::Ref<Eigen::MatrixXd>> llt(W);  // factors in place over W
    if (llt.info() == Eigen::Success) {
      W.triangularView<Eigen::StrictlyUpper>().setZero();
      if (detail::lower_factor_ok(W)) return {std::move(W), jitter};
    }
    level = (level == 0.0) ? 1e-8 : level * 10.0;
    if (level > 1e-2) {
      throw NumericalError("jittered_cholesky: matrix not positive definite after jitter up to " +
                           std::to_string(1e-2 * mean_diag));
    }
    const double add = level * mean_diag - jitter;
    C.diagonal().array() += add;
    jitter = level * mean_diag;
  }
}

/// In-place stable rank-1 update: L := chol(L L^T + v v^T). Based on Givens
/// rotations, so no downdating-style cancellation occurs. `v` is consumed
/// (overwritten with intermediate values).
inline void chol_rank1_update(Eigen::Ref<Eigen::MatrixXd> L, Eigen::Ref<Eigen::VectorXd> v) {
  const Eigen::Index n = L.rows();
  if (v.size() != n) throw UsageError("chol_rank1_update: size mismatch");
  const Eigen::Index stride = L.outerStride();
  double* vp = v.data();
  for (Eigen::Index k = 0; k < n; ++k) {
    double* col = L.data() + k * stride + k;  // &L(k, k), column below is contiguous
    const double lkk = col[0];
    const double vk = vp[k];
    const double r = std::hypot(lkk, vk);
    const double c = r / lkk;
    const double cinv = lkk / r;
    const double s = vk / lkk;
    col[0] = r;
    const Eigen::Index m = n - k - 1;
    for (Eigen::Index i = 1; i <= m; ++i) {
      const double lik = (col[i] + s * vp[k + i]) * cinv;
      col[i] = lik;
      vp[k + i] = c * vp[k + i] - s * lik;
    }
  }
}

/// Leading size x size block of a lower factor: the exact factor of the
/// leading block of the factored matrix.
inline Eigen::MatrixXd chol_submatrix(const Eigen::MatrixXd& L, Eigen::Index size) {
  if (size < 1 || size > L.rows()) throw UsageError("chol_submatrix: size out of range");
  return L.topLeftCorner(size, size);
}

/// Factor of the trailing block after removing the first k rows/columns of
/// the factored matrix: k consecutive rank-1 updates with the dropped
/// columns, then the leading rows/columns are discarded.
inline Eigen::MatrixXd chol_drop_first(Eigen::MatrixXd L, Eigen::Index k) {
  const Eigen::Index n = L.rows();
  if (k < 1 || k >= n) throw UsageError("chol_drop_first: need 1 <= k < N");
  Eigen::VectorXd buf(n - 1);
  for (Eigen::Index t = 0; t < k; ++t) {
    const Eigen::Index m = n - t - 1;  // size of the trailing block being updated
    buf.head(m) = L.block(t + 1, t, m, 1);
    chol_rank1_update(L.block(t + 1, t + 1, m, m), buf.head(m));
  }
  return L.bottomRightCorner(n - k, n - k);
}

/// Continue a factorization: given the factor of the leading m x m block of
/// a matrix, its cross block C12 (m x p) and trailing block C22 (p x p),
/// compute the full (m + p) factor without refactoring the leading block.
/// `jitter` is added to the appended diagonal so the result is consistent
/// with a leading factor that already carries that shift.
inline CholFactor chol_extend_blocks(const Eigen::MatrixXd& L_leading, const Eigen::MatrixXd& C12,
                                     const Eigen::MatrixXd& C22, double jitter = 0.0) {
  const Eigen::Index m = L_leading.rows();
  const Eigen::Index p = C22.rows();
  if (C12.rows() != m || C12.cols() != p || C22.cols() != p) {
    throw UsageError("chol_extend_blocks: incompatible block sizes");
  }
  if (p == 0) return {L_leading, jitter};
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(m + p, m + p);
  L.topLeftCorner(m, m) = L_leading;
  // L21 solves L11 L21^T = C12.
  Eigen::MatrixXd X = L_leading.triangularView<Eigen::Lower>().solve(C12);
  L.bottomLeftCorner(p, m) = X.transpose();
  Eigen::MatrixXd S = C22 - X.transpose() * X;
  S.diagonal().array() += jitter;
  CholFactor tail = jittered_cholesky(std::move(S));
  L.bottomRightCorner(p, p) = tail.L;
  return {std::move(L), jitter + tail.jitter};
}

/// Convenience form of chol_extend_blocks taking the full matrix C.
inline CholFactor chol_extend(const Eigen::MatrixXd& L_leading, const Eigen::MatrixXd& C,
                              double jitter = 0.0) {
  const Eigen::Index m = L_leading.rows();
  const Eigen::Index n = C.rows();
  if (C.cols() != n || m > n) throw UsageError("chol_extend: incompatible sizes");
  if (m == n) return {L_leading, jitter};
  return chol_extend_blocks(L_leading, C.topRightCorner(m, n - m),
                            C.bottomRightCorner(n - m, n - m), jitter);
}

}  // namespace dsmgp
