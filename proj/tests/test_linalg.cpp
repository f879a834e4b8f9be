#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "dsmgp/kernels.hpp"
#include "dsmgp/linalg.hpp"
#include "dsmgp/rng.hpp"

using namespace dsmgp;

namespace {

// SPD kernel-style matrix from random points; the direct-factorization
// oracle for every reuse operation.
Eigen::MatrixXd random_spd(int n, std::uint64_t seed, double noise = 0.05) {
  SplitRng rng(seed);
  Eigen::MatrixXd X(n, 1);
  for (int i = 0; i < n; ++i) X(i, 0) = rng.uniform(0.0, 2.0);
  std::sort(X.data(), X.data() + n);
  const Hyperparameters hp = Hyperparameters::isotropic(1, 0.3, 1.0, noise);
  Eigen::MatrixXd C = gram(X, X, hp);
  C.diagonal().array() += noise;
  return C;
}

Eigen::MatrixXd direct_chol(const Eigen::MatrixXd& C) {
  return Eigen::LLT<Eigen::MatrixXd>(C).matrixL();
}

double rel_frobenius(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
  return (A - B).norm() / B.norm();
}

}  // namespace

TEST_CASE("jittered cholesky") {
  SECTION("clean SPD factors without jitter") {
    const Eigen::MatrixXd C = random_spd(10, 1);
    const CholFactor f = jittered_cholesky(C);
    CHECK(f.jitter == 0.0);
    CHECK(rel_frobenius(f.L * f.L.transpose(), C) <= 1e-12);
  }

  SECTION("rank-deficient matrix factors after escalation") {
    Eigen::MatrixXd C = Eigen::MatrixXd::Ones(5, 5);  // rank 1
    const CholFactor f = jittered_cholesky(C);
    CHECK(f.jitter > 0.0);
    Eigen::MatrixXd Cj = C;
    Cj.diagonal().array() += f.jitter;
    CHECK(rel_frobenius(f.L * f.L.transpose(), Cj) <= 1e-8);
  }

  SECTION("indefinite matrix fails after the 1e-2 level") {
    Eigen::MatrixXd C(2, 2);
    C << 1.0, 2.0, 2.0, 1.0;  // eigenvalues 3, -1
    CHECK_THROWS_AS(jittered_cholesky(C), NumericalError);
  }
}

TEST_CASE("rank-1 update") {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Eigen::MatrixXd C = random_spd(9, 10 + s);
    SplitRng rng(100 + s);
    Eigen::VectorXd v(9);
    for (int i = 0; i < 9; ++i) v(i) = rng.uniform(-1.0, 1.0);
    const Eigen::MatrixXd expected = direct_chol(C + v * v.transpose());
    Eigen::MatrixXd L = direct_chol(C);
    chol_rank1_update(L, v);  // consumes v
    CHECK(rel_frobenius(L, expected) <= 1e-12);
  }
}

TEST_CASE("submatrix sharing") {
  const Eigen::MatrixXd C = random_spd(8, 2);
  const Eigen::MatrixXd L = direct_chol(C);

  SECTION("full size is the identity operation") {
    CHECK((chol_submatrix(L, 8) - L).norm() == 0.0);
  }

  SECTION("size 1 is sqrt(C11)") {
    const Eigen::MatrixXd L1 = chol_submatrix(L, 1);
    CHECK(L1(0, 0) == Catch::Approx(std::sqrt(C(0, 0))).epsilon(1e-14));
  }

  SECTION("leading 5x5 block equals the direct factorization") {
    const Eigen::MatrixXd L5 = chol_submatrix(L, 5);
    const Eigen::MatrixXd expected = direct_chol(C.topLeftCorner(5, 5));
    CHECK(rel_frobenius(L5, expected) <= 1e-12);
  }

  SECTION("size out of range") {
    CHECK_THROWS_AS(chol_submatrix(L, 9), UsageError);
    CHECK_THROWS_AS(chol_submatrix(L, 0), UsageError);
  }
}

TEST_CASE("drop-first sharing") {
  SECTION("k = N-1 leaves the 1x1 trailing factor") {
    const Eigen::MatrixXd C = random_spd(6, 3);
    const Eigen::MatrixXd L = chol_drop_first(direct_chol(C), 5);
    REQUIRE(L.rows() == 1);
    CHECK(L(0, 0) == Catch::Approx(std::sqrt(C(5, 5))).epsilon(1e-12));
  }

  SECTION("diagonal matrix gives the trailing diagonal sqrt exactly") {
    Eigen::VectorXd d(6);
    d << 4.0, 9.0, 1.0, 16.0, 25.0, 0.25;
    const Eigen::MatrixXd C = d.asDiagonal();
    const Eigen::MatrixXd L = chol_drop_first(direct_chol(C), 2);
    for (int i = 0; i < 4; ++i) {
      CHECK(L(i, i) == Catch::Approx(std::sqrt(d(i + 2))).epsilon(1e-15));
      for (int j = 0; j < i; ++j) CHECK(L(i, j) == 0.0);
    }
  }

  SECTION("random 12x12 kernel matrix, k = 3, matches the direct oracle") {
    const Eigen::MatrixXd C = random_spd(12, 4);
    const Eigen::MatrixXd L = chol_drop_first(direct_chol(C), 3);
    const Eigen::MatrixXd expected = direct_chol(C.bottomRightCorner(9, 9));
    CHECK(rel_frobenius(L, expected) <= 1e-10);
  }

  SECTION("k out of range") {
    const Eigen::MatrixXd L = direct_chol(random_spd(4, 5));
    CHECK_THROWS_AS(chol_drop_first(L, 0), UsageError);
    CHECK_THROWS_AS(chol_drop_first(L, 4), UsageError);
  }
}

TEST_CASE("continued factorization") {
  const Eigen::MatrixXd C = random_spd(10, 6);

  SECTION("extends a leading factor to the full matrix") {
    const Eigen::MatrixXd L6 = direct_chol(C.topLeftCorner(6, 6));
    const CholFactor f = chol_extend(L6, C);
    CHECK(f.jitter == 0.0);
    CHECK(rel_frobenius(f.L, direct_chol(C)) <= 1e-10);
  }

  SECTION("block form agrees with the full form") {
    const Eigen::MatrixXd L6 = direct_chol(C.topLeftCorner(6, 6));
    const CholFactor a = chol_extend(L6, C);
    const CholFactor b =
        chol_extend_blocks(L6, C.topRightCorner(6, 4), C.bottomRightCorner(4, 4));
    CHECK((a.L - b.L).norm() == 0.0);
  }

  SECTION("drop then extend reproduces an interior window") {
    // Window rows 2..7 of a 10-point matrix: drop 2, keep 6 of 8, extend by 0.
    const Eigen::MatrixXd L = direct_chol(C);
    const Eigen::MatrixXd dropped = chol_drop_first(L, 2);
    const Eigen::MatrixXd window = chol_submatrix(dropped, 6);
    const Eigen::MatrixXd expected = direct_chol(C.block(2, 2, 6, 6));
    CHECK(rel_frobenius(window, expected) <= 1e-10);
  }
}
