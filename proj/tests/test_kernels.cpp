#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Eigenvalues>
#include <cmath>

#include "dsmgp/kernels.hpp"
#include "dsmgp/linalg.hpp"
#include "dsmgp/rng.hpp"

using namespace dsmgp;

namespace {

Eigen::MatrixXd random_matrix(int n, int d, std::uint64_t seed) {
  SplitRng rng(seed);
  Eigen::MatrixXd X(n, d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) X(i, j) = rng.uniform(-2.0, 2.0);
  }
  return X;
}

}  // namespace

TEST_CASE("se_ard closed form") {
  Hyperparameters hp = Hyperparameters::isotropic(1, 0.7, 1.0, 0.1);

  SECTION("zero distance gives the signal variance") {
    Eigen::VectorXd x(1);
    x << 0.3;
    CHECK(se_ard(x, x, hp) == Catch::Approx(1.0).epsilon(1e-14));
  }

  SECTION("distance l*sqrt(2) gives exp(-1)") {
    Eigen::VectorXd a(1), b(1);
    a << 0.0;
    b << 0.7 * std::sqrt(2.0);
    CHECK(se_ard(a, b, hp) == Catch::Approx(std::exp(-1.0)).epsilon(1e-12));
  }

  SECTION("symmetry and range") {
    SplitRng rng(7);
    Hyperparameters hp3(Eigen::Vector3d(0.1, -0.3, 0.4), std::log(1.7), std::log(0.1));
    for (int t = 0; t < 50; ++t) {
      Eigen::VectorXd a(3), b(3);
      for (int d = 0; d < 3; ++d) {
        a(d) = rng.uniform(-3, 3);
        b(d) = rng.uniform(-3, 3);
      }
      const double k1 = se_ard(a, b, hp3);
      const double k2 = se_ard(b, a, hp3);
      CHECK(k1 == k2);
      CHECK(k1 > 0.0);
      CHECK(k1 <= hp3.signal_var());
    }
  }

  SECTION("coordinate permutation invariance") {
    Hyperparameters hp3(Eigen::Vector3d(0.2, -0.1, 0.5), 0.0, std::log(0.1));
    Eigen::VectorXd a(3), b(3);
    a << 0.3, -1.2, 0.8;
    b << -0.4, 0.9, 0.1;
    const double k = se_ard(a, b, hp3);
    // permute coordinates (2, 0, 1) everywhere
    Hyperparameters hp3p(Eigen::Vector3d(0.5, 0.2, -0.1), 0.0, std::log(0.1));
    Eigen::VectorXd ap(3), bp(3);
    ap << 0.8, 0.3, -1.2;
    bp << 0.1, -0.4, 0.9;
    CHECK(se_ard(ap, bp, hp3p) == Catch::Approx(k).epsilon(1e-15));
  }

  SECTION("errors") {
    Eigen::VectorXd a(2), b(1);
    a << 0, 0;
    b << 0;
    CHECK_THROWS_AS(se_ard(a, b, hp), UsageError);
    Eigen::VectorXd c(1);
    c << std::numeric_limits<double>::quiet_NaN();
    Eigen::VectorXd d(1);
    d << 0.0;
    CHECK_THROWS_AS(se_ard(c, d, hp), UsageError);
    Hyperparameters bad = hp;
    bad.log_noise_var = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(se_ard(d, d, bad), UsageError);
  }
}

TEST_CASE("gram matrices") {
  Hyperparameters hp = Hyperparameters::isotropic(3, 1.3, 0.9, 0.05);

  SECTION("single row") {
    Eigen::MatrixXd X = random_matrix(1, 3, 3);
    const Eigen::MatrixXd K = gram(X, X, hp);
    REQUIRE(K.rows() == 1);
    CHECK(K(0, 0) == Catch::Approx(hp.signal_var()).epsilon(1e-14));
  }

  SECTION("gram(X, X2) is the transpose of gram(X2, X)") {
    Eigen::MatrixXd X = random_matrix(4, 3, 4), X2 = random_matrix(6, 3, 5);
    const Eigen::MatrixXd A = gram(X, X2, hp);
    const Eigen::MatrixXd B = gram(X2, X, hp);
    CHECK((A - B.transpose()).cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("entry-wise equals looped se_ard") {
    Eigen::MatrixXd X = random_matrix(4, 3, 6), X2 = random_matrix(3, 3, 7);
    const Eigen::MatrixXd K = gram(X, X2, hp);
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < 3; ++j) {
        const double expected = se_ard(X.row(i).transpose(), X2.row(j).transpose(), hp);
        CHECK(K(i, j) == expected);
      }
    }
  }

  SECTION("dimension mismatch") {
    Eigen::MatrixXd X = random_matrix(4, 3, 8), X2 = random_matrix(4, 2, 9);
    CHECK_THROWS_AS(gram(X, X2, hp), UsageError);
  }

  SECTION("gram of 5 random points is positive semidefinite (eigenvalue oracle)") {
    Eigen::MatrixXd X = random_matrix(5, 3, 10);
    const Eigen::MatrixXd K = gram(X, X, hp);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(K);
    CHECK(eig.eigenvalues().minCoeff() >= -1e-10);
  }

  SECTION("gram + noise is positive definite via Cholesky") {
    for (std::uint64_t s = 20; s < 25; ++s) {
      Eigen::MatrixXd X = random_matrix(12, 3, s);
      Eigen::MatrixXd C = gram(X, X, hp);
      C.diagonal().array() += hp.noise_var();
      CHECK_NOTHROW(jittered_cholesky(C));
    }
  }
}
