#include <catch2/catch_amalgamated.hpp>

#include <sparsecoint/solvers.hpp>

#include "helpers.hpp"

#include <limits>
#include <random>

using namespace sparsecoint;
using testutil::matrix_close;
using testutil::random_matrix;
using testutil::random_spd;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double lasso_objective(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                       const Eigen::VectorXd& b, double lam,
                       const std::optional<Eigen::VectorXd>& w = std::nullopt) {
  const double n = static_cast<double>(X.rows());
  double pen = 0.0;
  for (Eigen::Index i = 0; i < b.size(); ++i) {
    const double wi = w ? (*w)(i) : 1.0;
    if (b(i) != 0.0) pen += wi * std::abs(b(i));
  }
  return (y - X * b).squaredNorm() / n + lam * pen;
}

double glasso_objective(const Eigen::MatrixXd& S, const Eigen::MatrixXd& omega,
                        double lam) {
  Eigen::LLT<Eigen::MatrixXd> llt(omega);
  REQUIRE(llt.info() == Eigen::Success);
  double logdet = 0.0;
  for (Eigen::Index i = 0; i < omega.rows(); ++i)
    logdet += 2.0 * std::log(llt.matrixL()(i, i));
  double pen = 0.0;
  for (Eigen::Index i = 0; i < omega.rows(); ++i)
    for (Eigen::Index j = 0; j < omega.cols(); ++j)
      if (i != j) pen += std::abs(omega(i, j));
  return (S * omega).trace() - logdet + lam * pen;
}

}  // namespace

TEST_CASE("ridge_multivariate: lambda 0 equals least squares") {
  std::mt19937_64 rng(11);
  Eigen::MatrixXd X = random_matrix(30, 4, rng);
  Eigen::MatrixXd Y = random_matrix(30, 2, rng);
  Eigen::MatrixXd B = ridge_multivariate(X, Y, 0.0);
  Eigen::MatrixXd ols = X.colPivHouseholderQr().solve(Y);
  CHECK(matrix_close(B, ols, 1e-10, 1e-10));
}

TEST_CASE("ridge_multivariate: matches a generic dense solve of the normal equations") {
  std::mt19937_64 rng(12);
  Eigen::MatrixXd X = random_matrix(20, 3, rng);
  Eigen::MatrixXd Y = random_matrix(20, 2, rng);
  const double lam = 0.5;
  Eigen::MatrixXd B = ridge_multivariate(X, Y, lam);

  Eigen::MatrixXd lhs = X.transpose() * X + lam * Eigen::MatrixXd::Identity(3, 3);
  Eigen::MatrixXd oracle = Eigen::FullPivLU<Eigen::MatrixXd>(lhs).solve(X.transpose() * Y);
  CHECK(matrix_close(B, oracle, 1e-10, 1e-10));
}

TEST_CASE("ridge_multivariate: huge penalty shrinks to zero") {
  std::mt19937_64 rng(13);
  Eigen::MatrixXd X = random_matrix(40, 5, rng);
  Eigen::MatrixXd Y = random_matrix(40, 3, rng);
  Eigen::MatrixXd ols = ridge_multivariate(X, Y, 0.0);
  Eigen::MatrixXd B = ridge_multivariate(X, Y, 1e9);
  CHECK(B.norm() < 1e-6 * ols.norm());
}

TEST_CASE("ridge_multivariate: coefficient norm is monotone in lambda") {
  std::mt19937_64 rng(14);
  Eigen::MatrixXd X = random_matrix(25, 6, rng);
  Eigen::MatrixXd Y = random_matrix(25, 2, rng);
  double prev = std::numeric_limits<double>::infinity();
  for (double lam : {0.0, 0.01, 0.1, 1.0, 10.0, 100.0, 1e4}) {
    const double norm = ridge_multivariate(X, Y, lam).norm();
    CHECK(norm <= prev + 1e-12);
    prev = norm;
  }
}

TEST_CASE("ridge_multivariate: rank-deficient X with lambda 0 is an error") {
  std::mt19937_64 rng(15);
  Eigen::MatrixXd X(20, 3);
  X.col(0) = random_matrix(20, 1, rng);
  X.col(1) = X.col(0);  // duplicate column
  X.col(2) = random_matrix(20, 1, rng);
  Eigen::MatrixXd Y = random_matrix(20, 1, rng);
  CHECK_THROWS_AS(ridge_multivariate(X, Y, 0.0), NumericalError);
  CHECK_NOTHROW(ridge_multivariate(X, Y, 0.1));
}

TEST_CASE("lasso_multivariate: lambda 0 reduces to least squares") {
  std::mt19937_64 rng(21);
  Eigen::MatrixXd X = random_matrix(40, 5, rng);
  Eigen::MatrixXd Y = random_matrix(40, 2, rng);
  auto res = lasso_multivariate(X, Y, Eigen::VectorXd::Zero(1));
  Eigen::MatrixXd ols = X.colPivHouseholderQr().solve(Y);
  CHECK(res.converged);
  CHECK(matrix_close(res.B, ols, 1e-8, 1e-8));
}

TEST_CASE("lasso_multivariate: lambda 0 on rank-deficient X gives the pseudo-inverse solution") {
  std::mt19937_64 rng(22);
  Eigen::MatrixXd X(30, 4);
  X.col(0) = random_matrix(30, 1, rng);
  X.col(1) = 2.0 * X.col(0);
  X.col(2) = random_matrix(30, 1, rng);
  X.col(3) = random_matrix(30, 1, rng);
  Eigen::VectorXd y = random_matrix(30, 1, rng);
  auto res = lasso_multivariate(X, y, Eigen::VectorXd::Zero(1));
  Eigen::MatrixXd want = pseudo_inverse(X) * y;
  CHECK(matrix_close(res.B, want, 1e-9, 1e-9));
}

TEST_CASE("lasso_multivariate: at or above the kill level the column is exactly zero") {
  std::mt19937_64 rng(23);
  Eigen::MatrixXd X = random_matrix(50, 6, rng);
  Eigen::VectorXd y = random_matrix(50, 1, rng);
  const double kill = lasso_kill_level(X, y);

  Eigen::VectorXd lam(1);
  lam << kill;
  auto at = lasso_multivariate(X, y, lam);
  CHECK(at.B.cwiseAbs().maxCoeff() == 0.0);

  lam << kill * 1.5;
  CHECK(lasso_multivariate(X, y, lam).B.cwiseAbs().maxCoeff() == 0.0);

  lam << kill * 0.9;
  CHECK(lasso_multivariate(X, y, lam).B.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("lasso_multivariate: single-coefficient problem matches a dense grid scan") {
  std::mt19937_64 rng(24);
  Eigen::MatrixXd X = random_matrix(50, 1, rng);
  Eigen::VectorXd y = 0.8 * X.col(0) + random_matrix(50, 1, rng).col(0) * 0.3;
  const double lam = 0.2;

  Eigen::VectorXd lamv(1);
  lamv << lam;
  auto res = lasso_multivariate(X, y, lamv, std::nullopt, 1e-10);

  double best_b = 0.0, best_f = std::numeric_limits<double>::infinity();
  for (int g = 0; g <= 100000; ++g) {
    const double b = -2.0 + 4.0 * g / 100000.0;
    Eigen::VectorXd bv(1);
    bv << b;
    const double f = lasso_objective(X, y, bv, lam);
    if (f < best_f) {
      best_f = f;
      best_b = b;
    }
  }
  CHECK(std::abs(res.B(0, 0) - best_b) < 1e-4);
}

TEST_CASE("lasso_multivariate: KKT conditions hold on random weighted instances") {
  std::mt19937_64 rng(25);
  std::uniform_int_distribution<int> npick(20, 200), kpick(2, 50);
  std::uniform_real_distribution<double> upick(0.0, 1.0);
  for (int inst = 0; inst < 30; ++inst) {
    const int n = npick(rng), k = kpick(rng);
    Eigen::MatrixXd X = random_matrix(n, k, rng);
    Eigen::MatrixXd Y = random_matrix(n, 2, rng);
    Eigen::VectorXd lam(2);
    lam << 0.3 * upick(rng), 0.8 * upick(rng) + 0.01;
    LassoWeights w = LassoWeights::Ones(k, 2);
    for (Eigen::Index i = 0; i < k; ++i)
      for (Eigen::Index j = 0; j < 2; ++j) {
        const double u = upick(rng);
        w(i, j) = u < 0.1 ? kInf : 0.25 + 2.0 * u;
      }
    auto res = lasso_multivariate(X, Y, lam, w, 1e-8);
    REQUIRE(res.converged);
    for (Eigen::Index i = 0; i < k; ++i)
      for (Eigen::Index j = 0; j < 2; ++j)
        if (std::isinf(w(i, j))) CHECK(res.B(i, j) == 0.0);
    CHECK(lasso_kkt_violation(X, Y, res.B, lam, w) < 1e-6);
  }
}

TEST_CASE("lasso_multivariate: objective is monotone across sweep prefixes") {
  std::mt19937_64 rng(26);
  Eigen::MatrixXd base = random_matrix(60, 8, rng);
  Eigen::MatrixXd X = base + 0.9 * random_matrix(60, 8, rng);  // correlated columns
  Eigen::VectorXd y = X.leftCols(3).rowwise().sum() + 0.5 * random_matrix(60, 1, rng).col(0);
  Eigen::VectorXd lam(1);
  lam << 0.15;

  double prev = lasso_objective(X, y, Eigen::VectorXd::Zero(8), lam(0));
  for (int sweeps : {1, 2, 3, 5, 10, 50}) {
    auto res = lasso_multivariate(X, y, lam, std::nullopt, 1e-12, sweeps);
    const double f = lasso_objective(X, y, res.B.col(0), lam(0));
    CHECK(f <= prev + 1e-12);
    prev = f;
  }
}

TEST_CASE("lasso_multivariate: hitting the sweep cap flags, not throws") {
  std::mt19937_64 rng(27);
  Eigen::MatrixXd base = random_matrix(80, 30, rng);
  Eigen::MatrixXd X = base;
  for (Eigen::Index j = 1; j < X.cols(); ++j) X.col(j) = 0.95 * X.col(j - 1) + 0.3 * base.col(j);
  Eigen::VectorXd y = X.rowwise().sum() + random_matrix(80, 1, rng).col(0);
  Eigen::VectorXd lam(1);
  lam << 1e-4;
  auto res = lasso_multivariate(X, y, lam, std::nullopt, 1e-12, 1);
  CHECK_FALSE(res.converged);
}

TEST_CASE("graphical_lasso: lambda 0 is the matrix inverse") {
  std::mt19937_64 rng(31);
  Eigen::MatrixXd S = random_spd(5, rng);
  auto res = graphical_lasso(S, 0.0);
  CHECK(matrix_close(res.omega, S.inverse(), 1e-6, 1e-6));
}

TEST_CASE("graphical_lasso: huge penalty gives a diagonal precision") {
  std::mt19937_64 rng(32);
  Eigen::MatrixXd S = random_spd(4, rng);
  double offmax = 0.0;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      if (i != j) offmax = std::max(offmax, std::abs(S(i, j)));
  auto res = graphical_lasso(S, offmax * 1.01);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      if (i == j)
        CHECK(std::abs(res.omega(i, i) - 1.0 / S(i, i)) < 1e-8);
      else
        CHECK(res.omega(i, j) == 0.0);
    }
}

TEST_CASE("graphical_lasso: KKT conditions and positive definiteness on random inputs") {
  std::mt19937_64 rng(33);
  for (int inst = 0; inst < 20; ++inst) {
    Eigen::MatrixXd S = random_spd(4 + inst % 4, rng, 0.2);
    for (double lam : {0.01, 0.1, 0.5}) {
      auto res = graphical_lasso(S, lam, 1e-9);
      INFO("instance " << inst << " lambda " << lam);
      CHECK(res.converged);
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(res.omega);
      CHECK(es.eigenvalues().minCoeff() > 0.0);
      CHECK(glasso_kkt_violation(S, res.omega, lam) < 1e-4);
    }
  }
}

TEST_CASE("graphical_lasso: singular sample covariance still yields an SPD precision") {
  std::mt19937_64 rng(34);
  Eigen::MatrixXd data = random_matrix(4, 7, rng);  // n < q: rank-deficient S
  Eigen::MatrixXd S = data.transpose() * data / 4.0;
  CHECK_THROWS_AS(graphical_lasso(S, 0.0), NumericalError);

  auto res = graphical_lasso(S, 0.3, 1e-9);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(res.omega);
  CHECK(es.eigenvalues().minCoeff() > 0.0);
  CHECK(glasso_kkt_violation(S, res.omega, 0.3) < 1e-4);
}

TEST_CASE("graphical_lasso: no heuristic candidate beats the returned solution") {
  std::mt19937_64 rng(35);
  Eigen::MatrixXd S = random_spd(5, rng, 0.3);
  const double lam = 0.15;
  auto res = graphical_lasso(S, lam, 1e-9);
  const double f_hat = glasso_objective(S, res.omega, lam);

  CHECK(f_hat <= glasso_objective(S, S.inverse(), lam) + 1e-9);
  CHECK(f_hat <=
        glasso_objective(S, Eigen::MatrixXd(S.diagonal().cwiseInverse().asDiagonal()), lam) + 1e-9);
  for (int c = 0; c < 50; ++c) {
    Eigen::MatrixXd jitter = random_matrix(5, 5, rng, 0.05);
    Eigen::MatrixXd cand = res.omega + (jitter + jitter.transpose()) / 2.0;
    Eigen::LLT<Eigen::MatrixXd> llt(cand);
    if (llt.info() != Eigen::Success) continue;
    CHECK(f_hat <= glasso_objective(S, cand, lam) + 1e-9);
  }
}

TEST_CASE("matrix_sqrt_spd: known roots and multiply-back") {
  CHECK(matrix_close(matrix_sqrt_spd(Eigen::MatrixXd::Identity(3, 3)),
                     Eigen::MatrixXd::Identity(3, 3)));

  Eigen::MatrixXd D = Eigen::Vector2d(4.0, 9.0).asDiagonal();
  CHECK(matrix_close(matrix_sqrt_spd(D), Eigen::Vector2d(2.0, 3.0).asDiagonal().toDenseMatrix()));

  std::mt19937_64 rng(41);
  Eigen::MatrixXd A = random_spd(5, rng);
  Eigen::MatrixXd R = matrix_sqrt_spd(A);
  CHECK(matrix_close(R * R, A, 1e-10, 1e-10));

  Eigen::MatrixXd Rinv = matrix_inv_sqrt_spd(A);
  CHECK(matrix_close(Rinv * A * Rinv, Eigen::MatrixXd::Identity(5, 5), 1e-10, 1e-10));
}

TEST_CASE("matrix_sqrt_spd: rejects non-symmetric and indefinite input") {
  Eigen::MatrixXd bad(2, 2);
  bad << 1.0, 2.0, 0.0, 1.0;
  CHECK_THROWS_AS(matrix_sqrt_spd(bad), InvalidInput);

  Eigen::MatrixXd indef = Eigen::Vector2d(1.0, -1.0).asDiagonal();
  CHECK_THROWS_AS(matrix_sqrt_spd(indef), NumericalError);
}

TEST_CASE("pseudo_inverse: inverse, zero, and rank-one cases") {
  std::mt19937_64 rng(51);
  Eigen::MatrixXd A = random_spd(3, rng);
  CHECK(matrix_close(pseudo_inverse(A), A.inverse(), 1e-10, 1e-10));

  Eigen::MatrixXd Z = Eigen::MatrixXd::Zero(4, 2);
  Eigen::MatrixXd Zp = pseudo_inverse(Z);
  CHECK(Zp.rows() == 2);
  CHECK(Zp.cols() == 4);
  CHECK(Zp.cwiseAbs().maxCoeff() == 0.0);

  Eigen::VectorXd u = random_matrix(5, 1, rng);
  Eigen::VectorXd v = random_matrix(3, 1, rng);
  Eigen::MatrixXd R1 = u * v.transpose();
  Eigen::MatrixXd want = v * u.transpose() / (u.squaredNorm() * v.squaredNorm());
  CHECK(matrix_close(pseudo_inverse(R1), want, 1e-12, 1e-9));
}

TEST_CASE("pseudo_inverse: Penrose conditions on a rank-deficient matrix") {
  std::mt19937_64 rng(52);
  Eigen::MatrixXd A = random_matrix(8, 3, rng) * random_matrix(3, 5, rng);  // rank 3
  Eigen::MatrixXd P = pseudo_inverse(A);
  CHECK(matrix_close(A * P * A, A, 1e-9, 1e-9));
  CHECK(matrix_close(P * A * P, P, 1e-9, 1e-9));
  CHECK(matrix_close((A * P).transpose(), A * P, 1e-9, 1e-9));
  CHECK(matrix_close((P * A).transpose(), P * A, 1e-9, 1e-9));
}
