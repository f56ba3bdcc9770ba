#pragma once

#include <Eigen/Dense>

#include <iostream>
#include <random>

// Shared assertions and generators for the test suite.

namespace testutil {

// Element-wise closeness with combined absolute/relative tolerance.  Prints
// the first few mismatches to stderr so failures are diagnosable.
inline bool matrix_close(const Eigen::MatrixXd& lhs, const Eigen::MatrixXd& rhs,
                         double atol = 1e-12, double rtol = 1e-9) {
  if (lhs.rows() != rhs.rows() || lhs.cols() != rhs.cols()) {
    std::cerr << "shape mismatch: " << lhs.rows() << "x" << lhs.cols() << " vs "
              << rhs.rows() << "x" << rhs.cols() << "\n";
    return false;
  }
  int reported = 0;
  bool ok = true;
  for (Eigen::Index i = 0; i < lhs.rows(); ++i) {
    for (Eigen::Index j = 0; j < lhs.cols(); ++j) {
      const double a = lhs(i, j), b = rhs(i, j);
      const double tol = atol + rtol * std::max(std::abs(a), std::abs(b));
      if (!(std::abs(a - b) <= tol)) {
        ok = false;
        if (reported++ < 5)
          std::cerr << "mismatch at (" << i << "," << j << "): " << a << " vs " << b
                    << " (|diff| = " << std::abs(a - b) << ", tol = " << tol << ")\n";
      }
    }
  }
  return ok;
}

inline Eigen::MatrixXd random_matrix(int rows, int cols, std::mt19937_64& rng,
                                     double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Eigen::MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = normal(rng);
  return m;
}

// Random symmetric positive definite matrix with eigenvalues bounded away
// from zero.
inline Eigen::MatrixXd random_spd(int dim, std::mt19937_64& rng, double ridge = 0.5) {
  Eigen::MatrixXd a = random_matrix(dim, dim, rng);
  return a * a.transpose() / dim + ridge * Eigen::MatrixXd::Identity(dim, dim);
}

// T x q level sample from a two-lag error-correction process:
//   dy_t = gamma_coef * dy_{t-1} + a * beta beta' y_{t-1} + e_t,
// started at y_0 = dy_0 = 0, with standard normal noise (noise_scale = 0
// gives the deterministic path, in which case start from y_0 = y0_seed).
inline Eigen::MatrixXd simulate_vecm(int T, const Eigen::MatrixXd& beta, double a,
                                     double gamma_coef, std::mt19937_64& rng,
                                     double noise_scale = 1.0,
                                     const Eigen::VectorXd* y0 = nullptr) {
  const int q = static_cast<int>(beta.rows());
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd y(T, q);
  Eigen::VectorXd level = y0 ? *y0 : Eigen::VectorXd::Zero(q);
  Eigen::VectorXd diff = Eigen::VectorXd::Zero(q);
  const Eigen::MatrixXd pi = a * beta * beta.transpose();
  for (int t = 0; t < T; ++t) {
    Eigen::VectorXd e(q);
    for (int i = 0; i < q; ++i) e(i) = noise_scale * normal(rng);
    const Eigen::VectorXd d_new = gamma_coef * diff + pi * level + e;
    level += d_new;
    diff = d_new;
    y.row(t) = level.transpose();
  }
  return y;
}

}  // namespace testutil
