#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>

#include "core.hpp"

namespace sparsecoint {

/// Per-coefficient penalty weights for the weighted lasso.  Entries may be
/// +infinity, which pins the corresponding coefficient to exactly zero.
using LassoWeights = Eigen::MatrixXd;

/// Minimizer of ||Y - X B||_F^2 + lambda2 ||B||_F^2, one response column at a
/// time, via the normal equations (X'X + lambda2 I) B = X'Y.
inline Eigen::MatrixXd ridge_multivariate(const Eigen::MatrixXd& X,
                                          const Eigen::MatrixXd& Y,
                                          double lambda2) {
  if (X.rows() != Y.rows())
    throw InvalidInput("ridge_multivariate: X and Y row counts differ");
  if (!(lambda2 >= 0.0))
    throw InvalidInput("ridge_multivariate: lambda2 must be >= 0");
  const Eigen::Index k = X.cols();
  if (k == 0) return Eigen::MatrixXd::Zero(0, Y.cols());

  Eigen::MatrixXd gram = X.transpose() * X;
  gram.diagonal().array() += lambda2;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
      ldlt.vectorD().minCoeff() <= 0.0) {
    if (lambda2 > 0.0)
      throw NumericalError("ridge_multivariate: normal equations not positive definite");
    throw NumericalError(
        "ridge_multivariate: X is rank deficient; lambda2 = 0 requires full column rank");
  }
  return ldlt.solve(X.transpose() * Y);
}

/// Moore–Penrose pseudo-inverse via SVD.  Singular values below
/// rank_tol * sigma_max are treated as zero.
inline Eigen::MatrixXd pseudo_inverse(const Eigen::MatrixXd& A,
                                      double rank_tol = 1e-10) {
  if (A.rows() == 0 || A.cols() == 0) return Eigen::MatrixXd::Zero(A.cols(), A.rows());
  Eigen::BDCSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  const double cutoff = rank_tol * (sv.size() > 0 ? sv(0) : 0.0);
  Eigen::VectorXd inv = sv;
  for (Eigen::Index i = 0; i < inv.size(); ++i)
    inv(i) = sv(i) > cutoff && sv(i) > 0.0 ? 1.0 / sv(i) : 0.0;
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

namespace detail {

inline void require_symmetric(const Eigen::MatrixXd& A, const char* who) {
  if (A.rows() != A.cols()) throw InvalidInput(std::string(who) + ": matrix not square");
  const double scale = std::max(1.0, A.cwiseAbs().maxCoeff());
  if ((A - A.transpose()).cwiseAbs().maxCoeff() > 1e-8 * scale)
    throw InvalidInput(std::string(who) + ": matrix not symmetric");
}

/// Eigendecomposition of a symmetric positive definite matrix, with the
/// eigenvalues checked against a relative floor.
inline Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> spd_eigen(
    const Eigen::MatrixXd& A, const char* who, double tol) {
  require_symmetric(A, who);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A);
  if (es.info() != Eigen::Success)
    throw NumericalError(std::string(who) + ": eigendecomposition failed");
  const double floor = tol * std::max(1.0, es.eigenvalues().maxCoeff());
  if (es.eigenvalues().minCoeff() <= floor)
    throw NumericalError(std::string(who) + ": matrix not positive definite (min eigenvalue " +
                         std::to_string(es.eigenvalues().minCoeff()) + ")");
  return es;
}

}  // namespace detail

/// Symmetric positive definite square root A^{1/2}.
inline Eigen::MatrixXd matrix_sqrt_spd(const Eigen::MatrixXd& A, double tol = 1e-12) {
  auto es = detail::spd_eigen(A, "matrix_sqrt_spd", tol);
  return es.eigenvectors() * es.eigenvalues().cwiseSqrt().asDiagonal() *
         es.eigenvectors().transpose();
}

/// Symmetric positive definite inverse square root A^{-1/2}.
inline Eigen::MatrixXd matrix_inv_sqrt_spd(const Eigen::MatrixXd& A, double tol = 1e-12) {
  auto es = detail::spd_eigen(A, "matrix_inv_sqrt_spd", tol);
  return es.eigenvectors() * es.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
         es.eigenvectors().transpose();
}

/// Result of a (possibly weighted) multivariate lasso solve.
struct LassoResult {
  Eigen::MatrixXd B;      ///< k x m coefficient matrix
  bool converged = true;  ///< false when any column hit max_iter
  int sweeps = 0;         ///< total coordinate sweeps across columns
};

/// Largest KKT violation of B for the objective
///   (1/n) ||Y_j - X B_j||^2 + lambda1_j * sum_i w_ij |B_ij|
/// taken over all columns and coordinates: for nonzero coefficients the
/// stationarity residual, for zero coefficients the excess of |gradient|
/// over the penalty level.
inline double lasso_kkt_violation(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                                  const Eigen::MatrixXd& B, const Eigen::VectorXd& lambda1,
                                  const std::optional<LassoWeights>& weights = std::nullopt) {
  const double n = static_cast<double>(X.rows());
  double worst = 0.0;
  for (Eigen::Index j = 0; j < Y.cols(); ++j) {
    const double lam = lambda1.size() == 1 ? lambda1(0) : lambda1(j);
    Eigen::VectorXd g = (2.0 / n) * (X.transpose() * (X * B.col(j) - Y.col(j)));
    for (Eigen::Index i = 0; i < B.rows(); ++i) {
      const double w = weights ? (*weights)(i, j) : 1.0;
      if (std::isinf(w)) continue;  // pinned coordinate, no condition
      const double t = lam * w;
      const double v = B(i, j) != 0.0
                           ? std::abs(g(i) + t * (B(i, j) > 0 ? 1.0 : -1.0))
                           : std::max(0.0, std::abs(g(i)) - t);
      worst = std::max(worst, v);
    }
  }
  return worst;
}

/// Smallest penalty level at which column j of the lasso solution is
/// entirely zero: max_i |(2/n) X_i'y| / w_i over finite weights.
inline double lasso_kill_level(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                               const std::optional<Eigen::VectorXd>& weights = std::nullopt) {
  const double n = static_cast<double>(X.rows());
  double level = 0.0;
  for (Eigen::Index i = 0; i < X.cols(); ++i) {
    const double w = weights ? (*weights)(i) : 1.0;
    if (std::isinf(w) || w <= 0.0) continue;
    level = std::max(level, std::abs(2.0 * X.col(i).dot(y) / n) / w);
  }
  // Tiny relative headroom so "lambda >= kill level" zeroes the column even
  // when the solver's cached gram products round differently.
  return level * (1.0 + 1e-12);
}

/// Weighted lasso, solved per response column by cyclic coordinate descent
/// with cached Gram products.  Minimizes, for each column j,
///   (1/n) ||Y_j - X B_j||^2 + lambda1_j * sum_i w_ij |B_ij|.
///
/// lambda1 holds one level per column (a single entry is broadcast).  An
/// infinite weight pins its coefficient to zero; lambda1_j = 0 returns the
/// least-squares solution (pseudo-inverse when X is rank deficient).
/// Hitting max_iter flags converged = false instead of throwing.
inline LassoResult lasso_multivariate(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                                      const Eigen::VectorXd& lambda1,
                                      const std::optional<LassoWeights>& weights = std::nullopt,
                                      double tol = 1e-6, int max_iter = 10000,
                                      const std::optional<Eigen::MatrixXd>& init = std::nullopt) {
  const Eigen::Index n = X.rows(), k = X.cols(), m = Y.cols();
  if (Y.rows() != n) throw InvalidInput("lasso_multivariate: X and Y row counts differ");
  if (lambda1.size() != 1 && lambda1.size() != m)
    throw InvalidInput("lasso_multivariate: lambda1 must have 1 or Y.cols() entries");
  if (lambda1.minCoeff() < 0.0)
    throw InvalidInput("lasso_multivariate: lambda1 entries must be >= 0");
  if (weights && ((*weights).rows() != k || (*weights).cols() != m))
    throw InvalidInput("lasso_multivariate: weights must be k x m");
  if (!(tol > 0.0) || max_iter < 1)
    throw InvalidInput("lasso_multivariate: tol must be > 0 and max_iter >= 1");

  LassoResult out;
  out.B = Eigen::MatrixXd::Zero(k, m);
  if (k == 0 || m == 0) return out;
  if (init) {
    if (init->rows() != k || init->cols() != m)
      throw InvalidInput("lasso_multivariate: init must be k x m");
    out.B = *init;
  }

  const Eigen::MatrixXd gram = X.transpose() * X / static_cast<double>(n);
  const Eigen::MatrixXd cross = X.transpose() * Y / static_cast<double>(n);

  for (Eigen::Index j = 0; j < m; ++j) {
    const double lam = lambda1.size() == 1 ? lambda1(0) : lambda1(j);

    if (lam == 0.0) {
      // Unpenalized: plain least squares restricted to unpinned coordinates.
      std::vector<Eigen::Index> free_ix;
      for (Eigen::Index i = 0; i < k; ++i)
        if (!weights || !std::isinf((*weights)(i, j))) free_ix.push_back(i);
      out.B.col(j).setZero();
      if (!free_ix.empty()) {
        Eigen::MatrixXd Xf(n, static_cast<Eigen::Index>(free_ix.size()));
        for (std::size_t c = 0; c < free_ix.size(); ++c) Xf.col(c) = X.col(free_ix[c]);
        Eigen::VectorXd bf = pseudo_inverse(Xf) * Y.col(j);
        for (std::size_t c = 0; c < free_ix.size(); ++c) out.B(free_ix[c], j) = bf(c);
      }
      ++out.sweeps;
      continue;
    }

    Eigen::VectorXd b = out.B.col(j);
    for (Eigen::Index i = 0; i < k; ++i)
      if ((weights && std::isinf((*weights)(i, j))) || gram(i, i) <= 0.0) b(i) = 0.0;
    Eigen::VectorXd gb = gram * b;

    bool col_done = false;
    for (int sweep = 0; sweep < max_iter; ++sweep) {
      ++out.sweeps;
      for (Eigen::Index i = 0; i < k; ++i) {
        const double w = weights ? (*weights)(i, j) : 1.0;
        if (std::isinf(w) || gram(i, i) <= 0.0) continue;
        const double z = cross(i, j) - gb(i) + gram(i, i) * b(i);
        const double threshold = lam * w / 2.0;
        double bi = 0.0;
        if (z > threshold)
          bi = (z - threshold) / gram(i, i);
        else if (z < -threshold)
          bi = (z + threshold) / gram(i, i);
        if (bi != b(i)) {
          gb += gram.col(i) * (bi - b(i));
          b(i) = bi;
        }
      }
      // KKT gap from the cached products; cheap and scale-honest.
      double gap = 0.0;
      for (Eigen::Index i = 0; i < k; ++i) {
        const double w = weights ? (*weights)(i, j) : 1.0;
        if (std::isinf(w)) continue;
        if (gram(i, i) <= 0.0) continue;
        const double g = 2.0 * (gb(i) - cross(i, j));
        const double t = lam * w;
        const double v = b(i) != 0.0 ? std::abs(g + t * (b(i) > 0 ? 1.0 : -1.0))
                                     : std::max(0.0, std::abs(g) - t);
        gap = std::max(gap, v);
      }
      if (gap <= 0.1 * tol) {
        col_done = true;
        break;
      }
    }
    if (!col_done) out.converged = false;
    out.B.col(j) = b;
  }
  return out;
}

/// Result of a graphical lasso solve.
struct GlassoResult {
  Eigen::MatrixXd omega;  ///< precision matrix, symmetric positive definite
  bool converged = true;
  int sweeps = 0;
};

/// Largest violation of the stationarity conditions of
///   min  tr(S Omega) - log det Omega + lambda3 * sum_{i != j} |Omega_ij|
/// at Omega: on the diagonal |(Omega^{-1} - S)_ii|, off the diagonal the
/// excess of |(Omega^{-1} - S)_ij| over lambda3 (with sign agreement required
/// on the support).
inline double glasso_kkt_violation(const Eigen::MatrixXd& S, const Eigen::MatrixXd& omega,
                                   double lambda3) {
  Eigen::LLT<Eigen::MatrixXd> llt(omega);
  if (llt.info() != Eigen::Success)
    throw NumericalError("glasso_kkt_violation: omega not positive definite");
  Eigen::MatrixXd W =
      llt.solve(Eigen::MatrixXd::Identity(omega.rows(), omega.cols()));
  double worst = 0.0;
  for (Eigen::Index i = 0; i < S.rows(); ++i) {
    for (Eigen::Index j = 0; j < S.cols(); ++j) {
      const double d = W(i, j) - S(i, j);
      double v;
      if (i == j)
        v = std::abs(d);
      else if (omega(i, j) != 0.0)
        v = std::abs(d - lambda3 * (omega(i, j) > 0 ? 1.0 : -1.0));
      else
        v = std::max(0.0, std::abs(d) - lambda3);
      worst = std::max(worst, v);
    }
  }
  return worst;
}

namespace detail {

/// Try to finish the precision solve exactly, given a guess at the solution's
/// support and signs.  On the candidate pattern the objective is smooth: the
/// stationarity conditions pin the inverse at S + lambda3 * sign(Omega) on
/// active off-diagonal entries and at S on the diagonal, while zero entries
/// only need their inverse slack within lambda3.  With the pattern fixed the
/// problem is a support-constrained covariance selection, which Newton drives
/// to machine-precision stationarity in a handful of steps.  The result is
/// accepted only if the full optimality residual of the original penalized
/// problem clears `kkt_tol`, so a wrong pattern guess is rejected rather than
/// returned.
inline std::optional<Eigen::MatrixXd> glasso_support_polish(
    const Eigen::MatrixXd& S, double lambda3, const Eigen::MatrixXd& omega_start,
    double kkt_tol, int max_newton = 40) {
  const Eigen::Index q = S.rows();

  // Active pattern from the start iterate: upper-triangle coordinates, with
  // the diagonal always free (a positive definite matrix needs it).
  struct Entry {
    Eigen::Index i, j;
  };
  std::vector<Entry> active;
  for (Eigen::Index i = 0; i < q; ++i)
    for (Eigen::Index j = i; j < q; ++j)
      if (i == j || omega_start(i, j) != 0.0) active.push_back({i, j});
  const auto m = static_cast<Eigen::Index>(active.size());

  // Target for the inverse on the active set.
  Eigen::MatrixXd target = S;
  for (const auto& e : active)
    if (e.i != e.j) {
      const double s = omega_start(e.i, e.j) > 0.0 ? lambda3 : -lambda3;
      target(e.i, e.j) += s;
      target(e.j, e.i) += s;
    }

  Eigen::MatrixXd omega = omega_start;
  Eigen::LLT<Eigen::MatrixXd> llt(omega);
  if (llt.info() != Eigen::Success) return std::nullopt;
  const auto objective = [&](const Eigen::LLT<Eigen::MatrixXd>& f,
                             const Eigen::MatrixXd& o) {
    double logdet = 0.0;
    for (Eigen::Index i = 0; i < q; ++i) logdet += 2.0 * std::log(f.matrixL()(i, i));
    return (target.array() * o.array()).sum() - logdet;
  };
  double value = objective(llt, omega);

  for (int step = 0; step < max_newton; ++step) {
    const Eigen::MatrixXd W = llt.solve(Eigen::MatrixXd::Identity(q, q));
    Eigen::VectorXd grad(m);
    for (Eigen::Index n = 0; n < m; ++n) {
      const auto& e = active[n];
      const double c = e.i == e.j ? 1.0 : 2.0;
      grad(n) = c * (target(e.i, e.j) - W(e.i, e.j));
    }
    if (grad.lpNorm<Eigen::Infinity>() <= 0.05 * kkt_tol) break;

    // Restricted Hessian of tr(target * Omega) - log det Omega:
    // H_{mn} = tr(W B_m W B_n) with B the symmetric basis elements.
    Eigen::MatrixXd H(m, m);
    for (Eigen::Index a = 0; a < m; ++a) {
      const auto& ea = active[a];
      for (Eigen::Index b = a; b < m; ++b) {
        const auto& eb = active[b];
        double h = W(eb.j, ea.i) * W(ea.j, eb.i);
        if (ea.i != ea.j) h += W(eb.j, ea.j) * W(ea.i, eb.i);
        if (eb.i != eb.j) h += W(eb.i, ea.i) * W(ea.j, eb.j);
        if (ea.i != ea.j && eb.i != eb.j) h += W(eb.i, ea.j) * W(ea.i, eb.j);
        H(a, b) = h;
        H(b, a) = h;
      }
    }
    Eigen::LDLT<Eigen::MatrixXd> hf(H);
    if (hf.info() != Eigen::Success) return std::nullopt;
    const Eigen::VectorXd delta = hf.solve(-grad);
    if (!delta.allFinite()) return std::nullopt;

    Eigen::MatrixXd dir = Eigen::MatrixXd::Zero(q, q);
    for (Eigen::Index n = 0; n < m; ++n) {
      const auto& e = active[n];
      dir(e.i, e.j) += delta(n);
      if (e.i != e.j) dir(e.j, e.i) += delta(n);
    }
    double s = 1.0;
    bool moved = false;
    for (; s >= 1e-12; s /= 2.0) {
      Eigen::MatrixXd cand = omega + s * dir;
      Eigen::LLT<Eigen::MatrixXd> cf(cand);
      if (cf.info() != Eigen::Success) continue;
      const double cv = objective(cf, cand);
      if (cv <= value + 1e-12 * std::max(1.0, std::abs(value))) {
        omega = std::move(cand);
        llt = std::move(cf);
        value = cv;
        moved = true;
        break;
      }
    }
    if (!moved) break;
  }

  // Accept only on the original problem's optimality conditions; this also
  // rejects sign flips (a flipped active entry contributes 2*lambda3).
  if (Eigen::LLT<Eigen::MatrixXd>(omega).info() != Eigen::Success) return std::nullopt;
  if (glasso_kkt_violation(S, omega, lambda3) > kkt_tol) return std::nullopt;
  return omega;
}

/// Proximal-gradient solve of
///   min  tr(S Omega) - log det Omega + lambda3 * sum_{i != j} |Omega_ij|
/// with backtracking line search.  Slower than the block-coordinate path but
/// globally convergent; used as a fallback when that path fails to deliver a
/// positive definite, self-consistent solution (with the diagonal left
/// unpenalized, the working-covariance sweeps can oscillate on badly scaled
/// inputs).  Returns nullopt only if the line search collapses.
inline std::optional<GlassoResult> glasso_proximal(const Eigen::MatrixXd& S,
                                                   double lambda3, double kkt_tol,
                                                   int max_iter) {
  const Eigen::Index q = S.rows();
  // Start from the ridge-regularized inverse: for small penalties (the regime
  // that defeats the block-coordinate path) this is already near the
  // minimizer, and it is positive definite for any S with lambda3 > 0.
  Eigen::MatrixXd ridge = S;
  ridge.diagonal().array() += std::max(lambda3, 1e-10 * std::max(1.0, S.diagonal().maxCoeff()));
  Eigen::MatrixXd omega = Eigen::LLT<Eigen::MatrixXd>(ridge).solve(
      Eigen::MatrixXd::Identity(q, q));
  omega = ((omega + omega.transpose()) / 2.0).eval();

  const auto smooth_value = [&](const Eigen::LLT<Eigen::MatrixXd>& llt,
                                const Eigen::MatrixXd& m) {
    double logdet = 0.0;
    for (Eigen::Index i = 0; i < q; ++i)
      logdet += 2.0 * std::log(llt.matrixL()(i, i));
    return (S.array() * m.array()).sum() - logdet;
  };

  // Accelerated proximal gradient with a monotone safeguard: extrapolate,
  // step, and fall back to a plain step from the current iterate whenever the
  // extrapolated step fails to decrease the objective.
  Eigen::MatrixXd omega_prev = omega;
  double theta = 1.0;
  Eigen::LLT<Eigen::MatrixXd> llt(omega);
  double fx = smooth_value(llt, omega);
  const auto penalty_value = [&](const Eigen::MatrixXd& m) {
    double p = 0.0;
    for (Eigen::Index i = 0; i < q; ++i)
      for (Eigen::Index j = 0; j < q; ++j)
        if (i != j) p += std::abs(m(i, j));
    return lambda3 * p;
  };
  double full_fx = fx + penalty_value(omega);
  double t = 1.0;
  GlassoResult out;

  // One proximal step from `base`; returns false if the line search dies.
  Eigen::MatrixXd next;
  Eigen::LLT<Eigen::MatrixXd> llt_next;
  double f_next = 0.0;
  const auto prox_step = [&](const Eigen::MatrixXd& base,
                             const Eigen::LLT<Eigen::MatrixXd>& llt_base,
                             double f_base) {
    const Eigen::MatrixXd grad =
        S - llt_base.solve(Eigen::MatrixXd::Identity(q, q));
    for (; t >= 1e-18; t /= 2.0) {
      next = base - t * grad;
      const double cut = t * lambda3;
      for (Eigen::Index i = 0; i < q; ++i)
        for (Eigen::Index j = 0; j < q; ++j)
          if (i != j)
            next(i, j) = next(i, j) > cut    ? next(i, j) - cut
                         : next(i, j) < -cut ? next(i, j) + cut
                                             : 0.0;
      next = ((next + next.transpose()) / 2.0).eval();
      llt_next.compute(next);
      if (llt_next.info() != Eigen::Success) continue;
      f_next = smooth_value(llt_next, next);
      const Eigen::MatrixXd step = next - base;
      const double bound = f_base + (grad.array() * step.array()).sum() +
                           step.squaredNorm() / (2.0 * t);
      if (f_next <= bound + 1e-12 * std::max(1.0, std::abs(bound))) return true;
    }
    return false;
  };

  for (int iter = 0; iter < max_iter; ++iter) {
    ++out.sweeps;

    // Stationarity residual at the current iterate (same measure as
    // glasso_kkt_violation).
    const Eigen::MatrixXd W = llt.solve(Eigen::MatrixXd::Identity(q, q));
    double worst = 0.0;
    for (Eigen::Index i = 0; i < q; ++i) {
      for (Eigen::Index j = 0; j < q; ++j) {
        const double d = W(i, j) - S(i, j);
        double v;
        if (i == j)
          v = std::abs(d);
        else if (omega(i, j) != 0.0)
          v = std::abs(d - lambda3 * (omega(i, j) > 0 ? 1.0 : -1.0));
        else
          v = std::max(0.0, std::abs(d) - lambda3);
        worst = std::max(worst, v);
      }
    }
    if (worst <= kkt_tol) {
      out.converged = true;
      break;
    }

    // The first-order iteration localizes the support and signs quickly but
    // closes the last orders of magnitude of the stationarity residual very
    // slowly (the residual lives in inverse space, where errors are amplified
    // by the square of the covariance scale).  Periodically hand the current
    // pattern to the Newton finisher, which either returns a verified
    // solution or is rejected and costs a few small solves.
    if (iter % 250 == 0) {
      if (auto polished = glasso_support_polish(S, lambda3, omega, kkt_tol)) {
        out.converged = true;
        out.omega = *std::move(polished);
        return out;
      }
    }

    const double theta_next = (1.0 + std::sqrt(1.0 + 4.0 * theta * theta)) / 2.0;
    const Eigen::MatrixXd y =
        omega + ((theta - 1.0) / theta_next) * (omega - omega_prev);
    Eigen::LLT<Eigen::MatrixXd> llt_y(y);
    bool ok = false;
    if (llt_y.info() == Eigen::Success)
      ok = prox_step(y, llt_y, smooth_value(llt_y, y));
    double full_next = ok ? f_next + penalty_value(next)
                          : std::numeric_limits<double>::infinity();
    if (!ok || full_next > full_fx) {
      // Extrapolation overshot: plain step from the current iterate, which
      // the line search makes a descent step.
      if (!prox_step(omega, llt, fx)) return std::nullopt;
      full_next = f_next + penalty_value(next);
      theta = 1.0;
    } else {
      theta = theta_next;
    }
    omega_prev = std::move(omega);
    omega = std::move(next);
    llt = std::move(llt_next);
    fx = f_next;
    full_fx = full_next;
    t = std::min(t * 1.25, 1e6);
  }
  if (!out.converged) return std::nullopt;
  out.omega = std::move(omega);
  return out;
}

}  // namespace detail

/// L1-penalized precision estimation (off-diagonal penalty only): block
/// coordinate descent over the columns of the working covariance W, each
/// column update a small lasso solved by coordinate descent.  Returns a
/// symmetric positive definite precision matrix with exact zeros.
///
/// lambda3 = 0 requires S nonsingular and returns plain inverse(S).  For
/// singular S with positive diagonal and lambda3 > 0 a positive definite
/// solution still exists and is found.
inline GlassoResult graphical_lasso(const Eigen::MatrixXd& S, double lambda3,
                                    double tol = 1e-7, int max_iter = 500) {
  detail::require_symmetric(S, "graphical_lasso");
  if (!(lambda3 >= 0.0)) throw InvalidInput("graphical_lasso: lambda3 must be >= 0");
  if (!(tol > 0.0) || max_iter < 1)
    throw InvalidInput("graphical_lasso: tol must be > 0 and max_iter >= 1");
  const Eigen::Index q = S.rows();

  GlassoResult out;
  if (q == 1) {
    if (S(0, 0) <= 0.0) throw NumericalError("graphical_lasso: S has nonpositive diagonal");
    out.omega = Eigen::MatrixXd::Constant(1, 1, 1.0 / S(0, 0));
    return out;
  }

  if (lambda3 == 0.0) {
    Eigen::LLT<Eigen::MatrixXd> llt(S);
    if (llt.info() != Eigen::Success)
      throw NumericalError("graphical_lasso: S singular; lambda3 = 0 needs nonsingular S");
    out.omega = llt.solve(Eigen::MatrixXd::Identity(q, q));
    out.omega = ((out.omega + out.omega.transpose()) / 2.0).eval();
    return out;
  }

  if (S.diagonal().minCoeff() <= 0.0)
    throw NumericalError("graphical_lasso: S has nonpositive diagonal");

  // Working covariance starts at a feasible positive definite point whose
  // diagonal already equals diag(S) (the diagonal is never updated).
  Eigen::MatrixXd W = Eigen::MatrixXd(S.diagonal().asDiagonal());
  Eigen::MatrixXd Theta = Eigen::MatrixXd::Zero(q, q);  // column j holds theta_j

  const double off_scale = [&] {
    double s = 0.0;
    for (Eigen::Index i = 0; i < q; ++i)
      for (Eigen::Index j = 0; j < q; ++j)
        if (i != j) s = std::max(s, std::abs(S(i, j)));
    return std::max(s, 1e-12);
  }();

  auto update_column = [&](Eigen::Index col) {
    // Solve min (1/2) th' W11 th - s12' th + lambda3 ||th||_1 over the
    // off-column coordinates, using the current working covariance.
    Eigen::VectorXd th(q - 1), s12(q - 1);
    std::vector<Eigen::Index> ix(q - 1);
    Eigen::Index c = 0;
    for (Eigen::Index i = 0; i < q; ++i)
      if (i != col) {
        ix[c] = i;
        th(c) = Theta(i, col);
        s12(c) = S(i, col);
        ++c;
      }
    // Cached product W11 * th.
    Eigen::VectorXd wth = Eigen::VectorXd::Zero(q - 1);
    for (Eigen::Index a = 0; a < q - 1; ++a)
      for (Eigen::Index b = 0; b < q - 1; ++b) wth(a) += W(ix[a], ix[b]) * th(b);

    for (int inner = 0; inner < 1000; ++inner) {
      double delta = 0.0;
      for (Eigen::Index a = 0; a < q - 1; ++a) {
        const double waa = W(ix[a], ix[a]);
        const double z = s12(a) - wth(a) + waa * th(a);
        double next = 0.0;
        if (z > lambda3)
          next = (z - lambda3) / waa;
        else if (z < -lambda3)
          next = (z + lambda3) / waa;
        if (next != th(a)) {
          const double step = next - th(a);
          for (Eigen::Index b = 0; b < q - 1; ++b) wth(b) += W(ix[b], ix[a]) * step;
          th(a) = next;
          delta = std::max(delta, std::abs(step));
        }
      }
      if (delta <= 1e-4 * tol * off_scale) break;
    }

    // Positive definiteness safeguard: the new column must keep the Schur
    // complement of W positive.
    double quad = th.dot(wth);
    if (quad >= S(col, col) * (1.0 - 1e-10)) {
      const double shrink = std::sqrt(S(col, col) * (1.0 - 1e-8) / quad);
      th *= shrink;
      wth *= shrink;
    }

    double moved = 0.0;
    for (Eigen::Index a = 0; a < q - 1; ++a) {
      const double w_new = wth(a);
      moved = std::max(moved, std::abs(w_new - W(ix[a], col)));
      W(ix[a], col) = w_new;
      W(col, ix[a]) = w_new;
      Theta(ix[a], col) = th(a);
    }
    return moved;
  };

  bool done = false;
  for (int sweep = 0; sweep < max_iter; ++sweep) {
    ++out.sweeps;
    double moved = 0.0;
    for (Eigen::Index col = 0; col < q; ++col) moved = std::max(moved, update_column(col));
    if (moved <= tol * off_scale) {
      done = true;
      break;
    }
  }
  out.converged = done;

  // One synchronizing pass so every column's theta reflects the final W,
  // then recover the precision matrix from the block inverse identities.
  for (Eigen::Index col = 0; col < q; ++col) update_column(col);

  // On badly scaled inputs the sweeps above can oscillate instead of
  // settling (the diagonal is unpenalized, so the usual convergence guarantee
  // for the working-covariance updates does not apply); when the recovered
  // precision is inconsistent, redo the solve with the slow-but-sure
  // proximal-gradient path.
  const auto fallback = [&]() -> GlassoResult {
    const double kkt_tol = 1e-7 * std::max({1.0, off_scale, S.diagonal().maxCoeff()});
    auto slow = detail::glasso_proximal(S, lambda3, kkt_tol, 100000);
    if (!slow)
      throw NumericalError("graphical_lasso: lost positive definiteness");
    return *std::move(slow);
  };

  Eigen::MatrixXd omega = Eigen::MatrixXd::Zero(q, q);
  for (Eigen::Index col = 0; col < q; ++col) {
    double quad = 0.0;
    for (Eigen::Index i = 0; i < q; ++i)
      if (i != col) quad += Theta(i, col) * W(i, col);
    const double schur = S(col, col) - quad;
    if (schur <= 0.0) return fallback();
    const double o22 = 1.0 / schur;
    omega(col, col) = o22;
    for (Eigen::Index i = 0; i < q; ++i)
      if (i != col) omega(i, col) = -Theta(i, col) * o22;
  }
  // Symmetrize while preserving exact zeros on the support.
  for (Eigen::Index i = 0; i < q; ++i) {
    for (Eigen::Index j = i + 1; j < q; ++j) {
      if (omega(i, j) == 0.0 || omega(j, i) == 0.0) {
        omega(i, j) = omega(j, i) = 0.0;
      } else {
        const double v = (omega(i, j) + omega(j, i)) / 2.0;
        omega(i, j) = omega(j, i) = v;
      }
    }
  }

  Eigen::LLT<Eigen::MatrixXd> check(omega);
  if (check.info() != Eigen::Success) return fallback();
  out.omega = std::move(omega);
  return out;
}

}  // namespace sparsecoint
