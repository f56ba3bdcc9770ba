#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "core.hpp"
#include "solvers.hpp"

namespace sparsecoint {

/// Candidate penalty levels, evaluated from the largest down (ties between
/// equal scores resolve toward the larger value).
struct LambdaGrid {
  Eigen::VectorXd values;
};

/// count log-spaced values from `high` down to `low` (inclusive).
inline LambdaGrid log_spaced_grid(double high, double low, int count = 20) {
  if (!(high > 0.0) || !(low > 0.0) || low > high)
    throw InvalidInput("log_spaced_grid: need high >= low > 0");
  if (count < 1) throw InvalidInput("log_spaced_grid: count must be >= 1");
  LambdaGrid g;
  g.values.resize(count);
  if (count == 1) {
    g.values(0) = high;
    return g;
  }
  const double lh = std::log(high), ll = std::log(low);
  for (int i = 0; i < count; ++i)
    g.values(i) = std::exp(lh + (ll - lh) * i / (count - 1));
  return g;
}

/// Default ridge grid for the short-run block: 1e2 down to 1e-3.
inline LambdaGrid default_lambda2_grid() { return log_spaced_grid(1e2, 1e-3); }

/// Default lasso grid for one cointegrating vector: from the level that
/// zeroes the whole column down three decades.
inline LambdaGrid default_lambda1_grid(double kill_level) {
  if (!(kill_level > 0.0))
    throw InvalidInput("default_lambda1_grid: kill level must be > 0");
  return log_spaced_grid(kill_level, kill_level * 1e-3, 40);
}

/// Default precision-penalty grid: from the largest absolute off-diagonal
/// covariance entry down three decades.
inline LambdaGrid default_lambda3_grid(const Eigen::MatrixXd& S) {
  double offmax = 0.0;
  for (Eigen::Index i = 0; i < S.rows(); ++i)
    for (Eigen::Index j = 0; j < S.cols(); ++j)
      if (i != j) offmax = std::max(offmax, std::abs(S(i, j)));
  if (offmax <= 0.0) offmax = 1e-4;  // degenerate: any level keeps it diagonal
  return log_spaced_grid(offmax, offmax * 1e-3);
}

/// Outcome of expanding-window cross-validation over a penalty grid.
struct CvResult {
  double lambda = 0.0;
  Eigen::VectorXd msfe;      ///< one entry per grid value, grid order (descending)
  Eigen::VectorXd msfe_se;   ///< standard error of each msfe entry (same order)
  std::vector<std::string> warnings;
};

/// Model hook for cv_select_lambda: fit on rows [0, train_end) of whatever
/// data the closure captures and return the one-step forecast of row
/// train_end of the target series.
using CvFitFn = std::function<Eigen::RowVectorXd(Eigen::Index train_end, double lambda)>;

/// Expanding-window time-series cross-validation.  The first floor(0.8 T)
/// rows (train_fraction adjustable) form the initial fitting sample; each
/// later row is forecast one step ahead from all data before it.  Scores are
/// mean squared standardized forecast errors, the standardization using each
/// series' full-sample standard deviation.  Degenerate (constant) series are
/// excluded with a warning.  A grid value whose fits fail is skipped.
///
/// By default the score minimizer is returned.  With one_se set, the largest
/// penalty statistically tied with the minimizer is returned instead (a
/// paired one-standard-error rule): the forecast-error curve is typically
/// flat-to-noisy below its optimum, so the minimizer drifts toward
/// under-penalized fits whose extra coefficients are pure noise.  The tie
/// test pairs the candidate's and the minimizer's losses origin by origin
/// (as equal-accuracy forecast tests do) and accepts the candidate when its
/// mean loss excess is within one standard error of that paired difference;
/// pairing cancels the noise the two fits share, so the band stays far
/// tighter than the marginal standard error of the curve and still rejects
/// candidates that drop genuinely predictive coefficients.
inline CvResult cv_select_lambda(const TimeSeriesMatrix& z, const CvFitFn& fit,
                                 const LambdaGrid& grid, double train_fraction = 0.8,
                                 bool one_se = false) {
  const Eigen::Index nz = z.rows(), m = z.cols();
  if (grid.values.size() == 0) throw InvalidInput("cv_select_lambda: empty grid");
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw InvalidInput("cv_select_lambda: train_fraction must be in (0, 1)");
  const Eigen::Index S = static_cast<Eigen::Index>(std::floor(train_fraction * nz));
  if (S < 2 || S >= nz)
    throw InvalidInput("cv_select_lambda: series too short for an initial sample of " +
                       std::to_string(S) + " rows");

  CvResult out;
  Eigen::VectorXd sigma(m);
  std::vector<bool> included(m, true);
  Eigen::Index m_included = 0;
  for (Eigen::Index i = 0; i < m; ++i) {
    const double mean = z.values.col(i).mean();
    sigma(i) = std::sqrt((z.values.col(i).array() - mean).square().sum() /
                         static_cast<double>(nz - 1));
    if (sigma(i) > 0.0) {
      ++m_included;
    } else {
      included[i] = false;
      out.warnings.push_back("cv_select_lambda: series " + std::to_string(i) +
                             " is constant; excluded from the forecast score");
    }
  }
  if (m_included == 0)
    throw InvalidInput("cv_select_lambda: every target series is constant");

  // Evaluate in descending order so equal scores keep the larger lambda.
  std::vector<Eigen::Index> order(static_cast<std::size_t>(grid.values.size()));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Eigen::Index>(i);
  std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    return grid.values(a) > grid.values(b);
  });

  out.msfe = Eigen::VectorXd::Constant(grid.values.size(),
                                       std::numeric_limits<double>::infinity());
  out.msfe_se = Eigen::VectorXd::Constant(grid.values.size(),
                                          std::numeric_limits<double>::infinity());
  const Eigen::Index n_origins = nz - S;
  // Per-origin scores for every usable candidate, kept for the paired
  // comparison against the minimizer.
  Eigen::MatrixXd origin_scores(n_origins, grid.values.size());
  std::vector<bool> usable_candidate(static_cast<std::size_t>(grid.values.size()), false);
  double best = std::numeric_limits<double>::infinity();
  Eigen::Index best_ix = -1;
  for (Eigen::Index oi : order) {
    const double lam = grid.values(oi);
    // One score per forecast origin (the mean over series of the squared
    // standardized error); the origins are the replication units for the
    // standard error of the curve.
    Eigen::VectorXd per_origin = Eigen::VectorXd::Zero(n_origins);
    bool usable = true;
    for (Eigen::Index t = S; t < nz && usable; ++t) {
      Eigen::RowVectorXd pred;
      try {
        pred = fit(t, lam);
      } catch (const std::exception&) {
        usable = false;
        break;
      }
      if (pred.size() != m || !pred.allFinite()) {
        usable = false;
        break;
      }
      double at_t = 0.0;
      for (Eigen::Index i = 0; i < m; ++i) {
        if (!included[i]) continue;
        const double e = (z.values(t, i) - pred(i)) / sigma(i);
        at_t += e * e;
      }
      per_origin(t - S) = at_t / static_cast<double>(m_included);
    }
    if (!usable) {
      out.warnings.push_back("cv_select_lambda: candidate " + std::to_string(lam) +
                             " dropped (fit failure)");
      continue;
    }
    const double score = per_origin.mean();
    out.msfe(oi) = score;
    out.msfe_se(oi) =
        n_origins > 1
            ? std::sqrt((per_origin.array() - score).square().sum() /
                        static_cast<double>(n_origins - 1) / static_cast<double>(n_origins))
            : 0.0;
    origin_scores.col(oi) = per_origin;
    usable_candidate[static_cast<std::size_t>(oi)] = true;
    if (score < best) {  // strict: ties keep the larger lambda seen earlier
      best = score;
      best_ix = oi;
    }
  }
  if (best_ix < 0)
    throw NumericalError("cv_select_lambda: every grid value failed to fit");
  if (one_se) {
    for (Eigen::Index oi : order) {  // descending: first hit is the largest lambda
      if (!usable_candidate[static_cast<std::size_t>(oi)]) continue;
      if (oi == best_ix) break;  // the minimizer always qualifies
      const Eigen::VectorXd diff = origin_scores.col(oi) - origin_scores.col(best_ix);
      const double excess = diff.mean();
      const double se =
          n_origins > 1
              ? std::sqrt((diff.array() - excess).square().sum() /
                          static_cast<double>(n_origins - 1) / static_cast<double>(n_origins))
              : 0.0;
      if (excess <= se) {
        out.lambda = grid.values(oi);
        return out;
      }
    }
  }
  out.lambda = grid.values(best_ix);
  return out;
}

/// Outcome of BIC selection for the precision penalty.
struct BicResult {
  double lambda = 0.0;
  Eigen::VectorXd bic;  ///< one entry per grid value, grid order
  GlassoResult omega;   ///< solve at the selected level (reusable)
  std::vector<std::string> warnings;
};

namespace detail {

inline double log_det_spd(const Eigen::MatrixXd& A, const char* who) {
  Eigen::LLT<Eigen::MatrixXd> llt(A);
  if (llt.info() != Eigen::Success)
    throw NumericalError(std::string(who) + ": matrix not positive definite");
  double ld = 0.0;
  for (Eigen::Index i = 0; i < A.rows(); ++i)
    ld += 2.0 * std::log(llt.matrixL()(i, i));
  return ld;
}

}  // namespace detail

/// Select the off-diagonal precision penalty by BIC over a grid:
///   BIC(lambda) = n [tr(S Omega) - log det Omega] + log(n) * #nonzero upper
/// off-diagonal entries, with S the (uncentered) second-moment matrix of the
/// residual rows.  Ties keep the larger lambda.
inline BicResult bic_select_lambda3(const Eigen::MatrixXd& residuals, const LambdaGrid& grid,
                                    double tol = 1e-7, int max_iter = 500) {
  const Eigen::Index n = residuals.rows(), q = residuals.cols();
  if (n < 2 || q < 1) throw InvalidInput("bic_select_lambda3: residual matrix too small");
  if (grid.values.size() == 0) throw InvalidInput("bic_select_lambda3: empty grid");
  const Eigen::MatrixXd S = residuals.transpose() * residuals / static_cast<double>(n);

  std::vector<Eigen::Index> order(static_cast<std::size_t>(grid.values.size()));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Eigen::Index>(i);
  std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    return grid.values(a) > grid.values(b);
  });

  BicResult out;
  out.bic = Eigen::VectorXd::Constant(grid.values.size(),
                                      std::numeric_limits<double>::infinity());
  double best = std::numeric_limits<double>::infinity();
  Eigen::Index best_ix = -1;
  GlassoResult best_fit;
  for (Eigen::Index oi : order) {
    const double lam = grid.values(oi);
    GlassoResult g;
    try {
      g = graphical_lasso(S, lam, tol, max_iter);
    } catch (const std::exception&) {
      out.warnings.push_back("bic_select_lambda3: candidate " + std::to_string(lam) +
                             " dropped (solve failure)");
      continue;
    }
    int df = 0;
    for (Eigen::Index i = 0; i < q; ++i)
      for (Eigen::Index j = i + 1; j < q; ++j)
        if (g.omega(i, j) != 0.0) ++df;
    const double fit_term =
        (S * g.omega).trace() - detail::log_det_spd(g.omega, "bic_select_lambda3");
    const double score = static_cast<double>(n) * fit_term +
                         std::log(static_cast<double>(n)) * static_cast<double>(df);
    out.bic(oi) = score;
    if (score < best) {
      best = score;
      best_ix = oi;
      best_fit = g;
    }
  }
  if (best_ix < 0)
    throw NumericalError("bic_select_lambda3: every grid value failed to solve");
  out.lambda = grid.values(best_ix);
  out.omega = std::move(best_fit);
  return out;
}

}  // namespace sparsecoint
