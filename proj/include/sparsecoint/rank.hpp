#pragma once

// Cointegration-rank search: screen the long-run signal left after removing
// the fitted short-run dynamics, counting level-projection eigenvalues
// against a scaled-noise threshold, and iterate until the count reproduces
// itself.

#include <sparsecoint/estimator.hpp>

#include <algorithm>
#include <string>
#include <vector>

namespace sparsecoint {

/// Threshold ingredients for one screening pass.
struct RankThreshold {
  double mu = 0.0;  ///< eigenvalue cutoff 2 * s2 * (q + l)
  double s2 = 0.0;  ///< residual mean square of Y_tilde off the design span
  long l = 0;       ///< numerical rank of the screening design block
};

/// Outcome of the iterative rank search.
struct RankEstimate {
  long r_hat = 0;
  Eigen::VectorXd eigenvalues;  ///< of Y_tilde' P Y_tilde, descending (q values)
  double mu = 0.0;
  double s2 = 0.0;
  int iterations = 0;
  std::vector<long> trajectory;  ///< interim estimates, starting from q
  std::vector<std::string> flags;
};

/// Noise scale and eigenvalue cutoff for screening Y_tilde against the span
/// of a design block z: with P the orthogonal projector onto that span
/// and l its dimension,
///   s2 = ||Y_tilde - P Y_tilde||_F^2 / ((n - l) * q),   mu = 2 * s2 * (q + l).
/// `sample_size` overrides the row count n in the denominator (kept for the
/// convention that counts raw series length instead of usable rows).
inline RankThreshold rsc_threshold(const Eigen::MatrixXd& y_tilde,
                                   const Eigen::MatrixXd& z,
                                   std::optional<long> sample_size = std::nullopt) {
  const Eigen::Index n = y_tilde.rows();
  const Eigen::Index q = y_tilde.cols();
  if (n == 0 || q == 0) throw InvalidInput("rsc_threshold: empty response");
  if (z.rows() != n) throw InvalidInput("rsc_threshold: row counts differ");

  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(z);
  RankThreshold out;
  out.l = z.cols() == 0 ? 0 : static_cast<long>(cod.rank());

  const double rows = static_cast<double>(sample_size.value_or(static_cast<long>(n)));
  const double denom = (rows - static_cast<double>(out.l)) * static_cast<double>(q);
  if (!(denom > 0.0))
    throw InvalidInput("rsc_threshold: no residual degrees of freedom "
                       "(level rank >= sample size)");

  Eigen::MatrixXd resid = y_tilde;
  if (out.l > 0) resid -= z * cod.solve(y_tilde);
  out.s2 = resid.squaredNorm() / denom;
  out.mu = 2.0 * out.s2 * static_cast<double>(q + out.l);
  return out;
}

/// Iterative rank search.  Starting from full rank, each pass fits the
/// short-run block at the current rank with the cheap ridge starting-value
/// pass (no tuning), strips it from the differences, and counts how many
/// eigenvalues of the projected cross-moment Y_tilde' P Y_tilde reach the
/// threshold mu.  The search stops when the count reproduces itself; a
/// two-cycle returns the smaller of the two ranks and is flagged.  Both 0
/// and q are legal outcomes.  `raw_sample_size` switches the noise-scale
/// denominator from usable rows n to the raw series length n + p.
///
/// P projects onto the span of the COMBINED design (short-run block and
/// levels together), not the levels alone.  With the short-run part
/// stripped from Y_tilde, the long-run coefficient is the only
/// full-strength signal left inside that span, so the count still targets
/// its rank.  The wider span is what makes the count reliable: against a
/// projection of dimension l, the largest noise eigenvalue concentrates
/// near s2 * (sqrt(q) + sqrt(l))^2 while the cutoff is 2 * s2 * (q + l),
/// and the two coincide when l == q -- exactly the levels-only case -- so
/// that narrower screen has no noise margin and over-counts on noise alone.
inline RankEstimate select_rank(const VecmDesign& d, const PenaltyConfig& config,
                                bool raw_sample_size = false) {
  validate(config);
  RankEstimate est;
  long r = d.q;
  est.trajectory.push_back(r);

  const std::optional<long> rows =
      raw_sample_size ? std::optional<long>(static_cast<long>(d.n()) + d.p)
                      : std::nullopt;

  Eigen::MatrixXd design(d.n(), d.k() + d.q);
  if (d.k() > 0)
    design << d.X, d.Z;
  else
    design = d.Z;

  const int max_passes = 2 * static_cast<int>(d.q) + 8;
  for (int pass = 0; pass < max_passes; ++pass) {
    ++est.iterations;
    const auto warm = fit_warm_start(d, r, config);
    Eigen::MatrixXd y_tilde = d.Y;
    if (d.k() > 0) y_tilde -= d.X * warm.gamma;

    const auto th = rsc_threshold(y_tilde, design, rows);
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(design);
    const Eigen::MatrixXd projected = design * cod.solve(y_tilde);
    const Eigen::MatrixXd cross = projected.transpose() * projected;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(
        ((cross + cross.transpose()) / 2.0).eval());
    if (es.info() != Eigen::Success)
      throw NumericalError("select_rank: eigenvalue decomposition failed");

    est.eigenvalues.resize(d.q);
    for (Eigen::Index i = 0; i < d.q; ++i)
      est.eigenvalues(i) = std::max(0.0, es.eigenvalues()(d.q - 1 - i));
    est.mu = th.mu;
    est.s2 = th.s2;

    long r_new = 0;
    for (Eigen::Index i = 0; i < d.q; ++i)
      if (est.eigenvalues(i) >= th.mu) ++r_new;

    est.trajectory.push_back(r_new);
    if (r_new == r) {
      est.r_hat = r_new;
      return est;
    }
    const auto len = est.trajectory.size();
    if (len >= 3 && est.trajectory[len - 1] == est.trajectory[len - 3]) {
      est.r_hat = std::min(r, r_new);
      est.flags.push_back("rank_two_cycle");
      return est;
    }
    r = r_new;
  }
  est.r_hat = std::min(est.trajectory[est.trajectory.size() - 1],
                       est.trajectory[est.trajectory.size() - 2]);
  est.flags.push_back("rank_search_no_convergence");
  return est;
}

}  // namespace sparsecoint
