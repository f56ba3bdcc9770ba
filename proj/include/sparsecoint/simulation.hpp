#pragma once

#include <Eigen/Dense>
#include <boost/math/distributions/students_t.hpp>

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "sparsecoint/core.hpp"
#include "sparsecoint/estimator.hpp"
#include "sparsecoint/rank.hpp"

// Monte Carlo harness: the catalog of benchmark data-generating processes,
// the recursive sample generator, and the two studies (estimation-accuracy
// angles and rank-recovery frequencies) with long-format report emission.

namespace sparsecoint {

/// One benchmark data-generating process:
///   dy_t = alpha beta' y_{t-1} + gamma_coef * dy_{t-1} + e_t,
/// alpha = a * beta_true, e_t iid N(0, I_q), zero initial conditions.
struct SimDesign {
  std::string name;
  long q = 0;
  long T = 0;
  Eigen::MatrixXd beta_true;  ///< q x r_true
  double a = -0.4;            ///< adjustment scalar, alpha = a * beta_true
  double gamma_coef = 0.1;    ///< first-lag coefficient matrix is gamma_coef * I
  long r_true = 0;
};

/// The six benchmark designs.  Low-dimensional block (T=500, q=4,
/// gamma=0.1): a single-relation sparse vector, a two-relation sparse pair,
/// and a dense single relation.  High-dimensional block (T=50, q=11,
/// gamma=0.4): a three-entry sparse vector, a four-relation block pattern,
/// and a dense vector with small tail entries.  The adjustment scalar
/// defaults to -0.4; studies cross each design with their own list of a
/// values.
inline std::vector<SimDesign> design_catalog() {
  std::vector<SimDesign> designs;

  auto add = [&](std::string name, long q, long T, double gamma_coef,
                 const Eigen::MatrixXd& beta) {
    SimDesign d;
    d.name = std::move(name);
    d.q = q;
    d.T = T;
    d.gamma_coef = gamma_coef;
    d.beta_true = beta;
    d.r_true = beta.cols();
    designs.push_back(std::move(d));
  };

  {
    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(4, 1);
    b(0, 0) = 1.0;
    add("lowdim-sparse-r1", 4, 500, 0.1, b);
  }
  {
    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(4, 2);
    b(0, 0) = 1.0;
    b(1, 1) = 1.0;
    add("lowdim-sparse-r2", 4, 500, 0.1, b);
  }
  {
    Eigen::MatrixXd b(4, 1);
    b << 1.0, 0.5, 0.5, 0.5;
    add("lowdim-dense-r1", 4, 500, 0.1, b);
  }
  {
    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(11, 1);
    b.topRows(3).setOnes();
    add("highdim-sparse-r1", 11, 50, 0.4, b);
  }
  {
    // Block pattern: three relations over three disjoint triples of series,
    // a fourth over the remaining pair.
    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(11, 4);
    b.block(0, 0, 3, 1).setOnes();
    b.block(3, 1, 3, 1).setOnes();
    b.block(6, 2, 3, 1).setOnes();
    b.block(9, 3, 2, 1).setOnes();
    add("highdim-sparse-r4", 11, 50, 0.4, b);
  }
  {
    Eigen::MatrixXd b = Eigen::MatrixXd::Constant(11, 1, 0.1);
    b.topRows(3).setOnes();
    add("highdim-dense-r1", 11, 50, 0.4, b);
  }
  return designs;
}

/// The adjustment scalars every design is benchmarked at.
inline std::vector<double> catalog_adjustments() { return {-0.2, -0.4, -0.6, -0.8}; }

/// Generate T observations of the design's process from zero initial
/// conditions.  Draw order (load-bearing for reproducibility): one
/// mt19937_64 stream seeded with `seed`, standard-normal innovations drawn
/// per time step with the series index ascending inside each step.  Row t-1
/// of the result is y_t; the implicit y_0 = dy_0 = 0 presample is not
/// stored, so the first row equals the first innovation vector exactly.
inline TimeSeriesMatrix generate_sample(const SimDesign& design, std::uint64_t seed) {
  if (design.q < 1 || design.T < 1)
    throw InvalidInput("generate_sample: design needs q >= 1 and T >= 1");
  if (design.beta_true.rows() != design.q)
    throw InvalidInput("generate_sample: beta_true must have q rows");
  const Eigen::MatrixXd alpha = design.a * design.beta_true;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  Eigen::MatrixXd y(design.T, design.q);
  Eigen::VectorXd level = Eigen::VectorXd::Zero(design.q);
  Eigen::VectorXd diff = Eigen::VectorXd::Zero(design.q);
  Eigen::VectorXd e(design.q);
  for (long t = 0; t < design.T; ++t) {
    for (long i = 0; i < design.q; ++i) e(i) = normal(rng);
    diff = alpha * (design.beta_true.transpose() * level) + design.gamma_coef * diff + e;
    level += diff;
    y.row(t) = level.transpose();
  }
  return TimeSeriesMatrix(y);
}

/// One long-format report entry; `se` is NaN where no dispersion measure
/// applies (emitted as an empty CSV field).
struct StudyRow {
  std::string design;
  std::string method;
  double a = 0.0;
  std::string metric;
  double value = 0.0;
  double se = std::numeric_limits<double>::quiet_NaN();
};

/// Study output: the long-format rows plus the run count.  Row order is
/// deterministic (designs, then adjustments, then methods, then metrics).
struct StudyReport {
  int M = 0;
  std::vector<StudyRow> rows;

  /// First row matching the given coordinates, if any.
  const StudyRow* find(const std::string& design, const std::string& method, double a,
                       const std::string& metric) const {
    for (const auto& row : rows)
      if (row.design == design && row.method == method && row.a == a && row.metric == metric)
        return &row;
    return nullptr;
  }

  /// CSV emission, schema: design,method,a,metric,value,se.
  std::string to_csv() const {
    std::ostringstream out;
    out.precision(12);
    out << "design,method,a,metric,value,se\n";
    for (const auto& row : rows) {
      out << row.design << ',' << row.method << ',' << row.a << ',' << row.metric << ','
          << row.value << ',';
      if (std::isfinite(row.se)) out << row.se;
      out << '\n';
    }
    return out.str();
  }
};

enum class StudyMethod { johansen, sparse_lasso, sparse_adaptive_lasso };

inline const char* study_method_name(StudyMethod m) {
  switch (m) {
    case StudyMethod::johansen:
      return "johansen";
    case StudyMethod::sparse_lasso:
      return "sparse_lasso";
    default:
      return "sparse_adaptive_lasso";
  }
}

namespace detail {

/// Two-sided paired t-test p-value for mean(diff) = 0.  Degenerate spreads
/// collapse to 1 (identical samples) or 0 (constant nonzero shift); fewer
/// than two pairs give NaN.
inline double paired_t_pvalue(const std::vector<double>& diff) {
  const std::size_t n = diff.size();
  if (n < 2) return std::numeric_limits<double>::quiet_NaN();
  double mean = 0.0;
  for (double d : diff) mean += d;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double d : diff) ss += (d - mean) * (d - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (!(sd > 0.0)) return mean == 0.0 ? 1.0 : 0.0;
  const double t = mean / (sd / std::sqrt(static_cast<double>(n)));
  boost::math::students_t_distribution<double> dist(static_cast<double>(n - 1));
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

/// Mean and Monte Carlo standard error (sd / sqrt(n)) of a sample.
inline std::pair<double, double> mean_and_se(const std::vector<double>& x) {
  const std::size_t n = x.size();
  if (n == 0)
    return {std::numeric_limits<double>::quiet_NaN(),
            std::numeric_limits<double>::quiet_NaN()};
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  if (n == 1) return {mean, std::numeric_limits<double>::quiet_NaN()};
  double ss = 0.0;
  for (double v : x) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / static_cast<double>(n - 1) / static_cast<double>(n))};
}

inline CointegrationFit study_fit(const VecmDesign& d, long r, StudyMethod method) {
  switch (method) {
    case StudyMethod::johansen:
      return johansen_ml(d, r);
    case StudyMethod::sparse_lasso: {
      PenaltyConfig cfg;
      cfg.beta_penalty = BetaPenalty::lasso;
      return fit_sparse_vecm(d, r, cfg);
    }
    default: {
      PenaltyConfig cfg;
      cfg.beta_penalty = BetaPenalty::adaptive_lasso;
      return fit_sparse_vecm(d, r, cfg);
    }
  }
}

}  // namespace detail

/// Estimation-accuracy study: for each design x adjustment x method, fit M
/// simulated samples at the true rank (lag order p=2, no intercept — the
/// generating process is zero-mean) and record the subspace angle between
/// the fitted and true cointegration spaces.  Emitted metrics per cell:
/// mean_angle (with Monte Carlo standard error), failed_runs, and for the
/// sparse methods p_value_vs_johansen from a two-sided paired t-test on
/// per-run angles (paired over runs where both fits succeeded).  Run m of
/// every method sees the sample generated with seed `seed + m`, so methods
/// are compared on identical data.
inline StudyReport run_angle_study(const std::vector<SimDesign>& designs,
                                   const std::vector<StudyMethod>& methods, int M,
                                   std::uint64_t seed,
                                   const std::vector<double>& adjustments = {}) {
  if (M < 2) throw InvalidInput("run_angle_study: need M >= 2");
  if (designs.empty()) throw InvalidInput("run_angle_study: no designs");
  if (methods.empty()) throw InvalidInput("run_angle_study: no methods");
  StudyReport report;
  report.M = M;
  const std::vector<double> a_list = adjustments.empty() ? catalog_adjustments() : adjustments;

  for (const auto& base : designs) {
    for (double a : a_list) {
      SimDesign design = base;
      design.a = a;
      // angles[k][m]: NaN marks a failed run, keeping pairs aligned.
      std::vector<std::vector<double>> angles(
          methods.size(),
          std::vector<double>(static_cast<std::size_t>(M),
                              std::numeric_limits<double>::quiet_NaN()));
      for (int m = 0; m < M; ++m) {
        const auto sample = generate_sample(design, seed + static_cast<std::uint64_t>(m));
        const auto d = build_design(sample, 2, false);
        for (std::size_t k = 0; k < methods.size(); ++k) {
          try {
            const auto fit = detail::study_fit(d, design.r_true, methods[k]);
            angles[k][static_cast<std::size_t>(m)] =
                subspace_angle(fit.beta, design.beta_true);
          } catch (const std::exception&) {
            // recorded below via failed_runs
          }
        }
      }

      std::optional<std::size_t> johansen_ix;
      for (std::size_t k = 0; k < methods.size(); ++k)
        if (methods[k] == StudyMethod::johansen) johansen_ix = k;

      for (std::size_t k = 0; k < methods.size(); ++k) {
        std::vector<double> ok;
        for (double v : angles[k])
          if (std::isfinite(v)) ok.push_back(v);
        const auto [mean, se] = detail::mean_and_se(ok);
        const char* method = study_method_name(methods[k]);
        report.rows.push_back({design.name, method, a, "mean_angle", mean, se});
        report.rows.push_back({design.name, method, a, "failed_runs",
                               static_cast<double>(M - ok.size()),
                               std::numeric_limits<double>::quiet_NaN()});
        if (johansen_ix && k != *johansen_ix) {
          std::vector<double> diff;
          for (int m = 0; m < M; ++m) {
            const double mine = angles[k][static_cast<std::size_t>(m)];
            const double other = angles[*johansen_ix][static_cast<std::size_t>(m)];
            if (std::isfinite(mine) && std::isfinite(other)) diff.push_back(mine - other);
          }
          report.rows.push_back({design.name, method, a, "p_value_vs_johansen",
                                 detail::paired_t_pvalue(diff),
                                 std::numeric_limits<double>::quiet_NaN()});
        }
      }
    }
  }
  return report;
}

/// Rank-recovery study: for each design x adjustment, run the rank search on
/// M simulated samples (lag order p=2, no intercept) and report the relative
/// frequency of every selected rank 0..q plus failed_runs.  Frequencies are
/// over successful runs and sum to one per cell.
inline StudyReport run_rank_study(const std::vector<SimDesign>& designs, int M,
                                  std::uint64_t seed,
                                  const std::vector<double>& adjustments = {},
                                  const PenaltyConfig& config = {}) {
  if (M < 2) throw InvalidInput("run_rank_study: need M >= 2");
  if (designs.empty()) throw InvalidInput("run_rank_study: no designs");
  StudyReport report;
  report.M = M;
  const std::vector<double> a_list = adjustments.empty() ? catalog_adjustments() : adjustments;

  for (const auto& base : designs) {
    for (double a : a_list) {
      SimDesign design = base;
      design.a = a;
      std::vector<long> counts(static_cast<std::size_t>(design.q) + 1, 0);
      long failures = 0;
      for (int m = 0; m < M; ++m) {
        const auto sample = generate_sample(design, seed + static_cast<std::uint64_t>(m));
        try {
          const auto d = build_design(sample, 2, false);
          const auto est = select_rank(d, config);
          ++counts[static_cast<std::size_t>(est.r_hat)];
        } catch (const std::exception&) {
          ++failures;
        }
      }
      const long ok = static_cast<long>(M) - failures;
      for (long r = 0; r <= design.q; ++r)
        report.rows.push_back({design.name, "rsc", a, "rank_freq_" + std::to_string(r),
                               ok > 0 ? static_cast<double>(counts[static_cast<std::size_t>(r)]) /
                                            static_cast<double>(ok)
                                      : std::numeric_limits<double>::quiet_NaN(),
                               std::numeric_limits<double>::quiet_NaN()});
      report.rows.push_back({design.name, "rsc", a, "failed_runs",
                             static_cast<double>(failures),
                             std::numeric_limits<double>::quiet_NaN()});
    }
  }
  return report;
}

}  // namespace sparsecoint
