#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sparsecoint {

/// Thrown when inputs violate a documented precondition (bad shapes, bad
/// options, malformed data).  CLI maps it to exit code 1.
struct InvalidInput : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a computation cannot be completed for numerical reasons
/// (singular moment matrices, non-SPD inputs, failed factorizations).
/// CLI maps it to exit code 2.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Multivariate time series: rows are time points (oldest first), columns are
/// series.  Labels are optional; when present there is one per column.
struct TimeSeriesMatrix {
  Eigen::MatrixXd values;
  std::vector<std::string> labels;

  TimeSeriesMatrix() = default;
  explicit TimeSeriesMatrix(Eigen::MatrixXd v, std::vector<std::string> names = {})
      : values(std::move(v)), labels(std::move(names)) {
    if (!labels.empty() && static_cast<Eigen::Index>(labels.size()) != values.cols())
      throw InvalidInput("TimeSeriesMatrix: label count does not match column count");
  }

  [[nodiscard]] Eigen::Index rows() const { return values.rows(); }
  [[nodiscard]] Eigen::Index cols() const { return values.cols(); }
};

/// How the cointegrating vectors are penalized during the block iterations.
enum class BetaPenalty { lasso, adaptive_lasso, ridge };

/// Penalty levels and iteration controls for the sparse fit.
///
/// Any tuning parameter left unset (std::nullopt) is selected automatically:
/// lambda1 and lambda2 by expanding-window time-series cross-validation,
/// lambda3 by BIC over the default grid.  Explicit values disable selection.
struct PenaltyConfig {
  /// One lasso level per cointegrating vector; a single entry is broadcast.
  std::optional<Eigen::VectorXd> lambda1;
  /// Ridge level on the short-run coefficient matrix.
  std::optional<double> lambda2;
  /// Off-diagonal L1 level on the error precision matrix.
  std::optional<double> lambda3;

  BetaPenalty beta_penalty = BetaPenalty::adaptive_lasso;

  double tol_outer = 1e-3;   ///< subspace-angle convergence threshold on beta
  double tol_inner = 1e-6;   ///< coordinate-descent convergence threshold
  int max_outer_iter = 100;  ///< cap on block iterations per phase
  int max_inner_iter = 10000;///< cap on coordinate-descent sweeps

  /// Ridge level used on beta during the starting-value pass.
  double warm_start_ridge = 1e-2;
  /// When false, the intercept row of the short-run matrix is exempt from
  /// the ridge penalty.
  bool penalize_intercept = true;
};

inline void validate(const PenaltyConfig& config) {
  if (config.lambda1)
    for (Eigen::Index i = 0; i < config.lambda1->size(); ++i)
      if (!((*config.lambda1)(i) >= 0.0))
        throw InvalidInput("PenaltyConfig: lambda1 entries must be >= 0");
  if (config.lambda2 && !(*config.lambda2 >= 0.0))
    throw InvalidInput("PenaltyConfig: lambda2 must be >= 0");
  if (config.lambda3 && !(*config.lambda3 >= 0.0))
    throw InvalidInput("PenaltyConfig: lambda3 must be >= 0");
  if (!(config.tol_outer > 0.0) || !(config.tol_inner > 0.0))
    throw InvalidInput("PenaltyConfig: tolerances must be > 0");
  if (config.max_outer_iter < 1 || config.max_inner_iter < 1)
    throw InvalidInput("PenaltyConfig: iteration caps must be >= 1");
  if (!(config.warm_start_ridge >= 0.0))
    throw InvalidInput("PenaltyConfig: warm_start_ridge must be >= 0");
}

/// Stacked regression view of a vector error correction model with p lags:
/// each row t of the blocks satisfies
///   Y(t,:) = X(t,:) * Gamma + Z(t,:) * Pi' + noise
/// where Y holds current differences, X holds the p-1 lagged difference
/// blocks (most recent first, optionally followed by a constant column), and
/// Z holds the lagged levels.
struct VecmDesign {
  Eigen::MatrixXd Y;  ///< (T-p) x q current differences
  Eigen::MatrixXd X;  ///< (T-p) x (q*(p-1) [+1]) lagged differences [+ ones]
  Eigen::MatrixXd Z;  ///< (T-p) x q lagged levels
  long T = 0;         ///< observation count of the original series
  long q = 0;         ///< series count
  long p = 0;         ///< lag order
  bool intercept = false;
  std::vector<std::string> labels;

  [[nodiscard]] long n() const { return T - p; }         ///< effective rows
  [[nodiscard]] long k() const { return X.cols(); }      ///< regressor count
};

/// Order-d differences of a series: row t of the result is
/// (1-L)^d y_{t+d}.  The result has T-d rows.
inline TimeSeriesMatrix difference(const TimeSeriesMatrix& series, int order = 1) {
  if (order < 1) throw InvalidInput("difference: order must be >= 1");
  if (series.rows() <= order)
    throw InvalidInput("difference: need more than `order` rows, got " +
                       std::to_string(series.rows()));
  Eigen::MatrixXd d = series.values;
  for (int k = 0; k < order; ++k)
    d = (d.bottomRows(d.rows() - 1) - d.topRows(d.rows() - 1)).eval();
  return TimeSeriesMatrix(std::move(d), series.labels);
}

/// Assemble the stacked regression blocks for a VECM with p lags from a
/// level series.  Rows cover t = p+1, ..., T of the original series.
inline VecmDesign build_design(const TimeSeriesMatrix& series, int p,
                               bool intercept = false) {
  const long T = series.rows();
  const long q = series.cols();
  if (q < 1) throw InvalidInput("build_design: need at least one series");
  if (p < 1) throw InvalidInput("build_design: lag order p must be >= 1");
  if (T <= p + 1)
    throw InvalidInput("build_design: need T > p + 1, got T = " + std::to_string(T) +
                       ", p = " + std::to_string(p));
  if (!series.values.allFinite())
    throw InvalidInput("build_design: series contains non-finite values");

  const long n = T - p;
  const Eigen::MatrixXd& y = series.values;
  Eigen::MatrixXd dy = y.bottomRows(T - 1) - y.topRows(T - 1);  // row t-1 is dy_t

  VecmDesign d;
  d.T = T;
  d.q = q;
  d.p = p;
  d.intercept = intercept;
  d.labels = series.labels;

  d.Y = dy.bottomRows(n);           // dy_t for t = p+1..T
  d.Z = y.middleRows(p - 1, n);     // y_{t-1} for t = p+1..T

  const long lag_cols = q * (p - 1);
  d.X.resize(n, lag_cols + (intercept ? 1 : 0));
  for (long i = 1; i <= p - 1; ++i)
    d.X.middleCols(q * (i - 1), q) = dy.middleRows(p - 1 - i, n);  // dy_{t-i}
  if (intercept) d.X.col(lag_cols).setOnes();
  return d;
}

namespace detail {

/// 64-bit mixing step used to derive independent-looking RNG streams from a
/// master seed and an index.
inline std::uint64_t mix_seed(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t stream_seed(std::uint64_t master, std::uint64_t index) {
  return mix_seed(master ^ mix_seed(index + 1));
}

}  // namespace detail

}  // namespace sparsecoint
