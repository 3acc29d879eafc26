#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "merlin/formula.hpp"

namespace merlin {

/// Spline knots. When `log` is set the knots live on the ln-scale and
/// evaluation transforms x first.
struct KnotVector {
  std::vector<double> interior;
  double lower = 0;
  double upper = 1;
  bool log = false;

  std::vector<double> all() const;
  bool operator==(const KnotVector&) const = default;
};

/// Empirical quantile with linear interpolation between order statistics
/// (sorted input, p in [0,1]).
double quantile_sorted(const std::vector<double>& sorted, double p);

/// df-1 interior knots at centiles 100k/df of the (optionally event-filtered)
/// values; boundaries at min/max of all values.
KnotVector place_knots(std::span<const double> values, int df,
                       const std::vector<std::uint8_t>* event_mask = nullptr, bool log = false);

/// Knots given in full (boundaries first and last), on the original scale.
KnotVector knots_from_list(const std::vector<double>& knots, bool log);

/// Restricted cubic spline terms in u (already transformed). Column 0 is u.
void rcs_row(double u, const KnotVector& kv, int deriv, double* out);
/// Matrix version taking x on the original scale; derivatives are in u.
Eigen::MatrixXd rcs_eval(std::span<const double> x, const KnotVector& kv, int deriv);

/// Cubic B-spline basis (Cox-de Boor). Points outside [lower, upper] give
/// zero rows and bump the counter returned by bs_outside_count().
std::size_t bs_columns(std::size_t n_interior, bool intercept);
void bs_row(double x, const std::vector<double>& interior, double lower, double upper,
            bool intercept, int deriv, double* out);
Eigen::MatrixXd bs_eval(std::span<const double> x, const std::vector<double>& interior,
                        double lower, double upper, bool intercept, int deriv);
std::size_t bs_outside_count();

/// Fractional polynomial columns with analytic derivatives in x.
void fp_row(double x, const std::vector<double>& powers, int deriv, double* out);
Eigen::MatrixXd fp_eval(std::span<const double> x, const std::vector<double>& powers, int deriv);

/// Maps raw basis columns to orthonormal ones: [1, raw] * m, dropping the
/// constant column. `m` is upper triangular.
struct BasisTransform {
  Eigen::MatrixXd m;

  /// Writes the transformed row; deriv > 0 drops the constant's contribution.
  void apply(const double* raw, int deriv, double* out) const;
  Eigen::MatrixXd apply(const Eigen::MatrixXd& raw, int deriv) const;
  bool operator==(const BasisTransform& o) const { return m == o.m; }
};

/// Gram-Schmidt against a constant column first, inner product (1/n)Σ.
std::pair<Eigen::MatrixXd, BasisTransform> orthogonalize(const Eigen::MatrixXd& raw);

enum class BasisKind { rcs, bs, fp };

/// A basis with all data-dependent choices (knots, transform) frozen, so it
/// can be re-evaluated on new data.
struct FrozenBasis {
  BasisKind kind = BasisKind::rcs;
  KnotVector knots;  // rcs, bs
  bool intercept = false;
  std::vector<double> powers;  // fp
  std::optional<BasisTransform> transform;

  std::size_t columns() const;
  /// Column values and derivatives with respect to x on the original scale.
  /// d1/d2 may be null; requesting them costs extra work.
  void eval(double x, double* v, double* d1, double* d2) const;
  bool operator==(const FrozenBasis&) const = default;
};

/// Builds a frozen basis from construction data. `x` already includes any
/// offset; `events` marks rows with an event (for the `event` option).
FrozenBasis build_basis(ElementKind kind, const BasisOptions& o, std::span<const double> x,
                        const std::vector<std::uint8_t>* events);

}  // namespace merlin
