#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Dense>

namespace merlin {

struct QuadratureRule {
  enum class Kind { hermite, legendre };
  Kind kind = Kind::hermite;
  std::vector<double> nodes;
  std::vector<double> weights;

  std::size_t size() const { return nodes.size(); }
};

/// Probabilists' Gauss-Hermite rule: Σ w f(x) ≈ E f(Z), Z ~ N(0,1).
QuadratureRule gauss_hermite(int n);

/// Gauss-Legendre rule on [a, b].
QuadratureRule gauss_legendre(int n, double a = -1.0, double b = 1.0);

/// Rule for ∫_0^t f(u) du = t Σ w_k f(t·x_k), graded towards 0 through the
/// substitution u = t·s^4 so integrable singularities at the origin (e.g.
/// Weibull hazards with shape < 1) are handled accurately.
QuadratureRule graded_unit_rule(int n);

/// Multi-dimensional rule against N(0, I), stored as log-weights.
struct TensorRule {
  std::size_t dim = 0;
  std::vector<double> nodes;  // point k occupies [k*dim, (k+1)*dim)
  std::vector<double> log_weights;

  std::size_t size() const { return log_weights.size(); }
  const double* node(std::size_t k) const { return nodes.data() + k * dim; }
};

TensorRule tensor_rule(const QuadratureRule& base, std::size_t dim);

/// Recentres a standard-normal rule at `mode` with lower-triangular scale
/// `chol`: z = mode + chol·x, weights corrected by the density ratio and the
/// Jacobian so the rule still integrates against N(0, I).
TensorRule adapt_rule(const TensorRule& base, const Eigen::VectorXd& mode, const Eigen::MatrixXd& chol);

}  // namespace merlin
