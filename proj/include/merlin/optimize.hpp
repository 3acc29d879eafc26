#pragma once

#include <functional>
#include <ostream>
#include <string>

#include <Eigen/Dense>

namespace merlin {

using Objective = std::function<double(const Eigen::VectorXd&)>;

/// Central differences with steps `steps`, by default h_j = ε^{1/3}·max(|θ_j|, 1).
/// A non-finite value at a perturbed point halves that step, up to 5 times.
/// `second` (optional) receives the diagonal second differences from the
/// same evaluations.
Eigen::VectorXd numerical_gradient(const Objective& f, const Eigen::VectorXd& x, double fx,
                                   Eigen::VectorXd* second = nullptr, const Eigen::VectorXd* steps = nullptr);
/// Steps for first (order 1) or second (order 2) differences: the default
/// relative step, shrunk where the curvature `second` says the coordinate is
/// badly scaled (large covariate values) so truncation error stays small.
Eigen::VectorXd curvature_steps(const Eigen::VectorXd& x, double fx, const Eigen::VectorXd& second, int order);
/// Central differences with ε^{1/4}-scaled steps, adjusted by a pilot pass
/// over the diagonal, symmetrized.
Eigen::MatrixXd numerical_hessian(const Objective& f, const Eigen::VectorXd& x);

enum class OptimizerKind { bfgs, newton };

struct OptimizeOptions {
  OptimizerKind kind = OptimizerKind::bfgs;
  int max_iter = 300;
  double ptol = 1e-6;
  double ftol = 1e-8;
  double gtol = 1e-5;
  int polish_steps = 3;      // Newton steps after BFGS convergence
  std::ostream* log = nullptr;
  /// Called before each iteration; returns true when the objective itself
  /// changed (e.g. re-adapted quadrature) so values are recomputed.
  std::function<bool(const Eigen::VectorXd&)> before_iteration;
};

struct OptimizeResult {
  Eigen::VectorXd x;
  double value = 0;
  Eigen::VectorXd gradient;
  int iterations = 0;
  bool converged = false;
  std::string message;
};

/// Maximizes f. Throws NumericalError when f is not finite at x0.
OptimizeResult maximize(const Objective& f, const Eigen::VectorXd& x0, const OptimizeOptions& opt);

}  // namespace merlin
