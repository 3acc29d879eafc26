#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "merlin/design.hpp"
#include "merlin/jet.hpp"

namespace merlin {

/// Random effect values per level (nullptr means zero).
struct Effects {
  const double* b[2] = {nullptr, nullptr};
};

/// Lower-triangular factor L of a level's covariance, Σ = L·Lᵀ, from the
/// log-sd and atanh partial-correlation parameters.
Eigen::MatrixXd level_cholesky(const LevelDesign& level, const double* theta);
/// Correlation matrix implied by the partial correlations of a level.
Eigen::MatrixXd level_correlation(const LevelDesign& level, const double* theta);

/// Evaluates predictors and row contributions for one parameter vector.
class Evaluator {
 public:
  Evaluator(const Design& design, const Eigen::VectorXd& theta);

  const Design& design() const { return *design_; }
  const Eigen::VectorXd& theta() const { return theta_; }
  const Eigen::MatrixXd& chol(std::size_t level) const { return chol_[level]; }
  const double* anc(std::size_t m) const { return theta_.data() + design_->models[m].anc_first; }

  /// Complex predictor of model m on a row. With t == nullptr and order 0
  /// the row's own values are used; otherwise time-driven elements are
  /// evaluated at t (or the row's timevar value).
  Jet eta(std::size_t m, std::size_t row, const Effects& b, const double* t, int order) const;
  Jet mean(std::size_t m, std::size_t row, const Effects& b, const double* t, int order) const;
  /// ∫_0^t of the predictor (or its expected value).
  double integral(std::size_t m, std::size_t row, const Effects& b, double t, bool expected) const;
  /// Any link quantity of model m.
  double quantity(std::size_t m, std::size_t row, const Effects& b, const double* t, LinkKind what) const;

  double row_loglik(std::size_t m, std::size_t row, const Effects& b) const;
  double log_hazard(std::size_t m, std::size_t row, const Effects& b, double t) const;
  double cum_hazard(std::size_t m, std::size_t row, const Effects& b, double t) const;

 private:
  Jet element_jet(std::size_t m, const ElementDesign& e, std::size_t row, const Effects& b, const double* t,
                  double t_row, int order) const;

  const Design* design_;
  Eigen::VectorXd theta_;
  std::vector<Eigen::MatrixXd> chol_;
};

struct IntegrationOptions {
  int gh_nodes = 7;
  bool adaptive = true;
  int threads = 1;
};

/// Marginal log-likelihood: rows of models without random effects are
/// summed directly, cluster contributions are integrated by (adaptive)
/// Gauss-Hermite quadrature over one or two nested levels.
class Likelihood {
 public:
  Likelihood(const Design& design, IntegrationOptions opt);

  double total(const Eigen::VectorXd& theta) const;
  /// All random effects fixed at zero.
  double fixed_only(const Eigen::VectorXd& theta) const;

  /// Recomputes posterior modes and curvatures at theta. Clusters whose mode
  /// search fails keep their previous adaptation. Returns the failure count.
  std::size_t adapt(const Eigen::VectorXd& theta);
  void reset_adaptation();
  bool has_effects() const { return !design_->levels.empty(); }
  bool adaptive() const { return opt_.adaptive; }

  /// Throws NumericalError naming the first row with a non-finite
  /// contribution at theta (random effects at zero).
  void check_finite(const Eigen::VectorXd& theta) const;

  /// Posterior modes of the top-level effects (standardized scale) after the
  /// last adapt().
  const std::vector<Eigen::VectorXd>& modes() const { return mode_; }

 private:
  struct RowRef {
    std::uint32_t model;
    std::uint32_t row;
  };
  struct ClusterPlan {
    std::vector<RowRef> outer;
    std::vector<std::vector<RowRef>> inner;
  };

  double rows_loglik(const Evaluator& ev, const std::vector<RowRef>& rows, const Effects& b) const;
  double cluster_loglik(const Evaluator& ev, std::size_t c) const;
  double inner_loglik(const Evaluator& ev, const std::vector<RowRef>& rows, const double* b_outer) const;

  const Design* design_;
  IntegrationOptions opt_;
  std::vector<RowRef> free_rows_;
  std::vector<ClusterPlan> clusters_;
  std::vector<TensorRule> base_rule_;
  std::vector<Eigen::VectorXd> mode_;
  std::vector<Eigen::MatrixXd> scale_;
};

/// Maximizes g(z) - ½|z|² style log posteriors by damped Newton with
/// finite-difference derivatives. On success `z` holds the mode and `chol`
/// the Cholesky factor of the inverse negative Hessian.
bool find_mode(const std::function<double(const Eigen::VectorXd&)>& g, Eigen::VectorXd& z,
               Eigen::MatrixXd& chol);

}  // namespace merlin
