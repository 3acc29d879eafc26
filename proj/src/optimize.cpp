#include "merlin/optimize.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "merlin/error.hpp"

namespace merlin {

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();

void log_iteration(std::ostream* log, int k, double f) {
  if (!log) return;
  char buf[96];
  std::snprintf(buf, sizeof buf, "Iteration %d:   log likelihood = %.8g\n", k, f);
  *log << buf << std::flush;
}

struct LineSearchResult {
  bool ok = false;
  double alpha = 0;
  double value = 0;
};

// Backtracking on ψ = -f with the Armijo condition; first a quadratic, then
// cubic interpolation through the last two trial points.
LineSearchResult line_search(const Objective& f, const Eigen::VectorXd& x, double fx, const Eigen::VectorXd& g,
                             const Eigen::VectorXd& p) {
  const double psi0 = -fx;
  const double dpsi0 = -g.dot(p);
  LineSearchResult r;
  if (!(dpsi0 < 0)) return r;
  double cap = 0;
  for (Eigen::Index i = 0; i < x.size(); ++i) cap = std::max(cap, std::abs(p(i)) / std::max(std::abs(x(i)), 1.0));
  double alpha = cap > 10 ? 10 / cap : 1.0;
  double prev_alpha = 0, prev_psi = 0;
  for (int k = 0; k < 40; ++k) {
    double fa = f(x + alpha * p);
    double psi = -fa;
    if (std::isfinite(fa) && psi <= psi0 + 1e-4 * alpha * dpsi0) {
      r.ok = true;
      r.alpha = alpha;
      r.value = fa;
      return r;
    }
    double next;
    if (!std::isfinite(fa)) {
      next = 0.1 * alpha;
      prev_alpha = 0;
    } else {
      if (prev_alpha == 0) {
        next = -dpsi0 * alpha * alpha / (2 * (psi - psi0 - dpsi0 * alpha));
      } else {
        double d1 = psi - psi0 - dpsi0 * alpha;
        double d2 = prev_psi - psi0 - dpsi0 * prev_alpha;
        double denom = prev_alpha * prev_alpha * alpha * alpha * (alpha - prev_alpha);
        double a = (prev_alpha * prev_alpha * d1 - alpha * alpha * d2) / denom;
        double b = (-prev_alpha * prev_alpha * prev_alpha * d1 + alpha * alpha * alpha * d2) / denom;
        if (std::abs(a) < 1e-300) {
          next = -dpsi0 / (2 * b);
        } else {
          double disc = b * b - 3 * a * dpsi0;
          next = disc >= 0 ? (-b + std::sqrt(disc)) / (3 * a) : 0.5 * alpha;
        }
      }
      if (!std::isfinite(next)) next = 0.5 * alpha;
      next = std::clamp(next, 0.1 * alpha, 0.5 * alpha);
      prev_alpha = alpha;
      prev_psi = psi;
    }
    alpha = next;
  }
  return r;
}

Eigen::MatrixXd initial_inverse(const Eigen::VectorXd& second) {
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(second.size(), second.size());
  for (Eigen::Index i = 0; i < second.size(); ++i) {
    double c = -second(i);
    h(i, i) = (std::isfinite(c) && c > 1e-12) ? 1 / c : 1.0;
  }
  return h;
}

// Ascent direction (−H)⁻¹g, shifted to positive definite when needed.
Eigen::VectorXd newton_direction(const Eigen::MatrixXd& hess, const Eigen::VectorXd& g) {
  Eigen::MatrixXd neg = -hess;
  Eigen::LLT<Eigen::MatrixXd> llt(neg);
  if (llt.info() == Eigen::Success) return llt.solve(g);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(neg);
  double shift = std::max(0.0, -es.eigenvalues().minCoeff()) + 1e-3 * std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  return (neg + shift * Eigen::MatrixXd::Identity(g.size(), g.size())).ldlt().solve(g);
}

}  // namespace

Eigen::VectorXd curvature_steps(const Eigen::VectorXd& x, double fx, const Eigen::VectorXd& second, int order) {
  const double p = order == 1 ? 1.0 / 3 : 0.25;
  // target step in units where the curvature is one
  const double delta = std::pow(kEps * std::max(std::abs(fx), 1.0), p);
  Eigen::VectorXd h(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    double base = std::pow(kEps, p) * std::max(std::abs(x(i)), 1.0);
    double c = std::abs(second(i));
    h(i) = std::isfinite(c) && c > 0 ? std::clamp(delta / std::sqrt(c), 1e-4 * base, base) : base;
  }
  return h;
}

Eigen::VectorXd numerical_gradient(const Objective& f, const Eigen::VectorXd& x, double fx, Eigen::VectorXd* second,
                                   const Eigen::VectorXd* steps) {
  const Eigen::Index n = x.size();
  Eigen::VectorXd g(n);
  if (second) second->resize(n);
  Eigen::VectorXd xp = x;
  for (Eigen::Index i = 0; i < n; ++i) {
    double h = steps ? (*steps)(i) : std::cbrt(kEps) * std::max(std::abs(x(i)), 1.0);
    double fp = 0, fm = 0;
    for (int tries = 0; tries <= 5; ++tries) {
      xp(i) = x(i) + h;
      fp = f(xp);
      xp(i) = x(i) - h;
      fm = f(xp);
      if (std::isfinite(fp) && std::isfinite(fm)) break;
      h *= 0.5;
    }
    xp(i) = x(i);
    g(i) = (fp - fm) / (2 * h);
    if (second) (*second)(i) = (fp - 2 * fx + fm) / (h * h);
  }
  return g;
}

Eigen::MatrixXd numerical_hessian(const Objective& f, const Eigen::VectorXd& x) {
  const Eigen::Index n = x.size();
  const double f0 = f(x);
  Eigen::VectorXd h(n);
  for (Eigen::Index i = 0; i < n; ++i) h(i) = std::pow(kEps, 0.25) * std::max(std::abs(x(i)), 1.0);
  Eigen::MatrixXd H(n, n);
  Eigen::VectorXd xp = x;
  auto diagonal = [&] {
    for (Eigen::Index i = 0; i < n; ++i) {
      xp(i) = x(i) + h(i);
      double fp = f(xp);
      xp(i) = x(i) - h(i);
      double fm = f(xp);
      xp(i) = x(i);
      H(i, i) = (fp - 2 * f0 + fm) / (h(i) * h(i));
    }
  };
  // pilot pass, then steps matched to each coordinate's curvature
  diagonal();
  Eigen::VectorXd pilot = H.diagonal();
  h = curvature_steps(x, f0, pilot, 2);
  diagonal();
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < i; ++j) {
      double s = 0;
      for (int si = -1; si <= 1; si += 2)
        for (int sj = -1; sj <= 1; sj += 2) {
          xp = x;
          xp(i) += si * h(i);
          xp(j) += sj * h(j);
          s += si * sj * f(xp);
        }
      H(i, j) = H(j, i) = s / (4 * h(i) * h(j));
    }
  return 0.5 * (H + H.transpose());
}

OptimizeResult maximize(const Objective& f, const Eigen::VectorXd& x0, const OptimizeOptions& opt) {
  OptimizeResult res;
  Eigen::VectorXd x = x0;
  const Eigen::Index n = x.size();
  if (opt.before_iteration) opt.before_iteration(x);
  double fx = f(x);
  if (!std::isfinite(fx)) throw NumericalError("log likelihood is not finite at the starting values");
  log_iteration(opt.log, 0, fx);
  if (n == 0) {
    res.x = x;
    res.value = fx;
    res.gradient = Eigen::VectorXd();
    res.converged = true;
    return res;
  }
  Eigen::VectorXd second;
  Eigen::VectorXd g = numerical_gradient(f, x, fx, &second);
  Eigen::VectorXd steps = curvature_steps(x, fx, second, 1);
  g = numerical_gradient(f, x, fx, &second, &steps);
  Eigen::MatrixXd hinv = initial_inverse(second);
  bool fresh = true;  // hinv was just reset
  int it = 0;
  for (; it < opt.max_iter; ++it) {
    if (!g.allFinite()) {
      res.message = "gradient is not finite";
      break;
    }
    if (g.cwiseAbs().maxCoeff() < opt.gtol) {
      res.converged = true;
      break;
    }
    Eigen::VectorXd p;
    if (opt.kind == OptimizerKind::newton) {
      p = newton_direction(numerical_hessian(f, x), g);
    } else {
      p = hinv * g;
      if (!(g.dot(p) > 0)) {
        hinv = initial_inverse(second);
        fresh = true;
        p = hinv * g;
      }
    }
    LineSearchResult ls = line_search(f, x, fx, g, p);
    if (!ls.ok) {
      if (opt.kind == OptimizerKind::bfgs && !fresh) {
        numerical_gradient(f, x, fx, &second, &steps);
        hinv = initial_inverse(second);
        fresh = true;
        --it;
        continue;
      }
      res.message = "line search failed";
      break;
    }
    Eigen::VectorXd xn = x + ls.alpha * p;
    double fn = ls.value;
    if (opt.before_iteration && opt.before_iteration(xn)) {
      fn = f(xn);
      if (!std::isfinite(fn)) {
        res.message = "log likelihood not finite after re-adaptation";
        break;
      }
    }
    Eigen::VectorXd gn = numerical_gradient(f, xn, fn, &second, &steps);
    steps = curvature_steps(xn, fn, second, 1);
    log_iteration(opt.log, it + 1, fn);

    Eigen::VectorXd s = xn - x;
    double rel_x = 0;
    for (Eigen::Index i = 0; i < n; ++i) rel_x = std::max(rel_x, std::abs(s(i)) / (std::abs(x(i)) + 1));
    double rel_f = std::abs(fn - fx) / std::max(std::abs(fx), 1.0);

    Eigen::VectorXd y = -(gn - g);
    double sy = s.dot(y);
    if (opt.kind == OptimizerKind::bfgs && sy > 1e-12 * s.norm() * y.norm()) {
      double rho = 1 / sy;
      Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
      Eigen::MatrixXd a = I - rho * s * y.transpose();
      hinv = a * hinv * a.transpose() + rho * s * s.transpose();
      fresh = false;
    }
    x = xn;
    fx = fn;
    g = gn;
    if ((rel_x < opt.ptol && rel_f < opt.ftol) || (g.allFinite() && g.cwiseAbs().maxCoeff() < opt.gtol)) {
      res.converged = true;
      ++it;
      break;
    }
  }
  if (!res.converged && res.message.empty() && it >= opt.max_iter) res.message = "maximum iterations reached";

  // Newton polishing from the quasi-Newton solution
  if (res.converged || res.message == "line search failed") {
    for (int k = 0; k < opt.polish_steps; ++k) {
      Eigen::MatrixXd H = numerical_hessian(f, x);
      Eigen::LLT<Eigen::MatrixXd> llt(-H);
      if (llt.info() != Eigen::Success) break;
      Eigen::VectorXd step = llt.solve(g);
      double fn = f(x + step);
      if (!std::isfinite(fn) || fn < fx - 1e-12 * std::abs(fx)) break;
      x += step;
      fx = fn;
      g = numerical_gradient(f, x, fx, &second, &steps);
      steps = curvature_steps(x, fx, second, 1);
      if (!res.converged && g.cwiseAbs().maxCoeff() < 1e-4) {
        res.converged = true;
        res.message.clear();
      }
      double rel = 0;
      for (Eigen::Index i = 0; i < n; ++i) rel = std::max(rel, std::abs(step(i)) / (std::abs(x(i)) + 1));
      if (rel < 1e-9) break;
    }
  }
  res.x = x;
  res.value = fx;
  res.gradient = g;
  res.iterations = it;
  return res;
}

}  // namespace merlin
