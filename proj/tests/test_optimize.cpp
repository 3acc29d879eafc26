#include <doctest.h>

#include <cmath>

#include "merlin/error.hpp"
#include "merlin/optimize.hpp"

using namespace merlin;

TEST_SUITE("optimize") {

TEST_CASE("finite-difference derivatives of a quadratic") {
  Objective f = [](const Eigen::VectorXd& x) { return x.squaredNorm(); };
  Eigen::VectorXd x = Eigen::VectorXd::Constant(1, 3.0);
  Eigen::VectorXd g = numerical_gradient(f, x, f(x));
  CHECK(g(0) == doctest::Approx(6.0).epsilon(1e-8));

  Eigen::VectorXd y(3);
  y << 3, -1, 0.5;
  Eigen::MatrixXd h = numerical_hessian(f, y);
  CHECK((h - 2 * Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("the Hessian of a correlated quadratic form is symmetric and exact") {
  Eigen::MatrixXd a(3, 3);
  a << 4, 1, -0.5, 1, 3, 0.2, -0.5, 0.2, 2;
  Objective f = [&](const Eigen::VectorXd& x) { return -0.5 * x.dot(a * x); };
  Eigen::VectorXd x(3);
  x << 0.3, 2, -7;
  Eigen::MatrixXd h = numerical_hessian(f, x);
  CHECK((h - h.transpose()).cwiseAbs().maxCoeff() == 0.0);
  CHECK((h + a).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("curvature-scaled steps shrink for badly scaled coordinates") {
  Eigen::VectorXd x(3), second(3);
  x << 0.1, 10, 0;
  second << 1, 1e8, 0;
  Eigen::VectorXd h1 = curvature_steps(x, 100, second, 1);
  Eigen::VectorXd h2 = curvature_steps(x, 100, second, 2);
  const double eps = std::numeric_limits<double>::epsilon();
  // zero curvature falls back to the relative default
  CHECK(h1(2) == doctest::Approx(std::cbrt(eps)));
  CHECK(h2(2) == doctest::Approx(std::pow(eps, 0.25)));
  CHECK(h1(1) < std::cbrt(eps) * 10);
  for (int i = 0; i < 3; ++i) {
    CHECK(h1(i) > 0);
    CHECK(h1(i) <= std::cbrt(eps) * std::max(std::abs(x(i)), 1.0) * (1 + 1e-12));
    CHECK(h1(i) >= 1e-4 * std::cbrt(eps) * std::max(std::abs(x(i)), 1.0));
  }
}

TEST_CASE("scaled steps recover the gradient of a badly scaled function") {
  // x0 enters multiplied by 300, like an x·ln x covariate
  Objective f = [](const Eigen::VectorXd& x) {
    return -std::pow(300 * x(0) - 1, 2) - std::exp(x(1)) + std::pow(300 * x(0), 4) * 1e-4;
  };
  Eigen::VectorXd x(2);
  x << 0.01, 0.5;
  auto exact = [](double a) { return -2 * 300 * (300 * a - 1) + 4e-4 * 300 * std::pow(300 * a, 3); };
  Eigen::VectorXd second;
  Eigen::VectorXd g0 = numerical_gradient(f, x, f(x), &second);
  Eigen::VectorXd steps = curvature_steps(x, f(x), second, 1);
  Eigen::VectorXd g = numerical_gradient(f, x, f(x), nullptr, &steps);
  CHECK(std::abs(g(0) - exact(x(0))) <= std::abs(g0(0) - exact(x(0))) + 1e-9);
  CHECK(g(0) == doctest::Approx(exact(x(0))).epsilon(1e-7));
  CHECK(g(1) == doctest::Approx(-std::exp(0.5)).epsilon(1e-7));
}

TEST_CASE("a concave quadratic is maximized in a handful of iterations") {
  Eigen::MatrixXd a(2, 2);
  a << 2, 0.3, 0.3, 1;
  Eigen::VectorXd m(2);
  m << 1, -2;
  Objective f = [&](const Eigen::VectorXd& x) { return -0.5 * (x - m).dot(a * (x - m)); };
  for (OptimizerKind kind : {OptimizerKind::newton, OptimizerKind::bfgs}) {
    OptimizeOptions o;
    o.kind = kind;
    OptimizeResult r = maximize(f, Eigen::VectorXd::Zero(2), o);
    CHECK(r.converged);
    CHECK((r.x - m).cwiseAbs().maxCoeff() < 1e-6);
    if (kind == OptimizerKind::newton) CHECK(r.iterations <= 3);
  }
}

TEST_CASE("Rosenbrock: BFGS and Newton reach the same optimum") {
  Objective f = [](const Eigen::VectorXd& x) {
    return -(std::pow(1 - x(0), 2) + 100 * std::pow(x(1) - x(0) * x(0), 2));
  };
  Eigen::VectorXd x0(2);
  x0 << -1.2, 1;
  OptimizeOptions ob, on;
  on.kind = OptimizerKind::newton;
  OptimizeResult b = maximize(f, x0, ob), n = maximize(f, x0, on);
  CHECK(b.converged);
  CHECK(n.converged);
  CHECK((b.x - n.x).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(std::abs(b.x(0) - 1) < 1e-5);
}

TEST_CASE("a non-finite starting value is an error") {
  Objective f = [](const Eigen::VectorXd& x) { return std::log(x(0)); };
  CHECK_THROWS_AS(maximize(f, Eigen::VectorXd::Constant(1, -1.0), {}), NumericalError);
}

TEST_CASE("the line search backs off from regions where the objective is undefined") {
  // log barrier at x = 0, optimum at 0.01
  Objective f = [](const Eigen::VectorXd& x) { return 0.01 * std::log(x(0)) - x(0); };
  OptimizeResult r = maximize(f, Eigen::VectorXd::Constant(1, 5.0), {});
  CHECK(r.converged);
  CHECK(r.x(0) == doctest::Approx(0.01).epsilon(1e-5));
}

}
