#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "merlin/basis.hpp"
#include "merlin/error.hpp"

using namespace merlin;

namespace {

KnotVector demo_knots(bool log) {
  KnotVector kv;
  kv.log = log;
  kv.lower = log ? std::log(0.1) : 0.0;
  kv.upper = log ? std::log(12.0) : 10.0;
  kv.interior = log ? std::vector<double>{std::log(0.8), std::log(2.5), std::log(5.0)}
                    : std::vector<double>{2.0, 4.5, 7.0};
  return kv;
}

// relative error with an absolute floor for entries near zero
double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

}  // namespace

TEST_SUITE("basis") {

TEST_CASE("rcs derivatives match central differences") {
  std::mt19937_64 rng(7);
  for (bool log : {false, true}) {
    KnotVector kv = demo_knots(log);
    const std::size_t nc = kv.interior.size() + 1;
    std::uniform_real_distribution<double> pick(kv.lower + 1e-3, kv.upper - 1e-3);
    std::vector<double> v(nc), d1(nc), d2(nc), p(nc), m(nc);
    for (int i = 0; i < 100; ++i) {
      const double u = pick(rng);
      rcs_row(u, kv, 1, d1.data());
      rcs_row(u, kv, 2, d2.data());
      const double h = 1e-5;
      rcs_row(u + h, kv, 0, p.data());
      rcs_row(u - h, kv, 0, m.data());
      for (std::size_t j = 0; j < nc; ++j) CHECK(rel_err((p[j] - m[j]) / (2 * h), d1[j]) < 1e-6);
      rcs_row(u + h, kv, 1, p.data());
      rcs_row(u - h, kv, 1, m.data());
      for (std::size_t j = 0; j < nc; ++j) CHECK(rel_err((p[j] - m[j]) / (2 * h), d2[j]) < 1e-6);
    }
  }
}

TEST_CASE("frozen basis derivatives on the original scale match central differences") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> data(0.2, 11.0);
  std::vector<double> x(300);
  for (auto& v : x) v = data(rng);
  for (bool log : {false, true})
    for (bool orthog : {false, true}) {
      BasisOptions o;
      o.df = 4;
      o.log = log;
      o.orthog = orthog;
      FrozenBasis fb = build_basis(ElementKind::rcs, o, x, nullptr);
      const std::size_t nc = fb.columns();
      CHECK(nc == 4);
      std::vector<double> v(nc), d1(nc), d2(nc), p(nc), m(nc), pd(nc), md(nc);
      std::uniform_real_distribution<double> pick(0.5, 10.0);
      for (int i = 0; i < 100; ++i) {
        const double t = pick(rng), h = 1e-5 * t;
        fb.eval(t, v.data(), d1.data(), d2.data());
        fb.eval(t + h, p.data(), pd.data(), nullptr);
        fb.eval(t - h, m.data(), md.data(), nullptr);
        for (std::size_t j = 0; j < nc; ++j) {
          CHECK(rel_err((p[j] - m[j]) / (2 * h), d1[j]) < 1e-6);
          CHECK(rel_err((pd[j] - md[j]) / (2 * h), d2[j]) < 1e-6);
        }
      }
    }
}

TEST_CASE("rcs is linear beyond the boundary knots") {
  KnotVector kv = demo_knots(false);
  std::vector<double> d2(4);
  for (double u : {-5.0, -0.001, 10.001, 25.0}) {
    rcs_row(u, kv, 2, d2.data());
    for (double v : d2) CHECK(std::abs(v) < 1e-12);
  }
}

TEST_CASE("bs with intercept is a partition of unity") {
  std::vector<double> interior{1.0, 2.5, 4.0, 4.5};
  const std::size_t nc = bs_columns(interior.size(), true);
  CHECK(nc == interior.size() + 4);
  std::vector<double> row(nc);
  for (int i = 0; i <= 1000; ++i) {
    double x = 0.0 + 6.0 * i / 1000.0;
    bs_row(x, interior, 0.0, 6.0, true, 0, row.data());
    double s = 0;
    for (double v : row) {
      CHECK(v >= 0.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  // derivatives of a partition of unity sum to zero
  bs_row(3.3, interior, 0.0, 6.0, true, 1, row.data());
  double s = 0;
  for (double v : row) s += v;
  CHECK(std::abs(s) < 1e-10);
}

TEST_CASE("bs derivatives match central differences") {
  std::vector<double> interior{1.0, 2.5, 4.0};
  const std::size_t nc = bs_columns(interior.size(), false);
  std::vector<double> d1(nc), p(nc), m(nc);
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> pick(0.01, 5.99);
  for (int i = 0; i < 100; ++i) {
    double x = pick(rng), h = 1e-6;
    bs_row(x, interior, 0.0, 6.0, false, 1, d1.data());
    bs_row(x + h, interior, 0.0, 6.0, false, 0, p.data());
    bs_row(x - h, interior, 0.0, 6.0, false, 0, m.data());
    for (std::size_t j = 0; j < nc; ++j) CHECK(rel_err((p[j] - m[j]) / (2 * h), d1[j]) < 1e-6);
  }
}

TEST_CASE("bs outside the boundary gives zero rows and is counted") {
  std::vector<double> interior{1.0};
  std::vector<double> row(bs_columns(1, true), 1.0);
  std::size_t before = bs_outside_count();
  bs_row(7.0, interior, 0.0, 6.0, true, 0, row.data());
  for (double v : row) CHECK(v == 0.0);
  CHECK(bs_outside_count() == before + 1);
}

TEST_CASE("fp power 0 is the natural log") {
  std::vector<double> x{0.01, 0.5, 1.0, 3.7, 1234.5};
  Eigen::MatrixXd m = fp_eval(x, {0}, 0);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(m(static_cast<Eigen::Index>(i), 0) == std::log(x[i]));
  // repeated powers: x^p, x^p ln x
  Eigen::MatrixXd r = fp_eval(x, {1, 1}, 0);
  CHECK(r(3, 0) == doctest::Approx(3.7));
  CHECK(r(3, 1) == doctest::Approx(3.7 * std::log(3.7)));
  Eigen::MatrixXd d = fp_eval(x, {0.5, 2}, 1);
  CHECK(d(3, 0) == doctest::Approx(0.5 / std::sqrt(3.7)));
  CHECK(d(3, 1) == doctest::Approx(2 * 3.7));
  CHECK_THROWS_AS(fp_eval(std::vector<double>{-1.0}, {0}, 0), Error);
}

TEST_CASE("knot placement") {
  std::vector<double> x;
  for (int i = 1; i <= 101; ++i) x.push_back(i);
  for (int df = 1; df <= 6; ++df) {
    KnotVector kv = place_knots(x, df);
    CHECK(kv.interior.size() == static_cast<std::size_t>(df - 1));
    CHECK(kv.lower == 1);
    CHECK(kv.upper == 101);
  }
  KnotVector k3 = place_knots(x, 3);
  CHECK(k3.interior[0] == doctest::Approx(1 + 100.0 / 3));
  CHECK(k3.interior[1] == doctest::Approx(1 + 200.0 / 3));
  // event filtering moves interior knots only
  std::vector<std::uint8_t> ev(x.size(), 0);
  for (std::size_t i = 50; i < x.size(); ++i) ev[i] = 1;
  KnotVector ke = place_knots(x, 2, &ev);
  CHECK(ke.interior[0] == doctest::Approx(76));
  CHECK(ke.lower == 1);
  KnotVector kl = place_knots(x, 2, nullptr, true);
  CHECK(kl.log);
  CHECK(kl.upper == doctest::Approx(std::log(101.0)));
  CHECK(quantile_sorted({1, 2, 3, 4}, 0.5) == 2.5);
}

TEST_CASE("orthogonalization gives orthonormal columns orthogonal to the constant") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> data(0.1, 9.0);
  std::vector<double> x(500);
  for (auto& v : x) v = data(rng);
  Eigen::MatrixXd raw = rcs_eval(x, place_knots(x, 4), 0);
  auto [q, tr] = orthogonalize(raw);
  const double n = static_cast<double>(x.size());
  Eigen::MatrixXd gram = q.transpose() * q / n;
  CHECK((gram - Eigen::MatrixXd::Identity(q.cols(), q.cols())).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((q.colwise().sum() / n).cwiseAbs().maxCoeff() < 1e-10);
  // the transform reproduces the columns
  CHECK((tr.apply(raw, 0) - q).cwiseAbs().maxCoeff() < 1e-12);
  // the span is unchanged: raw is an affine image of q
  Eigen::MatrixXd aug(q.rows(), q.cols() + 1);
  aug << Eigen::VectorXd::Ones(q.rows()), q;
  Eigen::MatrixXd coef = aug.colPivHouseholderQr().solve(raw);
  CHECK((aug * coef - raw).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("frozen bases reproduce construction values") {
  std::vector<double> x{0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.5, 8.0};
  BasisOptions o;
  o.df = 3;
  o.orthog = true;
  FrozenBasis fb = build_basis(ElementKind::rcs, o, x, nullptr);
  Eigen::MatrixXd raw = rcs_eval(x, fb.knots, 0);
  auto [q, tr] = orthogonalize(raw);
  std::vector<double> v(fb.columns());
  for (std::size_t i = 0; i < x.size(); ++i) {
    fb.eval(x[i], v.data(), nullptr, nullptr);
    for (std::size_t j = 0; j < v.size(); ++j)
      CHECK(v[j] == doctest::Approx(q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))).epsilon(1e-12));
  }
  // user knots are given on the original scale
  BasisOptions u;
  u.knots = {1.0, 3.0, 8.0};
  u.log = true;
  FrozenBasis fu = build_basis(ElementKind::rcs, u, x, nullptr);
  CHECK(fu.knots.lower == doctest::Approx(0.0));
  CHECK(fu.knots.interior[0] == doctest::Approx(std::log(3.0)));
}

}
