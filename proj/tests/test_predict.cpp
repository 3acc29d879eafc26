#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "merlin/error.hpp"
#include "merlin/predict.hpp"
#include "merlin/report.hpp"
#include "support.hpp"

using namespace merlin;

namespace {

PredictionOutput run(const EstimationResult& r, const Dataset& d, Statistic s, std::size_t outcome = 0,
                     std::vector<std::size_t> causes = {}, bool ci = false, bool marginal = false) {
  PredictionRequest q;
  q.statistic = s;
  q.outcome = outcome;
  q.causes = std::move(causes);
  q.ci = ci;
  q.marginal = marginal;
  q.force = true;
  return predict(r, d, q);
}

// grid of evaluation times with covariate x
Dataset grid(std::size_t n, double tmax, double x) {
  std::vector<double> t(n), xs(n, x);
  for (std::size_t i = 0; i < n; ++i) t[i] = tmax * (i + 1) / n;
  Dataset g(n);
  g.add_column("t", t);
  g.add_column("x", xs);
  g.add_column("d", std::vector<double>(n, 0.0));
  g.add_column("d1", std::vector<double>(n, 0.0));
  g.add_column("d2", std::vector<double>(n, 0.0));
  return g;
}

// two competing exponential causes with rates 0.1·e^{0.5x} and 0.05·e^{-0.3x}
Dataset competing_data(unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  const std::size_t n = 400;
  std::vector<double> t(n), d1(n), d2(n), x(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = u(rng) < 0.5;
    double a = -std::log(u(rng)) / (0.1 * std::exp(0.5 * x[i]));
    double b = -std::log(u(rng)) / (0.05 * std::exp(-0.3 * x[i]));
    t[i] = std::min({a, b, 10.0});
    d1[i] = a <= b && a <= 10;
    d2[i] = b < a && b <= 10;
  }
  Dataset d(n);
  d.add_column("t", t);
  d.add_column("d1", d1);
  d.add_column("d2", d2);
  d.add_column("x", x);
  d.add_column("d", std::vector<double>(n, 0.0));
  return d;
}

double simpson(const std::function<double(double)>& f, double a, double b, int m = 4000) {
  double h = (b - a) / m, acc = f(a) + f(b);
  for (int i = 1; i < m; ++i) acc += (i % 2 ? 4 : 2) * f(a + i * h);
  return acc * h / 3;
}

}  // namespace

TEST_SUITE("predict") {

TEST_CASE("closed-form Weibull predictions") {
  Dataset d = test::weibull_data(300, 0.1, 1.3, 0.5, 8, 5);
  EstimationResult r = fit("(t x, family(weibull, failure(d)))", d, test::quiet()).result;
  const double b = test::param(r, "t:x"), c = test::param(r, "t:_cons"), g = std::exp(test::param(r, "t:log(gamma)"));
  Dataset at = grid(50, 8, 1);
  auto h = run(r, at, Statistic::hazard), ch = run(r, at, Statistic::chazard), s = run(r, at, Statistic::survival);
  for (std::size_t i = 0; i < 50; ++i) {
    double t = at.column("t")[i];
    double hh = std::exp(c + b) * g * std::pow(t, g - 1), hc = std::exp(c + b) * std::pow(t, g);
    CHECK(h.value[i] == doctest::Approx(hh).epsilon(1e-12));
    CHECK(ch.value[i] == doctest::Approx(hc).epsilon(1e-12));
    CHECK(std::abs(s.value[i] - std::exp(-ch.value[i])) < 1e-12);
  }
}

TEST_CASE("quadrature-based cumulative hazards") {
  Dataset d = test::weibull_data(300, 0.1, 1.3, 0.5, 8, 6);
  EstimationResult r = fit("(t x, family(rcs, failure(d) df(3)))", d, test::quiet()).result;
  Dataset at = grid(20, 8, 0);
  auto h = run(r, at, Statistic::hazard), ch = run(r, at, Statistic::chazard), s = run(r, at, Statistic::survival);
  // increments of H against Simpson integration of the predicted hazard
  Dataset fine = grid(4000, 8, 0);
  auto hf = run(r, fine, Statistic::hazard);
  auto tf = fine.column("t");
  for (std::size_t i = 0; i < 20; ++i) {
    CHECK(std::abs(s.value[i] - std::exp(-ch.value[i])) < 1e-8);
    CHECK(h.value[i] > 0);
    if (i == 0) continue;
    // grid(20) point i is fine point 200(i+1)-1, an even number of steps on
    const std::size_t a = 199, b = 200 * (i + 1) - 1;
    double acc = hf.value[a] + hf.value[b];
    for (std::size_t j = a + 1; j < b; ++j) acc += ((j - a) % 2 ? 4 : 2) * hf.value[j];
    acc *= (tf[1] - tf[0]) / 3;
    CAPTURE(i);
    CAPTURE(ch.value[i] - ch.value[0] - acc);
    CHECK(ch.value[i] - ch.value[0] == doctest::Approx(acc).epsilon(1e-6));
  }
}

TEST_CASE("exponential competing risks have closed-form incidence") {
  Dataset d = competing_data(12);
  EstimationResult r =
      fit("(t x, family(exponential, failure(d1))) (t x, family(exponential, failure(d2)))", d, test::quiet())
          .result;
  const double l1 = std::exp(test::param(r, "t:_cons") + test::param(r, "t:x"));
  // second model's parameters follow the first's
  const double l2 = std::exp(r.theta(3) + r.theta(2));
  Dataset at = grid(100, 10, 1);
  auto c1 = run(r, at, Statistic::cif, 0, {0, 1}), c2 = run(r, at, Statistic::cif, 1, {0, 1});
  auto s1 = run(r, at, Statistic::survival, 0), s2 = run(r, at, Statistic::survival, 1);
  auto tl = run(r, at, Statistic::timelost, 0, {0, 1});
  for (std::size_t i = 0; i < 100; ++i) {
    double t = at.column("t")[i];
    double ex = l1 / (l1 + l2) * (1 - std::exp(-(l1 + l2) * t));
    CHECK(c1.value[i] == doctest::Approx(ex).epsilon(1e-8));
    CHECK(std::abs(c1.value[i] + c2.value[i] + s1.value[i] * s2.value[i] - 1) < 1e-6);
    double lost = l1 / (l1 + l2) * (t - (1 - std::exp(-(l1 + l2) * t)) / (l1 + l2));
    CHECK(tl.value[i] == doctest::Approx(lost).epsilon(1e-6));
  }
  CHECK_THROWS_AS(run(r, at, Statistic::cif, 0, {1}), ValidationError);
}

TEST_CASE("a single cause has incidence one minus survival, and rmst plus time lost is t") {
  Dataset d = test::weibull_data(300, 0.1, 1.3, 0.5, 8, 7);
  EstimationResult r = fit("(t x, family(rp, failure(d) df(3)))", d, test::quiet()).result;
  Dataset at = grid(25, 8, 1);
  auto c = run(r, at, Statistic::cif, 0, {0}), s = run(r, at, Statistic::survival);
  auto m = run(r, at, Statistic::rmst), l = run(r, at, Statistic::timelost, 0, {0});
  Dataset fine = grid(2000, 8, 1);
  auto sf = run(r, fine, Statistic::survival);
  for (std::size_t i = 0; i < 25; ++i) {
    double t = at.column("t")[i];
    CHECK(std::abs(c.value[i] - (1 - s.value[i])) < 1e-8);
    CHECK(m.value[i] + l.value[i] == doctest::Approx(t).epsilon(1e-10));
    CHECK(m.value[i] <= t);
    CHECK(m.value[i] >= t * s.value[i]);
  }
  // rmst at the last grid point against trapezoid integration of S
  double acc = 0.5 * (1 + sf.value[0]) * fine.column("t")[0];
  for (std::size_t j = 1; j < 2000; ++j)
    acc += 0.5 * (sf.value[j] + sf.value[j - 1]) * (fine.column("t")[j] - fine.column("t")[j - 1]);
  CHECK(m.value[24] == doctest::Approx(acc).epsilon(1e-5));
}

TEST_CASE("linear predictor intervals are the delta method") {
  FitOutput fo = fit("(logb time trt, family(gaussian))", test::pbc(), test::quiet());
  const EstimationResult& r = fo.result;
  auto e = run(r, test::pbc(), Statistic::eta, 0, {}, true);
  const Dataset& d = test::pbc();
  for (std::size_t row = 0; row < d.n_rows(); row += 97) {
    Eigen::VectorXd x = Eigen::VectorXd::Zero(r.theta.size());
    x(test::param_index(fo.design, "logb:time")) = d.column("time")[row];
    x(test::param_index(fo.design, "logb:trt")) = d.column("trt")[row];
    x(test::param_index(fo.design, "logb:_cons")) = 1;
    double se = std::sqrt(x.dot(r.vcov * x));
    CHECK(e.value[row] == doctest::Approx(x.dot(r.theta)).epsilon(1e-12));
    CHECK((e.hi[row] - e.lo[row]) / 2 == doctest::Approx(kZ975 * se).epsilon(1e-6));
  }
}

TEST_CASE("survival intervals stay inside the unit interval") {
  Dataset d = test::weibull_data(60, 0.1, 1.3, 0.5, 8, 8);
  EstimationResult r = fit("(t x, family(weibull, failure(d)))", d, test::quiet()).result;
  Dataset at = grid(40, 20, 1);
  auto s = run(r, at, Statistic::survival, 0, {}, true);
  auto h = run(r, at, Statistic::hazard, 0, {}, true);
  for (std::size_t i = 0; i < 40; ++i) {
    CHECK(s.lo[i] > 0);
    CHECK(s.hi[i] < 1);
    CHECK(s.lo[i] <= s.value[i]);
    CHECK(s.value[i] <= s.hi[i]);
    CHECK(h.lo[i] > 0);
  }
  // no parameter uncertainty, no interval width
  r.vcov.setZero();
  auto z = run(r, at, Statistic::survival, 0, {}, true);
  for (std::size_t i = 0; i < 40; ++i) {
    CHECK(z.lo[i] == doctest::Approx(z.value[i]).epsilon(1e-14));
    CHECK(z.hi[i] == doctest::Approx(z.value[i]).epsilon(1e-14));
  }
}

TEST_CASE("marginal predictions without random effects equal fixed-only ones") {
  Dataset d = test::weibull_data(200, 0.1, 1.3, 0.5, 8, 9);
  EstimationResult r = fit("(t x, family(weibull, failure(d)))", d, test::quiet()).result;
  Dataset at = grid(10, 8, 0);
  for (Statistic s : {Statistic::hazard, Statistic::survival, Statistic::rmst}) {
    auto a = run(r, at, s), b = run(r, at, s, 0, {}, false, true);
    for (std::size_t i = 0; i < 10; ++i) CHECK(a.value[i] == b.value[i]);
  }
}

TEST_CASE("marginal survival integrates over the random intercept") {
  // simulate clustered Weibull data with a frailty
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(0, 1);
  std::normal_distribution<double> z(0, 1);
  std::vector<double> t, dd, x, id;
  for (int c = 0; c < 150; ++c) {
    double b = 0.6 * z(rng);
    for (int k = 0; k < 4; ++k) {
      double xi = u(rng) < 0.5;
      double e = -std::log(u(rng));
      double ti = std::pow(e / (0.1 * std::exp(0.5 * xi + b)), 1 / 1.2);
      t.push_back(std::min(ti, 8.0));
      dd.push_back(ti <= 8);
      x.push_back(xi);
      id.push_back(c + 1);
    }
  }
  Dataset d(t.size());
  d.add_column("t", t);
  d.add_column("d", dd);
  d.add_column("x", x);
  d.add_column("id", id);
  EstimationResult r = fit("(t x M1[id]@1, family(weibull, failure(d)))", d, test::quiet()).result;
  const double sd = std::exp(test::param(r, "id:sd(M1)"));
  const double lam = std::exp(test::param(r, "t:_cons")), g = std::exp(test::param(r, "t:log(gamma)"));
  Dataset at = grid(5, 8, 0);
  at.add_column("id", std::vector<double>(5, 1.0));
  auto m = run(r, at, Statistic::survival, 0, {}, false, true);
  auto f = run(r, at, Statistic::survival, 0, {}, false, false);
  auto mh = run(r, at, Statistic::hazard, 0, {}, false, true);
  for (std::size_t i = 0; i < 5; ++i) {
    double ti = at.column("t")[i];
    double h0 = lam * std::pow(ti, g);
    auto dens = [&](double b) { return std::exp(-0.5 * b * b / (sd * sd)) / (sd * std::sqrt(2 * M_PI)); };
    double es = simpson([&](double b) { return std::exp(-h0 * std::exp(b)) * dens(b); }, -10 * sd, 10 * sd);
    double ehs = simpson([&](double b) { return lam * g * std::pow(ti, g - 1) * std::exp(b) * std::exp(-h0 * std::exp(b)) * dens(b); },
                         -10 * sd, 10 * sd);
    CHECK(m.value[i] == doctest::Approx(es).epsilon(1e-4));
    CHECK(mh.value[i] == doctest::Approx(ehs / es).epsilon(1e-4));
    CHECK(f.value[i] == doctest::Approx(std::exp(-h0)).epsilon(1e-12));
  }
}

TEST_CASE("a vanishing random intercept makes marginal and conditional means agree") {
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> y, x, id;
  for (int c = 0; c < 100; ++c)
    for (int k = 0; k < 3; ++k) {
      double xi = u(rng);
      y.push_back(u(rng) < 1 / (1 + std::exp(-(-0.5 + xi))));
      x.push_back(xi);
      id.push_back(c + 1);
    }
  Dataset d(y.size());
  d.add_column("y", y);
  d.add_column("x", x);
  d.add_column("id", id);
  EstimationResult r = fit("(y x M1[id]@1, family(bernoulli))", d, test::quiet()).result;
  for (std::size_t i = 0; i < r.names.size(); ++i)
    if (r.names[i] == "id:sd(M1)") r.theta(i) = -20;
  auto a = run(r, d, Statistic::mu, 0, {}, true, true), b = run(r, d, Statistic::mu, 0, {}, true, false);
  for (std::size_t i = 0; i < d.n_rows(); i += 11) {
    CHECK(a.value[i] == doctest::Approx(b.value[i]).epsilon(1e-8));
    CHECK(b.lo[i] > 0);
    CHECK(b.hi[i] < 1);
  }
  // a gaussian marginal mean is the fixed part whatever the variance
  FitOutput g = fit("(logb time M1[id]@1, family(gaussian))", test::pbc(), test::quiet());
  auto ga = run(g.result, test::pbc(), Statistic::mu, 0, {}, false, true);
  auto gb = run(g.result, test::pbc(), Statistic::mu, 0, {}, false, false);
  for (std::size_t i = 0; i < test::pbc().n_rows(); i += 37)
    CHECK(ga.value[i] == doctest::Approx(gb.value[i]).epsilon(1e-10));
}

TEST_CASE("request validation") {
  Dataset d = test::weibull_data(100, 0.1, 1.3, 0.5, 8, 1);
  EstimationResult r = fit("(t x, family(weibull, failure(d)))", d, test::quiet()).result;
  PredictionRequest q;
  q.statistic = Statistic::survival;
  q.at = {{"x", 1.0}};
  auto with_at = predict(r, d, q);
  Dataset ones = d;
  ones.fill_column("x", 1.0);
  q.at.clear();
  auto filled = predict(r, ones, q);
  CHECK(with_at.value == filled.value);
  q.at = {{"age", 1.0}};
  CHECK_THROWS_AS(predict(r, d, q), ValidationError);
  q.at.clear();
  q.outcome = 3;
  CHECK_THROWS_AS(predict(r, d, q), ValidationError);
  q.outcome = 0;
  q.statistic = Statistic::mu;
  CHECK_THROWS_AS(predict(r, d, q), ValidationError);
  Dataset other = d;
  other.add_column("extra", std::vector<double>(d.n_rows(), 0.0));
  q.statistic = Statistic::hazard;
  CHECK_NOTHROW(predict(r, other, q));
  EstimationResult bad = r;
  bad.converged = false;
  CHECK_THROWS_WITH_AS(predict(bad, d, q), doctest::Contains("converge"), ValidationError);
  q.force = true;
  CHECK_NOTHROW(predict(bad, d, q));
  CHECK_THROWS_AS(parse_statistic("median"), ValidationError);
  CHECK(parse_statistic("timelost") == Statistic::timelost);
}

TEST_CASE("prediction CSV layout") {
  PredictionOutput o;
  o.statistic = "survival";
  o.has_time = true;
  o.has_ci = true;
  o.time = {1.0, std::nan("")};
  o.value = {0.5, std::nan("")};
  o.lo = {0.25, std::nan("")};
  o.hi = {0.75, std::nan("")};
  std::ostringstream os;
  write_prediction_csv(os, o);
  std::string s = os.str();
  CHECK(s.rfind("row,time,survival,survival_lo,survival_hi\n", 0) == 0);
  CHECK(s.find("\n2,,,,\n") != std::string::npos);
  Dataset back = parse_csv(s);
  CHECK(back.n_rows() == 2);
  CHECK(back.column("survival")[0] == 0.5);
  CHECK(back.column("survival_hi")[0] == 0.75);
}

}
