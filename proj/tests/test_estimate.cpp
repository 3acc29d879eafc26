#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "merlin/cli.hpp"
#include "merlin/error.hpp"
#include "merlin/likelihood.hpp"
#include "merlin/optimize.hpp"
#include "support.hpp"

using namespace merlin;

namespace {

// every reported optimum is a stationary point
void check_gradient(const FitOutput& fo, double tol = 1e-4) {
  Likelihood lik(fo.design, {fo.result.gh_nodes, fo.result.adaptive, 1});
  if (lik.has_effects()) lik.adapt(fo.result.theta);
  Objective f = [&](const Eigen::VectorXd& th) { return lik.total(th); };
  Eigen::VectorXd g = numerical_gradient(f, fo.result.theta, f(fo.result.theta));
  CHECK(g.cwiseAbs().maxCoeff() < tol);
}

void check_psd(const EstimationResult& r) {
  REQUIRE(r.vcov_ok);
  CHECK((r.vcov - r.vcov.transpose()).cwiseAbs().maxCoeff() < 1e-12);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(r.vcov);
  CHECK(es.eigenvalues().minCoeff() > 0);
}

bool same_bits(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

}  // namespace

TEST_SUITE("estimate") {

TEST_CASE("linear regression on PBC") {
  FitOutput fo = fit("(logb time, family(gaussian))", test::pbc(), test::quiet());
  const EstimationResult& r = fo.result;
  CHECK(r.converged);
  CHECK(r.n_obs == 1945);
  CHECK(test::rel_diff(r.loglik, -2961.4144) < 1e-4);
  CHECK(test::rel_diff(test::param(r, "logb:time"), 0.0139443) < 1e-3);
  CHECK(test::rel_diff(test::param(r, "logb:_cons"), 0.5594103) < 1e-3);
  CHECK(test::rel_diff(std::exp(test::param(r, "logb:sd(resid.)")), 1.109201) < 1e-3);
  // ordinary least squares
  const Dataset& d = test::pbc();
  auto y = d.column("logb"), t = d.column("time");
  Eigen::MatrixXd x(y.size(), 2);
  Eigen::VectorXd yv(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    x(i, 0) = t[i];
    x(i, 1) = 1;
    yv(i) = y[i];
  }
  Eigen::VectorXd ols = x.colPivHouseholderQr().solve(yv);
  CHECK(test::param(r, "logb:time") == doctest::Approx(ols(0)).epsilon(1e-6));
  CHECK(test::param(r, "logb:_cons") == doctest::Approx(ols(1)).epsilon(1e-6));
  check_gradient(fo);
  check_psd(r);
}

TEST_CASE("Weibull proportional hazards on PBC") {
  FitOutput fo = fit("(stime trt, family(weibull, failure(died)))", test::pbc(), test::quiet());
  const EstimationResult& r = fo.result;
  CHECK(r.converged);
  CHECK(r.n_obs == 312);
  CHECK(test::rel_diff(r.loglik, -511.84742) < 1e-4);
  CHECK(std::abs(test::param(r, "stime:trt") - -0.0004536) < 1e-3 * 0.169053);
  CHECK(test::rel_diff(test::param(r, "stime:_cons"), -2.815926) < 1e-3);
  CHECK(test::rel_diff(test::param(r, "stime:log(gamma)"), 0.0740757) < 1e-3);
  CHECK(test::rel_diff(test::param_se(r, "stime:trt"), 0.169053) < 1e-3);
  check_gradient(fo);
  check_psd(r);
}

TEST_CASE("delayed entry at time zero reproduces the untruncated fit") {
  Dataset d = test::pbc();
  d.add_column("t0", std::vector<double>(d.n_rows(), 0.0));
  FitOutput a = fit("(stime trt, family(weibull, failure(died)))", d, test::quiet());
  FitOutput b = fit("(stime trt, family(weibull, failure(died) ltruncated(t0)))", d, test::quiet());
  CHECK(std::abs(a.result.loglik - b.result.loglik) < 1e-8);
  CHECK((a.result.theta - b.result.theta).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("rp with one degree of freedom is the Weibull model") {
  Dataset d = test::weibull_data(400, 0.1, 1.3, 0.5, 8, 17);
  FitOutput w = fit("(t x, family(weibull, failure(d)))", d, test::quiet());
  FitOutput rp = fit("(t x, family(rp, failure(d) df(1)))", d, test::quiet());
  // rp reports the log-time density scale: each event adds ln t
  double shift = 0;
  for (std::size_t r = 0; r < d.n_rows(); ++r) shift += d.column("d")[r] * std::log(d.column("t")[r]);
  CHECK(std::abs(rp.result.loglik - (w.result.loglik + shift)) < 1e-4);
  CHECK(test::param(rp.result, "t:x") == doctest::Approx(test::param(w.result, "t:x")).epsilon(1e-4));
  check_gradient(rp);
}

TEST_CASE("orthogonalizing a spline basis leaves the fit unchanged") {
  const Dataset& d = test::pbc();
  FitOutput a = fit("(logb rcs(time, df(3)), family(gaussian))", d, test::quiet());
  FitOutput b = fit("(logb rcs(time, df(3) orthog), family(gaussian))", d, test::quiet());
  CHECK(test::rel_diff(a.result.loglik, b.result.loglik) < 1e-6);
  CHECK(test::rel_diff(a.result.loglik, -2960.7317) < 1e-4);
  CHECK(test::rel_diff(test::param(a.result, "logb:rcs():1"), 0.0636201) < 1e-3);
  // fitted values agree at every row
  Evaluator ea(a.design, a.result.theta), eb(b.design, b.result.theta);
  double worst = 0;
  for (std::size_t r = 0; r < d.n_rows(); r += 7)
    worst = std::max(worst, std::abs(ea.eta(0, r, {}, nullptr, 0).v - eb.eta(0, r, {}, nullptr, 0).v));
  CHECK(worst < 1e-5);
}

TEST_CASE("an affine rescaling of a covariate rescales its coefficient") {
  Dataset d = test::weibull_data(300, 0.2, 0.8, -0.4, 6, 3);
  std::vector<double> z(d.n_rows());
  auto x = d.column("x");
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = 2.5 * x[i] - 1;
  d.add_column("z", z);
  FitOutput a = fit("(t x, family(weibull, failure(d)))", d, test::quiet());
  FitOutput b = fit("(t z, family(weibull, failure(d)))", d, test::quiet());
  CHECK(test::rel_diff(a.result.loglik, b.result.loglik) < 1e-6);
  CHECK(test::param(b.result, "t:z") * 2.5 == doctest::Approx(test::param(a.result, "t:x")).epsilon(1e-5));
}

TEST_CASE("BFGS and Newton agree") {
  Dataset d = test::weibull_data(300, 0.2, 1.2, 0.7, 6, 9);
  FitOptions ob = test::quiet(), on = test::quiet();
  on.optimizer = OptimizerKind::newton;
  FitOutput a = fit("(t x, family(gompertz, failure(d)))", d, ob);
  FitOutput b = fit("(t x, family(gompertz, failure(d)))", d, on);
  CHECK(a.result.converged);
  CHECK(b.result.converged);
  CHECK((a.result.theta - b.result.theta).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(std::abs(a.result.loglik - b.result.loglik) < 1e-6);
}

TEST_CASE("simulated Weibull truth is recovered") {
  Dataset d = test::weibull_data(2000, 0.1, 1.4, 0.6, 10, 11);
  FitOutput fo = fit("(t x, family(weibull, failure(d)))", d, test::quiet());
  const EstimationResult& r = fo.result;
  CHECK(std::abs(test::param(r, "t:x") - 0.6) < 3 * test::param_se(r, "t:x"));
  CHECK(std::abs(test::param(r, "t:_cons") - std::log(0.1)) < 3 * test::param_se(r, "t:_cons"));
  CHECK(std::abs(test::param(r, "t:log(gamma)") - std::log(1.4)) < 3 * test::param_se(r, "t:log(gamma)"));
}

TEST_CASE("random intercept fit is stationary with a positive definite covariance") {
  FitOutput fo = fit("(logb rcs(time, df(3)) M1[id]@1, family(gaussian))", test::pbc(), test::quiet());
  const EstimationResult& r = fo.result;
  CHECK(r.converged);
  CHECK(test::rel_diff(r.loglik, -1871.1924) < 5e-3);
  CHECK(test::rel_diff(std::exp(test::param(r, "id:sd(M1)")), 1.099119) < 5e-3);
  CHECK(test::rel_diff(std::exp(test::param(r, "logb:sd(resid.)")), 0.4866347) < 5e-3);
  check_gradient(fo);
  check_psd(r);
}

TEST_CASE("the user-family callback reproduces the built-in Gaussian") {
  CallbackRegistry callbacks;
  register_builtin_callbacks(callbacks);
  FitOptions o = test::quiet();
  o.callbacks = callbacks;
  Dataset d = test::pbc();
  FitOutput a = fit("(logb time M1[id]@1, family(gaussian))", d, o);
  FitOutput b = fit("(logb time M1[id]@1, family(user, llfunction(logl) nap(1)))", d, o);
  CHECK(test::rel_diff(b.result.loglik, a.result.loglik) < 1e-6);
  CHECK(test::param(b.result, "logb:ap:1") == doctest::Approx(test::param(a.result, "logb:sd(resid.)")).epsilon(1e-4));
}

TEST_CASE("fits are bit-identical across thread counts") {
  Dataset d = test::pbc();
  FitOptions o1 = test::quiet(), o4 = test::quiet();
  o4.threads = 4;
  const std::string text = "(logb time M1[id]@1, family(gaussian))";
  FitOutput a = fit(text, d, o1), b = fit(text, d, o4);
  CHECK(same_bits(a.result.theta, b.result.theta));
  CHECK(to_json(a.result) == to_json(b.result));
}

TEST_CASE("result files round-trip exactly") {
  FitOutput fo = fit("(stime trt rcs(age, df(2)), family(rp, failure(died) df(3)))", test::pbc(), test::quiet());
  const std::string text = to_json(fo.result);
  EstimationResult back = from_json(text);
  CHECK(same_bits(back.theta, fo.result.theta));
  CHECK(std::memcmp(back.vcov.data(), fo.result.vcov.data(), sizeof(double) * back.vcov.size()) == 0);
  CHECK(back.loglik == fo.result.loglik);
  CHECK(back.names == fo.result.names);
  CHECK(back.fingerprint == fo.result.fingerprint);
  CHECK(to_json(back) == text);

  auto path = std::filesystem::temp_directory_path() / "merlin_roundtrip.json";
  save_result(fo.result, path);
  EstimationResult loaded = load_result(path);
  CHECK(to_json(loaded) == text);
  std::filesystem::remove(path);

  // a rebuilt design reproduces the likelihood
  Design design = rebuild_design(back, test::pbc(), {});
  Likelihood lik(design, {back.gh_nodes, back.adaptive, 1});
  CHECK(lik.total(back.theta) == doctest::Approx(fo.result.loglik).epsilon(1e-12));
}

TEST_CASE("bad result files are rejected") {
  FitOutput fo = fit("(stime trt, family(weibull, failure(died)))", test::pbc(), test::quiet());
  nlohmann::json j = nlohmann::json::parse(to_json(fo.result));
  j["version"] = 99;
  CHECK_THROWS_WITH_AS(from_json(j.dump()), doctest::Contains("version"), FormatError);
  CHECK_THROWS_AS(from_json("{\"format\": \"merlin-result\", \"vers"), FormatError);
  CHECK_THROWS_AS(from_json("[1, 2, 3]"), FormatError);
  nlohmann::json k = nlohmann::json::parse(to_json(fo.result));
  k["theta"].push_back(1.0);
  CHECK_THROWS_AS(from_json(k.dump()), FormatError);
}

TEST_CASE("iteration limits are reported as non-convergence") {
  FitOptions o = test::quiet();
  o.max_iter = 1;
  FitOutput fo = fit("(stime trt, family(weibull, failure(died)))", test::pbc(), o);
  CHECK_FALSE(fo.result.converged);
}

}
