#include "merlin/cli.hpp"

#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "merlin/error.hpp"
#include "merlin/estimate.hpp"
#include "merlin/parallel.hpp"
#include "merlin/predict.hpp"
#include "merlin/report.hpp"

namespace merlin {

void register_builtin_callbacks(CallbackRegistry& registry) {
  registry.add("logl", [](const EvaluationContext& ctx) {
    double ls = ctx.ap(1);
    double r = (ctx.depvar() - ctx.xzb()) * std::exp(-ls);
    return -0.91893853320467274178 - ls - 0.5 * r * r;
  });
}

namespace {

struct FitArgs {
  std::string data;
  std::vector<std::string> models;
  std::string covariance;
  std::optional<int> intpoints;
  std::string intmethod;
  std::optional<int> chintpoints;
  std::vector<std::string> na;
  std::string out;
  bool nolog = false;
  bool all = false;
  int threads = 0;
  int maxiter = 300;
  std::string readapt = "every-iter";
  std::string optimizer = "bfgs";
};

struct PredictArgs {
  std::string result;
  std::string data;
  std::string statistic;
  int outcome = 1;
  std::string causes;
  std::string timevar;
  std::vector<std::string> at;
  std::vector<std::string> na;
  bool ci = false;
  bool fixedonly = false;
  bool marginal = false;
  bool force = false;
  std::string out;
  int threads = 0;
};

std::set<std::string> na_tokens(const std::vector<std::string>& extra) {
  auto t = default_na_tokens();
  for (const auto& s : extra) t.insert(s);
  return t;
}

int cmd_fit(const FitArgs& a, std::ostream& out) {
  Dataset d = load_csv(a.data, na_tokens(a.na));
  std::string text;
  for (const auto& m : a.models) text += (text.empty() ? "" : " ") + m;
  ModelGraph g = parse_spec(text);
  if (a.covariance == "unstructured") g.options.covariance = CovarianceStructure::unstructured;
  else if (a.covariance == "diagonal") g.options.covariance = CovarianceStructure::diagonal;

  FitOptions opt;
  register_builtin_callbacks(opt.callbacks);
  opt.gh_nodes = a.intpoints;
  opt.gl_nodes = a.chintpoints;
  if (a.intmethod == "ghermite") opt.adaptive = false;
  else if (!a.intmethod.empty()) opt.adaptive = true;
  opt.readapt = a.readapt == "every-eval" ? Readapt::every_eval : Readapt::every_iter;
  opt.threads = a.threads > 0 ? a.threads : default_threads();
  opt.max_iter = a.maxiter;
  opt.optimizer = a.optimizer == "newton" ? OptimizerKind::newton : OptimizerKind::bfgs;
  opt.log = &out;
  opt.nolog = a.nolog;

  FitOutput fo = fit(g, d, opt);
  auto panels = standard_errors(fo.design, fo.result);
  if (a.all) {
    // baseline spline coefficients are hidden by default
    for (std::size_t i = 0; i < fo.design.params.size(); ++i) {
      const auto& p = fo.design.params[i];
      if (!p.hidden) continue;
      for (auto& panel : panels)
        if (panel.title == p.panel) {
          TableRow r;
          r.label = p.label;
          r.coef = fo.result.theta(i);
          r.se = fo.result.vcov_ok ? std::sqrt(fo.result.vcov(i, i)) : std::nan("");
          r.z = r.coef / r.se;
          r.p = normal_p_value(r.z);
          r.lo = r.coef - kZ975 * r.se;
          r.hi = r.coef + kZ975 * r.se;
          r.param = i;
          panel.rows.push_back(r);
          break;
        }
    }
  }
  print_table(out, panels, fo.result);
  if (!a.out.empty()) save_result(fo.result, a.out);
  return fo.result.converged ? 0 : 2;
}

int cmd_predict(const PredictArgs& a, std::ostream& out) {
  if (a.fixedonly && a.marginal) throw ValidationError("--fixedonly and --marginal are mutually exclusive");
  EstimationResult res = load_result(a.result);
  Dataset d = load_csv(a.data, na_tokens(a.na));
  PredictionRequest req;
  req.statistic = parse_statistic(a.statistic);
  if (a.outcome < 1) throw ValidationError("--outcome is 1-based");
  req.outcome = static_cast<std::size_t>(a.outcome - 1);
  if (!a.causes.empty()) {
    std::stringstream ss(a.causes);
    std::string item;
    while (std::getline(ss, item, ',')) {
      int c = 0;
      try {
        c = std::stoi(item);
      } catch (const std::exception&) {
        throw ValidationError("--causes expects a comma-separated list of model numbers");
      }
      if (c < 1) throw ValidationError("--causes entries are 1-based model numbers");
      req.causes.push_back(static_cast<std::size_t>(c - 1));
    }
  }
  if (!a.timevar.empty()) req.timevar = a.timevar;
  for (const auto& s : a.at) {
    auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ValidationError("--at expects var=value, got '" + s + "'");
    double v = 0;
    try {
      std::size_t used = 0;
      v = std::stod(s.substr(eq + 1), &used);
      if (used != s.size() - eq - 1) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ValidationError("--at value is not a number: '" + s + "'");
    }
    req.at.emplace_back(s.substr(0, eq), v);
  }
  req.marginal = a.marginal;
  req.ci = a.ci;
  req.force = a.force;
  req.threads = a.threads > 0 ? a.threads : default_threads();
  CallbackRegistry callbacks;
  register_builtin_callbacks(callbacks);
  PredictionOutput po = predict(res, d, req, callbacks);
  if (a.out.empty()) {
    write_prediction_csv(out, po);
  } else {
    std::ofstream f(a.out);
    if (!f) throw DataError("cannot write " + a.out);
    write_prediction_csv(f, po);
  }
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"merlin: multivariate mixed-effects and survival models by maximum likelihood", "merlin"};
  app.require_subcommand(1);

  FitArgs fa;
  auto* fit_cmd = app.add_subcommand("fit", "fit a model and print the estimates table");
  fit_cmd->add_option("--data", fa.data, "CSV data file")->required();
  fit_cmd->add_option("--model", fa.models, "model text, e.g. \"(y x, family(gaussian))\"; repeatable")->required();
  fit_cmd->add_option("--covariance", fa.covariance, "random-effect covariance")
      ->check(CLI::IsMember({"diagonal", "unstructured"}));
  fit_cmd->add_option("--intpoints", fa.intpoints, "Gauss-Hermite nodes per dimension")
      ->check(CLI::PositiveNumber);
  fit_cmd->add_option("--intmethod", fa.intmethod, "integration method")
      ->check(CLI::IsMember({"mvaghermite", "aghermite", "ghermite"}));
  fit_cmd->add_option("--chintpoints", fa.chintpoints, "Gauss-Legendre nodes for cumulative hazards")
      ->check(CLI::PositiveNumber);
  fit_cmd->add_option("--na", fa.na, "extra missing-value token; repeatable");
  fit_cmd->add_option("--out", fa.out, "write the result JSON here");
  fit_cmd->add_flag("--nolog", fa.nolog, "suppress the iteration log");
  fit_cmd->add_flag("--all", fa.all, "also show baseline spline coefficients");
  fit_cmd->add_option("--threads", fa.threads, "worker threads (default MERLIN_THREADS or 1)");
  fit_cmd->add_option("--maxiter", fa.maxiter, "maximum optimizer iterations")->check(CLI::PositiveNumber);
  fit_cmd->add_option("--readapt", fa.readapt, "when to recompute adaptive quadrature")
      ->check(CLI::IsMember({"every-iter", "every-eval"}));
  fit_cmd->add_option("--optimizer", fa.optimizer, "optimizer")->check(CLI::IsMember({"bfgs", "newton"}));

  PredictArgs pa;
  auto* pred_cmd = app.add_subcommand("predict", "evaluate a statistic from a stored fit");
  pred_cmd->add_option("--result", pa.result, "result JSON from fit --out")->required();
  pred_cmd->add_option("--data", pa.data, "CSV data file")->required();
  pred_cmd->add_option("--statistic", pa.statistic, "mu, eta, hazard, chazard, survival, cif, rmst or timelost")
      ->required();
  pred_cmd->add_option("--outcome", pa.outcome, "model number (1-based)");
  pred_cmd->add_option("--causes", pa.causes, "comma-separated model numbers");
  pred_cmd->add_option("--timevar", pa.timevar, "column of evaluation times");
  pred_cmd->add_option("--at", pa.at, "var=value override; repeatable");
  pred_cmd->add_option("--na", pa.na, "extra missing-value token; repeatable");
  pred_cmd->add_flag("--ci", pa.ci, "delta-method 95% confidence interval");
  pred_cmd->add_flag("--fixedonly", pa.fixedonly, "random effects at zero (default)");
  pred_cmd->add_flag("--marginal", pa.marginal, "integrate over the random effects");
  pred_cmd->add_flag("--force", pa.force, "ignore schema and convergence checks");
  pred_cmd->add_option("--out", pa.out, "output CSV (default stdout)");
  pred_cmd->add_option("--threads", pa.threads, "worker threads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }
  try {
    if (fit_cmd->parsed()) return cmd_fit(fa, out);
    return cmd_predict(pa, out);
  } catch (const ParseError& e) {
    err << "error: model syntax: " << e.what() << "\n";
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
  }
  return 1;
}

}  // namespace merlin
