#include "merlin/predict.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>

#include "merlin/error.hpp"
#include "merlin/likelihood.hpp"
#include "merlin/parallel.hpp"
#include "merlin/quadrature.hpp"
#include "merlin/report.hpp"

namespace merlin {

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();

bool needs_time(Statistic s) { return s != Statistic::mu && s != Statistic::eta; }

enum class Transform { identity, log, cloglog, logit };

double forward(Transform t, double v) {
  switch (t) {
    case Transform::log: return std::log(v);
    case Transform::cloglog: return std::log(-std::log(v));
    case Transform::logit: return std::log(v / (1 - v));
    default: return v;
  }
}

double backward(Transform t, double v) {
  switch (t) {
    case Transform::log: return std::exp(v);
    case Transform::cloglog: return std::exp(-std::exp(v));
    case Transform::logit: return 1 / (1 + std::exp(-v));
    default: return v;
  }
}

Transform transform_for(Statistic s, FamilyTag tag) {
  switch (s) {
    case Statistic::hazard:
    case Statistic::chazard:
    case Statistic::rmst:
    case Statistic::timelost: return Transform::log;
    case Statistic::survival:
    case Statistic::cif: return Transform::cloglog;
    case Statistic::mu:
      if (tag == FamilyTag::bernoulli) return Transform::logit;
      if (tag == FamilyTag::poisson) return Transform::log;
      return Transform::identity;
    default: return Transform::identity;
  }
}

// Prior nodes over all random effects: z per level and log weight.
struct PriorRule {
  std::vector<TensorRule> levels;
  std::size_t size() const {
    std::size_t n = 1;
    for (const auto& l : levels) n *= l.size();
    return n;
  }
};

class StatisticEvaluator {
 public:
  StatisticEvaluator(const Design& design, const PredictionRequest& req, std::vector<std::size_t> causes,
                     const std::vector<double>& times, int gh_nodes)
      : design_(design), req_(req), causes_(std::move(causes)), times_(times),
        first_rule_(design.time_rule),
        panel_rule_(gauss_legendre(static_cast<int>(design.time_rule.size()), 0.0, 1.0)),
        integrate_(req.marginal && !design.levels.empty()) {
    // spline knots in time split the outer integrals of cif/rmst/timelost
    // into panels on which the integrand is smooth
    auto add = [&](const FrozenBasis& b) {
      if (b.kind == BasisKind::fp) return;
      for (double k : b.knots.all()) breaks_.push_back(b.knots.log ? std::exp(k) : k);
    };
    std::vector<std::size_t> models = causes_;
    models.push_back(req.outcome);
    for (std::size_t m : models) {
      const ModelDesign& md = design.models[m];
      if (md.family.baseline) add(*md.family.baseline);
      for (const ComponentDesign& c : md.components)
        for (const ElementDesign& e : c.elements)
          if (e.time && e.basis) add(*e.basis);
    }
    std::sort(breaks_.begin(), breaks_.end());
    breaks_.erase(std::unique(breaks_.begin(), breaks_.end()), breaks_.end());
    if (req.marginal) {
      QuadratureRule gh = gauss_hermite(gh_nodes);
      for (const auto& l : design.levels) prior_.levels.push_back(tensor_rule(gh, l.q()));
    }
  }

  double value(const Eigen::VectorXd& theta, std::size_t row) const {
    Evaluator ev(design_, theta);
    const double t = times_[row];
    if (needs_time(req_.statistic) && !(t > 0)) return kNaN;
    if (!integrate_) return conditional(ev, row, Effects{}, t).first;

    double num = 0, den = 0;
    const std::size_t nl = prior_.levels.size();
    std::vector<Eigen::VectorXd> b(nl);
    for (std::size_t l = 0; l < nl; ++l) b[l].resize(design_.levels[l].q());
    const std::size_t total = prior_.size();
    for (std::size_t k = 0; k < total; ++k) {
      std::size_t rem = k;
      double lw = 0;
      Effects e;
      for (std::size_t l = nl; l-- > 0;) {
        const TensorRule& r = prior_.levels[l];
        std::size_t idx = rem % r.size();
        rem /= r.size();
        lw += r.log_weights[idx];
        b[l] = ev.chol(l) * Eigen::Map<const Eigen::VectorXd>(r.node(idx), r.dim);
        e.b[l] = b[l].data();
      }
      double w = std::exp(lw);
      auto [n, dd] = conditional(ev, row, e, t);
      num += w * n;
      den += w * dd;
    }
    return finish(num, den);
  }

 private:
  // (numerator, denominator) pieces so marginal hazards can be formed as
  // E[h·S] / E[S]; other statistics use the numerator only.
  std::pair<double, double> conditional(const Evaluator& ev, std::size_t row, const Effects& b, double t) const {
    const std::size_t k = req_.outcome;
    const double* tp = req_.timevar && !std::isnan(t) ? &t : nullptr;
    switch (req_.statistic) {
      case Statistic::eta: return {ev.eta(k, row, b, tp, 0).v, 1.0};
      case Statistic::mu: return {ev.mean(k, row, b, tp, 0).v, 1.0};
      case Statistic::hazard: {
        double h = std::exp(ev.log_hazard(k, row, b, t));
        if (!integrate_) return {h, 1.0};
        double s = std::exp(-ev.cum_hazard(k, row, b, t));
        return {h * s, s};
      }
      case Statistic::chazard:
        if (!integrate_) return {ev.cum_hazard(k, row, b, t), 1.0};
        return {std::exp(-ev.cum_hazard(k, row, b, t)), 1.0};
      case Statistic::survival: return {std::exp(-ev.cum_hazard(k, row, b, t)), 1.0};
      case Statistic::cif:
      case Statistic::rmst:
      case Statistic::timelost: {
        auto integrand = [&](double u) {
          double ch = 0;
          for (std::size_t c : causes_) ch += ev.cum_hazard(c, row, b, u);
          double surv = std::exp(-ch);
          if (req_.statistic == Statistic::rmst) return surv;
          double f = std::exp(ev.log_hazard(k, row, b, u)) * surv;
          return req_.statistic == Statistic::timelost ? f * (t - u) : f;
        };
        double s = 0, lo = 0;
        for (double hi : breaks_) {
          if (!(hi > 0)) continue;
          if (hi >= t) break;
          s += panel(integrand, lo, hi);
          lo = hi;
        }
        return {s + panel(integrand, lo, t), 1.0};
      }
    }
    return {kNaN, 1.0};
  }

  // graded rule on the panel starting at 0 (integrable singularities of the
  // hazard there), Gauss-Legendre in ln u elsewhere since log-time knots
  // make the integrand smooth in ln u between breaks
  template <class F>
  double panel(const F& f, double lo, double hi) const {
    double s = 0;
    if (lo == 0) {
      for (std::size_t i = 0; i < first_rule_.size(); ++i) s += first_rule_.weights[i] * f(hi * first_rule_.nodes[i]);
      return hi * s;
    }
    const double a = std::log(lo), w = std::log(hi) - a;
    for (std::size_t i = 0; i < panel_rule_.size(); ++i) {
      double u = std::exp(a + w * panel_rule_.nodes[i]);
      s += panel_rule_.weights[i] * u * f(u);
    }
    return w * s;
  }

  double finish(double num, double den) const {
    switch (req_.statistic) {
      case Statistic::hazard: return num / den;
      case Statistic::chazard: return -std::log(num);
      default: return num;
    }
  }

  const Design& design_;
  const PredictionRequest& req_;
  std::vector<std::size_t> causes_;
  const std::vector<double>& times_;
  QuadratureRule first_rule_, panel_rule_;
  std::vector<double> breaks_;
  bool integrate_;
  PriorRule prior_;
};

std::string format_cell(double v) {
  if (!std::isfinite(v)) return "";
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace

Statistic parse_statistic(const std::string& name) {
  static const std::pair<const char*, Statistic> table[] = {
      {"mu", Statistic::mu},           {"eta", Statistic::eta},     {"hazard", Statistic::hazard},
      {"chazard", Statistic::chazard}, {"survival", Statistic::survival}, {"cif", Statistic::cif},
      {"rmst", Statistic::rmst},       {"timelost", Statistic::timelost}};
  for (const auto& [n, s] : table)
    if (name == n) return s;
  throw ValidationError("unknown statistic '" + name + "'");
}

const char* to_string(Statistic s) {
  switch (s) {
    case Statistic::mu: return "mu";
    case Statistic::eta: return "eta";
    case Statistic::hazard: return "hazard";
    case Statistic::chazard: return "chazard";
    case Statistic::survival: return "survival";
    case Statistic::cif: return "cif";
    case Statistic::rmst: return "rmst";
    case Statistic::timelost: return "timelost";
  }
  return "?";
}

PredictionOutput predict(const EstimationResult& res, const Dataset& data, const PredictionRequest& req,
                         const CallbackRegistry& callbacks) {
  if (!req.force) {
    if (!res.converged) throw ValidationError("the stored fit did not converge (use --force to predict anyway)");
    if (schema_fingerprint(data, res.schema) != res.fingerprint)
      throw ValidationError("data schema does not match the fitted model (use --force to override)");
  }
  Dataset d = data;
  for (const auto& [name, value] : req.at) {
    if (std::find(res.schema.begin(), res.schema.end(), name) == res.schema.end())
      throw ValidationError("at(): variable '" + name + "' is not used by the model");
    d.fill_column(name, value);
  }
  Design design = rebuild_design(res, d, callbacks);
  const std::size_t nm = design.models.size();
  if (req.outcome >= nm)
    throw ValidationError("outcome " + std::to_string(req.outcome + 1) + " does not exist; the fit has " +
                          std::to_string(nm) + " model(s)");
  const ModelDesign& target = design.models[req.outcome];
  const std::string tag = "model " + std::to_string(req.outcome + 1) + " (" + target.spec.response + ")";
  if (needs_time(req.statistic) && !target.family.survival)
    throw ValidationError(std::string("statistic ") + to_string(req.statistic) + " requires a survival model; " +
                          tag + " has family " + to_string(target.family.tag));
  if (req.statistic == Statistic::mu && target.family.survival)
    throw ValidationError("statistic mu is not defined for survival " + tag);

  std::vector<std::size_t> causes = req.causes;
  if (causes.empty())
    for (std::size_t m = 0; m < nm; ++m)
      if (design.models[m].family.survival) causes.push_back(m);
  for (std::size_t c : causes) {
    if (c >= nm) throw ValidationError("cause " + std::to_string(c + 1) + " does not exist");
    if (!design.models[c].family.survival)
      throw ValidationError("cause " + std::to_string(c + 1) + " is not a survival model");
  }
  if ((req.statistic == Statistic::cif || req.statistic == Statistic::timelost) &&
      std::find(causes.begin(), causes.end(), req.outcome) == causes.end())
    throw ValidationError("causes() must include the outcome model");

  // evaluation times
  const std::size_t n = d.n_rows();
  std::vector<double> times(n, kNaN);
  std::size_t time_col = npos;
  if (req.timevar) {
    if (!d.has_column(*req.timevar)) throw ValidationError("timevar column '" + *req.timevar + "' not found");
    time_col = d.column_index(*req.timevar);
  } else if (target.timevar != npos) {
    time_col = target.timevar;
  } else if (target.family.survival && target.response != npos) {
    time_col = target.response;
  } else if (needs_time(req.statistic)) {
    throw ValidationError(std::string("statistic ") + to_string(req.statistic) + " needs evaluation times");
  }
  if (time_col != npos)
    for (std::size_t r = 0; r < n; ++r)
      if (!d.is_missing(time_col, r)) times[r] = d.column(time_col)[r];

  StatisticEvaluator se(design, req, causes, times, res.gh_nodes);
  PredictionOutput out;
  out.statistic = to_string(req.statistic);
  out.has_time = time_col != npos;
  out.has_ci = req.ci;
  out.time = times;
  out.value.assign(n, kNaN);
  if (req.ci) {
    out.lo.assign(n, kNaN);
    out.hi.assign(n, kNaN);
  }
  const Transform tr = transform_for(req.statistic, target.family.tag);
  const Eigen::Index np = res.theta.size();
  parallel_for(n, std::max(1, req.threads), [&](std::size_t r) {
    double v = se.value(res.theta, r);
    out.value[r] = std::isfinite(v) ? v : kNaN;
    if (!req.ci || !std::isfinite(v) || !res.vcov_ok) return;
    double gv = forward(tr, v);
    if (!std::isfinite(gv)) return;
    Eigen::VectorXd grad(np);
    Eigen::VectorXd th = res.theta;
    for (Eigen::Index i = 0; i < np; ++i) {
      double h = std::cbrt(kEps) * std::max(std::abs(res.theta(i)), 1.0);
      th(i) = res.theta(i) + h;
      double fp = forward(tr, se.value(th, r));
      th(i) = res.theta(i) - h;
      double fm = forward(tr, se.value(th, r));
      th(i) = res.theta(i);
      grad(i) = (fp - fm) / (2 * h);
    }
    double var = grad.dot(res.vcov * grad);
    if (!std::isfinite(var) || var < 0) return;
    double s = std::sqrt(var);
    double a = backward(tr, gv - kZ975 * s), b = backward(tr, gv + kZ975 * s);
    out.lo[r] = std::min(a, b);
    out.hi[r] = std::max(a, b);
  });
  return out;
}

void write_prediction_csv(std::ostream& os, const PredictionOutput& out) {
  os << "row,time," << out.statistic;
  if (out.has_ci) os << "," << out.statistic << "_lo," << out.statistic << "_hi";
  os << "\n";
  for (std::size_t r = 0; r < out.value.size(); ++r) {
    os << (r + 1) << "," << (out.has_time ? format_cell(out.time[r]) : "") << "," << format_cell(out.value[r]);
    if (out.has_ci) os << "," << format_cell(out.lo[r]) << "," << format_cell(out.hi[r]);
    os << "\n";
  }
}

}  // namespace merlin
