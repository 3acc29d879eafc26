#include "merlin/report.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>

#include "merlin/likelihood.hpp"

namespace merlin {

namespace {

TableRow plain_row(const std::string& label, double coef, double se) {
  TableRow r;
  r.label = label;
  r.coef = coef;
  r.se = se;
  r.z = coef / se;
  r.p = normal_p_value(r.z);
  r.lo = coef - kZ975 * se;
  r.hi = coef + kZ975 * se;
  return r;
}

double param_se(const EstimationResult& res, std::size_t i) {
  if (!res.vcov_ok) return kNaN;
  double v = res.vcov(i, i);
  return v >= 0 ? std::sqrt(v) : kNaN;
}

TableRow correlation_row(const Design& design, const EstimationResult& res, const ParameterInfo& p, std::size_t i) {
  const LevelDesign& level = design.levels[p.level];
  Eigen::VectorXd theta = res.theta;
  auto corr = [&](const Eigen::VectorXd& x) { return level_correlation(level, x.data())(p.row_i, p.row_j); };
  double r = corr(theta);
  // gradient over this level's correlation parameters
  const std::size_t first = level.first_param + level.q();
  const std::size_t count = level.n_params() - level.q();
  Eigen::VectorXd g = Eigen::VectorXd::Zero(theta.size());
  for (std::size_t k = first; k < first + count; ++k) {
    double h = 1e-6 * std::max(1.0, std::abs(theta(k)));
    Eigen::VectorXd a = theta, b = theta;
    a(k) += h;
    b(k) -= h;
    g(k) = (corr(a) - corr(b)) / (2 * h);
  }
  TableRow row;
  row.label = p.label;
  row.coef = r;
  row.transformed = true;
  row.param = i;
  row.z = row.p = kNaN;
  if (res.vcov_ok) {
    double var = g.dot(res.vcov * g);
    row.se = var >= 0 ? std::sqrt(var) : kNaN;
  } else {
    row.se = kNaN;
  }
  double a = std::atanh(r), s = row.se / (1 - r * r);
  row.lo = std::tanh(a - kZ975 * s);
  row.hi = std::tanh(a + kZ975 * s);
  return row;
}

}  // namespace

double normal_p_value(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

std::vector<TablePanel> standard_errors(const Design& design, const EstimationResult& res) {
  std::vector<TablePanel> panels;
  auto panel = [&](const std::string& title) -> TablePanel& {
    if (panels.empty() || panels.back().title != title) panels.push_back({title, {}});
    return panels.back();
  };
  std::size_t next_constrained = 0;
  auto flush_constrained = [&](std::size_t before, std::optional<std::size_t> model) {
    while (next_constrained < design.constrained.size() &&
           design.constrained[next_constrained].before_param <= before &&
           (!model || design.constrained[next_constrained].model <= *model)) {
      const ConstrainedRow& c = design.constrained[next_constrained++];
      const ModelDesign& md = design.models[c.model];
      TableRow row;
      row.label = c.label;
      row.coef = c.value;
      row.se = row.z = row.p = row.lo = row.hi = kNaN;
      row.constrained = true;
      panel(md.spec.response.empty() ? "model" + std::to_string(c.model + 1) : md.spec.response).rows.push_back(row);
    }
  };
  for (std::size_t i = 0; i < design.params.size(); ++i) {
    const ParameterInfo& p = design.params[i];
    flush_constrained(i, p.model == npos ? std::optional<std::size_t>() : std::optional<std::size_t>(p.model));
    if (p.hidden) continue;
    double se = param_se(res, i);
    TableRow row;
    if (p.kind == ParamKind::correlation) {
      row = correlation_row(design, res, p, i);
    } else if (p.exp_display) {
      row.label = p.label;
      row.coef = std::exp(res.theta(i));
      row.se = row.coef * se;
      row.z = row.p = kNaN;
      row.lo = std::exp(res.theta(i) - kZ975 * se);
      row.hi = std::exp(res.theta(i) + kZ975 * se);
      row.transformed = true;
    } else {
      row = plain_row(p.label, res.theta(i), se);
    }
    row.param = i;
    panel(p.panel).rows.push_back(row);
  }
  flush_constrained(design.params.size(), std::nullopt);
  return panels;
}

std::string format_number(double v) {
  if (std::isnan(v)) return ".";
  char buf[32];
  const double a = std::abs(v);
  if (a >= 1 || a == 0) {
    std::snprintf(buf, sizeof buf, "%.7g", v);
  } else if (a >= 1e-5) {
    // at most 7 decimals, trailing zeros dropped
    std::snprintf(buf, sizeof buf, "%.7f", v);
    char* end = buf + std::strlen(buf);
    while (end > buf && end[-1] == '0') *--end = '\0';
  } else {
    std::snprintf(buf, sizeof buf, "%.2e", v);
  }
  std::string s = buf;
  if (s.rfind("0.", 0) == 0) s.erase(0, 1);
  else if (s.rfind("-0.", 0) == 0) s.erase(1, 1);
  return s;
}

std::string format_count(std::size_t n) {
  std::string s = std::to_string(n);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

void print_table(std::ostream& os, const std::vector<TablePanel>& panels, const EstimationResult& res) {
  const std::string rule(78, '-');
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-48sNumber of obs     = %10s\n", "Mixed effects regression model",
                format_count(res.n_obs).c_str());
  os << buf;
  std::snprintf(buf, sizeof buf, "Log likelihood = %.8g\n", res.loglik);
  os << buf << rule << "\n";
  os << "             |      Coef.   Std. Err.      z    P>|z|     [95% Conf. Interval]\n";
  os << "-------------+----------------------------------------------------------------\n";
  for (std::size_t k = 0; k < panels.size(); ++k) {
    if (k) os << "-------------+----------------------------------------------------------------\n";
    std::snprintf(buf, sizeof buf, "%-13s|\n", (panels[k].title + ":").c_str());
    os << buf;
    for (const TableRow& r : panels[k].rows) {
      std::string z = ".", p = ".";
      if (!r.transformed && !r.constrained && std::isfinite(r.z)) {
        char t[32];
        std::snprintf(t, sizeof t, "%.2f", r.z);
        z = t;
        std::snprintf(t, sizeof t, "%.3f", r.p);
        p = t;
      }
      if (r.transformed) {
        std::snprintf(buf, sizeof buf, "%12s | %10s %10s %16s %12s %11s\n", r.label.c_str(),
                      format_number(r.coef).c_str(), format_number(r.se).c_str(), "",
                      format_number(r.lo).c_str(), format_number(r.hi).c_str());
      } else {
        std::snprintf(buf, sizeof buf, "%12s | %10s %10s %8s %7s %12s %11s\n", r.label.c_str(),
                      format_number(r.coef).c_str(), format_number(r.se).c_str(), z.c_str(), p.c_str(),
                      format_number(r.lo).c_str(), format_number(r.hi).c_str());
      }
      os << buf;
    }
  }
  os << rule << "\n";
  if (!res.vcov_ok) os << "Warning: Hessian not negative definite; standard errors are missing.\n";
  if (!res.converged) os << "Warning: convergence not achieved.\n";
}

}  // namespace merlin
