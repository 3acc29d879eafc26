#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include "merlin/data.hpp"
#include "merlin/design.hpp"
#include "merlin/estimate.hpp"
#include "merlin/formula.hpp"

namespace merlin::test {

inline std::filesystem::path data_dir() { return MERLIN_DATA_DIR; }

inline const Dataset& pbc() {
  static const Dataset d = load_csv(data_dir() / "pbc.csv");
  return d;
}

inline Design make_design(const std::string& text, const Dataset& d, const CallbackRegistry& callbacks = {}) {
  return build_design(validate(parse_spec(text), d), d, callbacks, 30);
}

inline std::size_t param_index(const Design& design, const std::string& name) {
  auto names = design.param_names();
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return i;
  throw std::runtime_error("no parameter " + name);
}

inline double rel_diff(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

inline FitOptions quiet() {
  FitOptions o;
  o.log = nullptr;
  return o;
}

inline double param(const EstimationResult& r, const std::string& name) {
  for (std::size_t i = 0; i < r.names.size(); ++i)
    if (r.names[i] == name) return r.theta(static_cast<Eigen::Index>(i));
  throw std::runtime_error("no parameter " + name);
}

inline double param_se(const EstimationResult& r, const std::string& name) {
  for (std::size_t i = 0; i < r.names.size(); ++i)
    if (r.names[i] == name) return std::sqrt(r.vcov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)));
  throw std::runtime_error("no parameter " + name);
}

// Weibull survival data with one binary covariate: h = λγt^(γ-1)exp(βx),
// administrative censoring at `tmax`.
inline Dataset weibull_data(std::size_t n, double lambda, double gamma, double beta, double tmax,
                            unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> t(n), d(n), x(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = u(rng) < 0.5 ? 1 : 0;
    double e = -std::log(u(rng));
    double ti = std::pow(e / (lambda * std::exp(beta * x[i])), 1 / gamma);
    d[i] = ti <= tmax;
    t[i] = std::min(ti, tmax);
  }
  Dataset ds(n);
  ds.add_column("t", t);
  ds.add_column("d", d);
  ds.add_column("x", x);
  return ds;
}

// PBC with the randomly derived columns of the worked examples, drawn from
// our own generator: entry times t0 ~ U(0, stime/2), a fair split of deaths
// into `cancer` and `other`, and catpro = prothrombin > 12.
inline Dataset augmented_pbc(unsigned seed) {
  Dataset d = pbc();
  const std::size_t n = d.n_rows();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> t0(n, 0), cancer(n, 0), other(n, 0), catpro(n, 0);
  std::vector<std::uint8_t> surv_na(n, 0), pro_na(n, 0);
  for (std::size_t r = 0; r < n; ++r) {
    if (d.is_missing("stime", r)) {
      surv_na[r] = 1;
    } else {
      t0[r] = u(rng) * d.column("stime")[r] * 0.5;
      bool died = d.column("died")[r] == 1;
      bool c = died && u(rng) < 0.5;
      cancer[r] = c;
      other[r] = died && !c;
    }
    if (d.is_missing("prothrombin", r)) pro_na[r] = 1;
    else catpro[r] = d.column("prothrombin")[r] > 12;
  }
  d.add_column("t0", t0, surv_na);
  d.add_column("cancer", cancer, surv_na);
  d.add_column("other", other, surv_na);
  d.add_column("catpro", catpro, pro_na);
  return d;
}

inline void write_csv(const Dataset& d, const std::filesystem::path& path) {
  std::ofstream f(path);
  const auto& names = d.names();
  for (std::size_t c = 0; c < names.size(); ++c) f << (c ? "," : "") << names[c];
  f << "\n";
  char buf[32];
  for (std::size_t r = 0; r < d.n_rows(); ++r) {
    for (std::size_t c = 0; c < names.size(); ++c) {
      if (c) f << ",";
      if (d.is_missing(c, r)) continue;
      std::snprintf(buf, sizeof buf, "%.17g", d.column(c)[r]);
      f << buf;
    }
    f << "\n";
  }
}

}  // namespace merlin::test
