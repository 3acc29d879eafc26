#include "merlin/family.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "merlin/error.hpp"
#include "merlin/quadrature.hpp"

namespace merlin {

namespace {

constexpr double kLogSqrt2Pi = 0.91893853320467274178;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double baseline_value(const FamilyInfo& f, const double* anc, double t, double* slope) {
  const std::size_t nc = f.baseline->columns();
  double v[16], d1[16];
  if (nc > 16) throw ValidationError("baseline spline has too many terms");
  f.baseline->eval(t, v, slope ? d1 : nullptr, nullptr);
  double s = 0, ds = 0;
  for (std::size_t j = 0; j < nc; ++j) {
    s += anc[j] * v[j];
    if (slope) ds += anc[j] * d1[j];
  }
  if (slope) *slope = ds;
  return s;
}

}  // namespace

void CallbackRegistry::add(const std::string& name, UserFunction fn) { fns_[name] = std::move(fn); }

const UserFunction& CallbackRegistry::get(const std::string& name) const {
  auto it = fns_.find(name);
  if (it == fns_.end()) throw ValidationError("no callback registered under the name '" + name + "'");
  return it->second;
}

FamilyInfo make_family(const FamilySpec& spec, std::optional<FrozenBasis> baseline,
                       const CallbackRegistry& callbacks) {
  FamilyInfo f;
  f.tag = spec.tag;
  switch (spec.tag) {
    case FamilyTag::gaussian:
    case FamilyTag::weibull:
    case FamilyTag::gompertz: f.n_anc = 1; break;
    case FamilyTag::rp:
    case FamilyTag::rcs:
      if (!baseline) throw ValidationError("rp/rcs family needs a baseline spline");
      f.n_anc = baseline->columns();
      f.baseline = std::move(baseline);
      break;
    case FamilyTag::user:
      f.n_anc = static_cast<std::size_t>(spec.nap);
      if (!spec.llfunction.empty()) f.llfunction = callbacks.get(spec.llfunction);
      if (!spec.hazard.empty()) f.hazard = callbacks.get(spec.hazard);
      if (!spec.chazard.empty()) f.chazard = callbacks.get(spec.chazard);
      break;
    default: break;
  }
  ModelSpec probe;
  probe.family = spec;
  f.survival = probe.survival();
  return f;
}

std::vector<std::string> ancillary_names(const FamilyInfo& f, std::size_t model) {
  switch (f.tag) {
    case FamilyTag::gaussian: return {"sd(resid.)"};
    case FamilyTag::weibull: return {"log(gamma)"};
    case FamilyTag::gompertz: return {"gamma"};
    case FamilyTag::rp:
    case FamilyTag::rcs: {
      std::vector<std::string> v;
      for (std::size_t k = 0; k < f.n_anc; ++k)
        v.push_back("_rcs" + std::to_string(model + 1) + "_" + std::to_string(k + 1));
      return v;
    }
    case FamilyTag::user: {
      std::vector<std::string> v;
      for (std::size_t k = 0; k < f.n_anc; ++k) v.push_back("ap:" + std::to_string(k + 1));
      return v;
    }
    default: return {};
  }
}

double log_density(FamilyTag tag, double y, double eta, const double* anc) {
  switch (tag) {
    case FamilyTag::gaussian: {
      double ls = anc[0];
      double r = (y - eta) * std::exp(-ls);
      return -kLogSqrt2Pi - ls - 0.5 * r * r;
    }
    case FamilyTag::bernoulli: {
      if (y != 0 && y != 1) throw ValidationError("bernoulli response must be 0 or 1");
      // y·eta - ln(1+e^eta), stable for large |eta|
      double l1p = eta > 0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta));
      return y * eta - l1p;
    }
    case FamilyTag::poisson: {
      if (y < 0 || y != std::floor(y)) throw ValidationError("poisson response must be a non-negative integer");
      return y * eta - std::exp(eta) - std::lgamma(y + 1);
    }
    default: throw ValidationError(std::string("log_density is not defined for family ") + to_string(tag));
  }
}

Jet inverse_link(FamilyTag tag, const Jet& e) {
  switch (tag) {
    case FamilyTag::bernoulli: {
      double s = e.v >= 0 ? 1 / (1 + std::exp(-e.v)) : std::exp(e.v) / (1 + std::exp(e.v));
      double g1 = s * (1 - s);
      double g2 = g1 * (1 - 2 * s);
      return {s, g1 * e.d1, g2 * e.d1 * e.d1 + g1 * e.d2};
    }
    case FamilyTag::poisson: {
      double m = std::exp(e.v);
      return {m, m * e.d1, m * (e.d1 * e.d1 + e.d2)};
    }
    default: return e;  // identity
  }
}

double log_hazard(const FamilyInfo& f, const double* anc, double t, const TimePredictor& eta) {
  if (!(t > 0)) return kNaN;
  switch (f.tag) {
    case FamilyTag::exponential: return eta.at(t, 0).v;
    case FamilyTag::weibull: {
      double g = std::exp(anc[0]);
      return eta.at(t, 0).v + anc[0] + (g - 1) * std::log(t);
    }
    case FamilyTag::gompertz: return eta.at(t, 0).v + anc[0] * t;
    case FamilyTag::rcs: return baseline_value(f, anc, t, nullptr) + eta.at(t, 0).v;
    case FamilyTag::rp: {
      double slope = 0;
      double s = baseline_value(f, anc, t, &slope);
      Jet e = eta.time_dependent() ? eta.at(t, 1) : eta.at(t, 0);
      double dlogH = slope + (eta.time_dependent() ? e.d1 : 0.0);
      if (!(dlogH > 0)) return kNegInf;
      return std::log(dlogH) + s + e.v;
    }
    case FamilyTag::user: {
      double h = eta.user_hazard(t);
      return h > 0 ? std::log(h) : (h == 0 ? kNegInf : kNaN);
    }
    default: throw ValidationError(std::string("family ") + to_string(f.tag) + " has no hazard");
  }
}

bool needs_integration(const FamilyInfo& f, const TimePredictor& eta) {
  switch (f.tag) {
    case FamilyTag::rp: return false;
    case FamilyTag::rcs: return true;
    case FamilyTag::user: return !f.chazard;
    default: return eta.time_dependent();
  }
}

double cum_hazard(const FamilyInfo& f, const double* anc, double t, const TimePredictor& eta,
                  const QuadratureRule& graded) {
  if (t == 0) return 0.0;
  if (!(t > 0)) return kNaN;
  if (needs_integration(f, eta)) {
    auto h = [&](double u) { return std::exp(log_hazard(f, anc, u, eta)); };
    double lo = 0, s = 0;
    // the rcs baseline has kinks in its second derivative at the knots, so
    // integrate knot to knot; Gauss-Legendre in ln u past the first knot,
    // where the log hazard is a cubic and a short rule suffices
    if (f.tag == FamilyTag::rcs && f.baseline) {
      const int m = std::max(8, static_cast<int>(graded.size()) / 3);
      thread_local std::map<int, QuadratureRule> legendre;
      auto it = legendre.find(m);
      if (it == legendre.end()) it = legendre.emplace(m, gauss_legendre(m, 0.0, 1.0)).first;
      const QuadratureRule& gl = it->second;
      for (double k : f.baseline->knots.all()) {
        double hi = f.baseline->knots.log ? std::exp(k) : k;
        if (!(hi > lo)) continue;
        if (hi >= t) break;
        double p = 0;
        if (lo == 0) {
          for (std::size_t i = 0; i < graded.size(); ++i) p += graded.weights[i] * h(hi * graded.nodes[i]);
          s += hi * p;
        } else {
          const double a = std::log(lo), w = std::log(hi) - a;
          for (std::size_t i = 0; i < gl.size(); ++i) {
            double u = std::exp(a + w * gl.nodes[i]);
            p += gl.weights[i] * u * h(u);
          }
          s += w * p;
        }
        lo = hi;
      }
      if (lo > 0) {
        const double a = std::log(lo), w = std::log(t) - a;
        double p = 0;
        for (std::size_t i = 0; i < gl.size(); ++i) {
          double u = std::exp(a + w * gl.nodes[i]);
          p += gl.weights[i] * u * h(u);
        }
        return s + w * p;
      }
    }
    for (std::size_t k = 0; k < graded.size(); ++k) s += graded.weights[k] * h(t * graded.nodes[k]);
    return t * s;
  }
  switch (f.tag) {
    case FamilyTag::exponential: return std::exp(eta.at(t, 0).v) * t;
    case FamilyTag::weibull: return std::exp(eta.at(t, 0).v + std::exp(anc[0]) * std::log(t));
    case FamilyTag::gompertz: {
      double g = anc[0];
      double base = std::abs(g) < 1e-8 ? t : std::expm1(g * t) / g;
      return std::exp(eta.at(t, 0).v) * base;
    }
    case FamilyTag::rp: return std::exp(baseline_value(f, anc, t, nullptr) + eta.at(t, 0).v);
    case FamilyTag::user: return eta.user_chazard(t);
    default: throw ValidationError(std::string("family ") + to_string(f.tag) + " has no cumulative hazard");
  }
}

double survival_loglik(const FamilyInfo& f, const double* anc, double t, double d,
                       std::optional<double> t0, const TimePredictor& eta, const QuadratureRule& graded) {
  double ll = 0;
  if (d != 0) {
    ll += d * log_hazard(f, anc, t, eta);
    if (f.tag == FamilyTag::rp) ll += d * std::log(t);
  }
  ll -= cum_hazard(f, anc, t, eta, graded);
  if (t0 && *t0 > 0) ll += cum_hazard(f, anc, *t0, eta, graded);
  return ll;
}

}  // namespace merlin
