#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "merlin/basis.hpp"
#include "merlin/formula.hpp"
#include "merlin/jet.hpp"
#include "merlin/quadrature.hpp"

namespace merlin {

/// What user callbacks can see for the current observation: responses,
/// predictors of any submodel (optionally at another time), their time
/// derivatives and integrals, and ancillary parameters.
class EvaluationContext {
 public:
  virtual ~EvaluationContext() = default;

  virtual std::size_t model() const = 0;  // 0-based
  virtual std::size_t row() const = 0;
  virtual double depvar_mod(std::size_t m) const = 0;
  virtual double event_mod(std::size_t m) const = 0;
  virtual double timevar() const = 0;
  /// Predictor quantity of submodel m; t defaults to the current time.
  virtual double predictor(std::size_t m, LinkKind what, std::optional<double> t) const = 0;
  virtual std::size_t nap() const = 0;
  /// 1-based ancillary parameter of the current model.
  virtual double ap(std::size_t k) const = 0;

  double depvar() const { return depvar_mod(model()); }
  double event() const { return event_mod(model()); }
  double xzb(std::optional<double> t = {}) const { return predictor(model(), LinkKind::xb, t); }
  double xzb_deriv(std::optional<double> t = {}) const { return predictor(model(), LinkKind::dxb, t); }
  double xzb_deriv2(std::optional<double> t = {}) const { return predictor(model(), LinkKind::d2xb, t); }
  double xzb_integ(std::optional<double> t = {}) const { return predictor(model(), LinkKind::ixb, t); }
  double expval(std::optional<double> t = {}) const { return predictor(model(), LinkKind::ev, t); }
  double expval_deriv(std::optional<double> t = {}) const { return predictor(model(), LinkKind::dev, t); }
  double expval_deriv2(std::optional<double> t = {}) const { return predictor(model(), LinkKind::d2ev, t); }
  double expval_integ(std::optional<double> t = {}) const { return predictor(model(), LinkKind::iev, t); }
  double xzb_mod(std::size_t m, std::optional<double> t = {}) const { return predictor(m, LinkKind::xb, t); }
  double expval_mod(std::size_t m, std::optional<double> t = {}) const { return predictor(m, LinkKind::ev, t); }
};

/// Log-likelihood contribution, hazard, cumulative hazard, or element value.
using UserFunction = std::function<double(const EvaluationContext&)>;

/// Named host callbacks referenced from model text: llfunction(), hazard(),
/// chazard() and mf().
class CallbackRegistry {
 public:
  void add(const std::string& name, UserFunction fn);
  const UserFunction& get(const std::string& name) const;
  bool has(const std::string& name) const { return fns_.count(name) != 0; }

 private:
  std::map<std::string, UserFunction> fns_;
};

struct FamilyInfo {
  FamilyTag tag = FamilyTag::gaussian;
  bool survival = false;
  std::size_t n_anc = 0;
  std::optional<FrozenBasis> baseline;  // rp / rcs baseline spline in t
  UserFunction llfunction;
  UserFunction hazard;
  UserFunction chazard;
};

/// Builds the family description; user callbacks are looked up by name.
FamilyInfo make_family(const FamilySpec& spec, std::optional<FrozenBasis> baseline,
                       const CallbackRegistry& callbacks);

/// Display names of the ancillary parameters (model is 0-based).
std::vector<std::string> ancillary_names(const FamilyInfo& f, std::size_t model);

/// gaussian (sd = exp(anc[0])), bernoulli (logit), poisson (log).
double log_density(FamilyTag tag, double y, double eta, const double* anc);

/// Inverse link applied to a predictor jet (chain rule for derivatives).
Jet inverse_link(FamilyTag tag, const Jet& eta);

/// The predictor of one observation as a function of time.
class TimePredictor {
 public:
  virtual ~TimePredictor() = default;
  virtual Jet at(double t, int order) const = 0;
  virtual bool time_dependent() const = 0;
  virtual double user_hazard(double) const { return kNaN; }
  virtual double user_chazard(double) const { return kNaN; }
};

double log_hazard(const FamilyInfo& f, const double* anc, double t, const TimePredictor& eta);
double cum_hazard(const FamilyInfo& f, const double* anc, double t, const TimePredictor& eta,
                  const QuadratureRule& graded);
/// True when cum_hazard integrates numerically.
bool needs_integration(const FamilyInfo& f, const TimePredictor& eta);

/// d·ln h(t) - H(t) + H(t0). The rp family is measured on the log-time
/// density scale and adds d·ln t.
double survival_loglik(const FamilyInfo& f, const double* anc, double t, double d,
                       std::optional<double> t0, const TimePredictor& eta, const QuadratureRule& graded);

}  // namespace merlin
