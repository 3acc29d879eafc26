#include "merlin/estimate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <json.hpp>

#include "merlin/error.hpp"
#include "merlin/likelihood.hpp"

namespace merlin {

namespace {

using json = nlohmann::json;

int env_gh_nodes() {
  if (const char* s = std::getenv("MERLIN_GH_NODES")) {
    int n = std::atoi(s);
    if (n > 0) return n;
  }
  return 7;
}

std::vector<std::string> schema_columns(const ModelGraph& g) {
  std::set<std::string> vars;
  for (const auto& m : g.models)
    for (auto& v : referenced_variables(m, false)) vars.insert(v);
  return {vars.begin(), vars.end()};
}

struct Moments {
  double mean = 0, sd = 0;
};

Moments moments(const std::vector<double>& x) {
  Moments r;
  if (x.empty()) return r;
  for (double v : x) r.mean += v;
  r.mean /= x.size();
  double ss = 0;
  for (double v : x) ss += (v - r.mean) * (v - r.mean);
  r.sd = x.size() > 1 ? std::sqrt(ss / (x.size() - 1)) : 0;
  return r;
}

}  // namespace

Eigen::VectorXd starting_values(const Design& design, double loading) {
  const Dataset& d = *design.data;
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(design.n_params());
  for (std::size_t i = 0; i < design.params.size(); ++i)
    if (design.params[i].kind == ParamKind::coefficient && design.params[i].in_effect_component) theta(i) = loading;

  for (const ModelDesign& md : design.models) {
    const FamilyTag tag = md.family.tag;
    std::vector<double> y;
    if (md.response != npos)
      for (std::size_t r : md.rows) y.push_back(d.column(md.response)[r]);
    double cons = 0;
    switch (tag) {
      case FamilyTag::gaussian: {
        Moments m = moments(y);
        cons = m.mean;
        theta(md.anc_first) = std::log(m.sd > 0 ? m.sd : 1.0);
        break;
      }
      case FamilyTag::bernoulli: {
        double p = std::clamp(moments(y).mean, 1e-3, 1 - 1e-3);
        cons = std::log(p / (1 - p));
        break;
      }
      case FamilyTag::poisson: cons = std::log(std::max(moments(y).mean, 1e-3)); break;
      case FamilyTag::exponential:
      case FamilyTag::weibull:
      case FamilyTag::gompertz:
      case FamilyTag::rp:
      case FamilyTag::rcs: {
        double events = 0, exposure = 0;
        std::vector<double> lt;
        for (std::size_t i = 0; i < md.rows.size(); ++i) {
          std::size_t r = md.rows[i];
          events += md.failure != npos ? d.column(md.failure)[r] : 1.0;
          exposure += y[i] - (md.ltruncated != npos ? d.column(md.ltruncated)[r] : 0.0);
          lt.push_back(std::log(y[i]));
        }
        double lambda = std::log(std::max(events, 1.0) / std::max(exposure, 1e-300));
        cons = lambda;
        if (tag == FamilyTag::rp) {
          // H(t) = λt: ln H = ln λ + ln t, and the first orthonormal column is
          // the standardized ln t
          Moments m = moments(lt);
          double sd_pop = m.sd * std::sqrt(lt.size() > 1 ? (lt.size() - 1.0) / lt.size() : 1.0);
          theta(md.anc_first) = sd_pop;
          cons = lambda + m.mean;
        }
        break;
      }
      default: break;
    }
    if (md.cons_param) theta(*md.cons_param) = cons;
  }
  return theta;
}

FitOutput fit(const std::string& model_text, const Dataset& d, const FitOptions& opt) {
  return fit(parse_spec(model_text), d, opt);
}

FitOutput fit(const ModelGraph& graph, const Dataset& d, const FitOptions& opt) {
  ValidatedGraph vg = validate(graph, d);
  const GlobalOptions& go = vg.graph.options;
  const int gh = opt.gh_nodes ? *opt.gh_nodes : (go.intpoints ? *go.intpoints : env_gh_nodes());
  const bool adaptive = opt.adaptive ? *opt.adaptive : go.adaptive.value_or(true);
  const int gl = opt.gl_nodes ? *opt.gl_nodes : go.chintpoints.value_or(30);
  if (gh < 1 || gl < 1) throw ValidationError("quadrature node counts must be positive");
  const bool nolog = opt.nolog || go.nolog;

  FitOutput out{build_design(vg, d, opt.callbacks, gl), {}};
  const Design& design = out.design;
  Likelihood lik(design, {gh, adaptive, std::max(1, opt.threads)});
  const std::size_t np = design.n_params();

  Eigen::VectorXd theta = starting_values(design, 0.5);
  lik.check_finite(theta);

  std::ostream* log = opt.log;
  OptimizeOptions oo;
  oo.kind = opt.optimizer;
  oo.max_iter = opt.max_iter;

  if (lik.has_effects()) {
    if (log) *log << "Fitting fixed effects model:\n\n" << std::flush;
    // Links to models that carry random effects are held at zero too: with
    // the effects removed they are close to collinear with the baseline.
    std::vector<bool> held(np, false);
    for (const ModelDesign& md : design.models)
      for (const ComponentDesign& c : md.components) {
        if (c.constraint) continue;
        bool linked = false;
        for (const ElementDesign& e : c.elements) {
          if (e.kind != ElementKind::link) continue;
          const auto& dep = design.models[e.target].level_dep;
          linked = linked || std::find(dep.begin(), dep.end(), true) != dep.end();
        }
        if (linked)
          for (std::size_t j = 0; j < c.ncols; ++j) held[c.first_param + j] = true;
      }
    std::vector<std::size_t> free;
    for (std::size_t i = 0; i < np; ++i) {
      const auto& p = design.params[i];
      if (p.kind == ParamKind::log_sd || p.kind == ParamKind::correlation || p.in_effect_component || held[i])
        continue;
      free.push_back(i);
    }
    Eigen::VectorXd base = theta;
    auto expand = [&](const Eigen::VectorXd& sub) {
      Eigen::VectorXd full = base;
      for (std::size_t k = 0; k < free.size(); ++k) full(free[k]) = sub(k);
      return full;
    };
    Eigen::VectorXd sub(free.size());
    for (std::size_t k = 0; k < free.size(); ++k) sub(k) = theta(free[k]);
    OptimizeOptions o1 = oo;
    o1.polish_steps = 0;
    OptimizeResult r1 = maximize([&](const Eigen::VectorXd& s) { return lik.fixed_only(expand(s)); }, sub, o1);
    theta = expand(r1.x);
  }

  if (log) *log << "Fitting full model:\n\n" << std::flush;
  Objective objective;
  const bool adapting = lik.has_effects() && adaptive;
  if (adapting && opt.readapt == Readapt::every_eval) {
    objective = [&](const Eigen::VectorXd& x) {
      lik.adapt(x);
      return lik.total(x);
    };
  } else {
    objective = [&](const Eigen::VectorXd& x) { return lik.total(x); };
    if (adapting)
      oo.before_iteration = [&](const Eigen::VectorXd& x) {
        lik.adapt(x);
        return true;
      };
  }
  oo.log = nolog ? nullptr : log;
  oo.polish_steps = 2;
  OptimizeResult r = maximize(objective, theta, oo);
  if (log && !nolog) *log << "\n" << std::flush;

  EstimationResult& res = out.result;
  theta = r.x;
  if (adapting) lik.adapt(theta);
  res.loglik = lik.total(theta);
  res.theta = theta;
  res.names = design.param_names();
  res.converged = r.converged;
  res.iterations = r.iterations;
  res.gradient_norm = r.gradient.size() ? r.gradient.cwiseAbs().maxCoeff() : 0.0;

  res.vcov = Eigen::MatrixXd::Constant(np, np, std::numeric_limits<double>::quiet_NaN());
  if (np > 0) {
    Eigen::MatrixXd H = numerical_hessian([&](const Eigen::VectorXd& x) { return lik.total(x); }, theta);
    Eigen::LLT<Eigen::MatrixXd> llt(-H);
    if (H.allFinite() && llt.info() == Eigen::Success) {
      Eigen::MatrixXd v = llt.solve(Eigen::MatrixXd::Identity(np, np));
      res.vcov = 0.5 * (v + v.transpose());
      res.vcov_ok = res.vcov.allFinite();
    }
  } else {
    res.vcov_ok = true;
  }

  std::set<std::size_t> obs;
  for (const auto& rows : vg.rows) obs.insert(rows.begin(), rows.end());
  res.n_obs = obs.size();
  res.model_text = render(vg.graph);
  res.gh_nodes = gh;
  res.adaptive = adaptive;
  res.gl_nodes = gl;
  res.bases = frozen_bases(design);
  res.schema = schema_columns(vg.graph);
  res.fingerprint = schema_fingerprint(d, res.schema);
  return out;
}

Design rebuild_design(const EstimationResult& res, const Dataset& d, const CallbackRegistry& callbacks) {
  for (const auto& v : res.schema)
    if (!d.has_column(v)) throw ValidationError("data has no column '" + v + "' used by the model");
  ValidatedGraph vg;
  // estimation rows when the data carries the responses, none otherwise
  // (prediction data need not have outcomes)
  try {
    vg = validate(parse_spec(res.model_text), d);
  } catch (const ValidationError&) {
    vg = ValidatedGraph{};
    vg.graph = parse_spec(res.model_text);
    resolve_links(vg.graph);
    vg.rows.assign(vg.graph.models.size(), RowSet{});
  }
  Design design = build_design(vg, d, callbacks, res.gl_nodes, &res.bases);
  if (design.n_params() != static_cast<std::size_t>(res.theta.size()))
    throw FormatError("stored parameter vector does not match the model");
  return design;
}

std::uint64_t schema_fingerprint(const Dataset& d, const std::vector<std::string>& columns) {
  std::uint64_t h = 14695981039346656037ull;
  auto feed = [&](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
    h ^= 0xff;
    h *= 1099511628211ull;
  };
  for (const auto& c : columns) {
    feed(c);
    if (d.has_column(c))
      for (const auto& label : d.categories(c)) feed(label);
  }
  return h;
}

namespace {

json number(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double to_number(const json& j) {
  if (j.is_null()) return std::numeric_limits<double>::quiet_NaN();
  return j.get<double>();
}

json basis_to_json(const std::optional<FrozenBasis>& b) {
  if (!b) return nullptr;
  json j;
  j["kind"] = b->kind == BasisKind::rcs ? "rcs" : b->kind == BasisKind::bs ? "bs" : "fp";
  j["knots"] = {{"interior", b->knots.interior},
                {"lower", b->knots.lower},
                {"upper", b->knots.upper},
                {"log", b->knots.log}};
  j["intercept"] = b->intercept;
  j["powers"] = b->powers;
  if (b->transform) {
    json m = json::array();
    for (Eigen::Index r = 0; r < b->transform->m.rows(); ++r) {
      json row = json::array();
      for (Eigen::Index c = 0; c < b->transform->m.cols(); ++c) row.push_back(b->transform->m(r, c));
      m.push_back(row);
    }
    j["transform"] = m;
  } else {
    j["transform"] = nullptr;
  }
  return j;
}

std::optional<FrozenBasis> basis_from_json(const json& j) {
  if (j.is_null()) return std::nullopt;
  FrozenBasis b;
  std::string kind = j.at("kind").get<std::string>();
  if (kind == "rcs") b.kind = BasisKind::rcs;
  else if (kind == "bs") b.kind = BasisKind::bs;
  else if (kind == "fp") b.kind = BasisKind::fp;
  else throw FormatError("unknown basis kind '" + kind + "'");
  const json& k = j.at("knots");
  b.knots.interior = k.at("interior").get<std::vector<double>>();
  b.knots.lower = k.at("lower").get<double>();
  b.knots.upper = k.at("upper").get<double>();
  b.knots.log = k.at("log").get<bool>();
  b.intercept = j.at("intercept").get<bool>();
  b.powers = j.at("powers").get<std::vector<double>>();
  const json& t = j.at("transform");
  if (!t.is_null()) {
    BasisTransform tr;
    tr.m.resize(t.size(), t.empty() ? 0 : t[0].size());
    for (std::size_t r = 0; r < t.size(); ++r)
      for (std::size_t c = 0; c < t[r].size(); ++c) tr.m(r, c) = t[r][c].get<double>();
    b.transform = tr;
  }
  return b;
}

}  // namespace

std::string to_json(const EstimationResult& res) {
  json j;
  j["format"] = "merlin-result";
  j["version"] = EstimationResult::kSchemaVersion;
  j["model"] = res.model_text;
  j["names"] = res.names;
  json theta = json::array();
  for (Eigen::Index i = 0; i < res.theta.size(); ++i) theta.push_back(number(res.theta(i)));
  j["theta"] = theta;
  json vcov = json::array();
  for (Eigen::Index r = 0; r < res.vcov.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < res.vcov.cols(); ++c) row.push_back(number(res.vcov(r, c)));
    vcov.push_back(row);
  }
  j["vcov"] = vcov;
  j["vcov_ok"] = res.vcov_ok;
  j["loglik"] = number(res.loglik);
  j["converged"] = res.converged;
  j["iterations"] = res.iterations;
  j["gradient_norm"] = number(res.gradient_norm);
  j["n_obs"] = res.n_obs;
  j["integration"] = {{"gh_nodes", res.gh_nodes}, {"adaptive", res.adaptive}, {"gl_nodes", res.gl_nodes}};
  json bases = json::array();
  for (const auto& fm : res.bases) {
    json comps = json::array();
    for (const auto& c : fm.elements) {
      json els = json::array();
      for (const auto& e : c) els.push_back(basis_to_json(e));
      comps.push_back(els);
    }
    bases.push_back({{"components", comps}, {"baseline", basis_to_json(fm.baseline)}});
  }
  j["bases"] = bases;
  char fp[17];
  std::snprintf(fp, sizeof fp, "%016llx", static_cast<unsigned long long>(res.fingerprint));
  j["schema"] = {{"columns", res.schema}, {"fingerprint", fp}};
  return j.dump(1);
}

EstimationResult from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("corrupt result file: ") + e.what());
  }
  try {
    if (!j.is_object() || j.value("format", "") != "merlin-result")
      throw FormatError("not a merlin result file");
    int version = j.at("version").get<int>();
    if (version != EstimationResult::kSchemaVersion)
      throw FormatError("unsupported result file version " + std::to_string(version) + " (expected " +
                        std::to_string(EstimationResult::kSchemaVersion) + ")");
    EstimationResult res;
    res.model_text = j.at("model").get<std::string>();
    res.names = j.at("names").get<std::vector<std::string>>();
    const json& theta = j.at("theta");
    res.theta.resize(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) res.theta(i) = to_number(theta[i]);
    const json& vcov = j.at("vcov");
    res.vcov.resize(vcov.size(), vcov.size());
    for (std::size_t r = 0; r < vcov.size(); ++r) {
      if (vcov[r].size() != vcov.size()) throw FormatError("corrupt result file: vcov is not square");
      for (std::size_t c = 0; c < vcov.size(); ++c) res.vcov(r, c) = to_number(vcov[r][c]);
    }
    if (res.names.size() != theta.size() || vcov.size() != theta.size())
      throw FormatError("corrupt result file: parameter dimensions disagree");
    res.vcov_ok = j.at("vcov_ok").get<bool>();
    res.loglik = to_number(j.at("loglik"));
    res.converged = j.at("converged").get<bool>();
    res.iterations = j.at("iterations").get<int>();
    res.gradient_norm = to_number(j.at("gradient_norm"));
    res.n_obs = j.at("n_obs").get<std::size_t>();
    const json& integ = j.at("integration");
    res.gh_nodes = integ.at("gh_nodes").get<int>();
    res.adaptive = integ.at("adaptive").get<bool>();
    res.gl_nodes = integ.at("gl_nodes").get<int>();
    for (const json& fm : j.at("bases")) {
      FrozenModel m;
      for (const json& c : fm.at("components")) {
        std::vector<std::optional<FrozenBasis>> els;
        for (const json& e : c) els.push_back(basis_from_json(e));
        m.elements.push_back(std::move(els));
      }
      m.baseline = basis_from_json(fm.at("baseline"));
      res.bases.push_back(std::move(m));
    }
    const json& schema = j.at("schema");
    res.schema = schema.at("columns").get<std::vector<std::string>>();
    res.fingerprint = std::stoull(schema.at("fingerprint").get<std::string>(), nullptr, 16);
    return res;
  } catch (const json::exception& e) {
    throw FormatError(std::string("corrupt result file: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw FormatError("corrupt result file: bad fingerprint");
  }
}

void save_result(const EstimationResult& res, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  f << to_json(res) << "\n";
  if (!f) throw DataError("failed writing " + path.string());
}

EstimationResult load_result(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return from_json(ss.str());
}

}  // namespace merlin
