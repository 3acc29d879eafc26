#include "merlin/likelihood.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <unordered_map>

#include "merlin/error.hpp"
#include "merlin/parallel.hpp"

namespace merlin {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr std::size_t kMaxCols = 64;
constexpr std::size_t kMaxTimeElements = 4;
constexpr std::size_t kMaxEffects = 16;

double log_sum_exp(const std::vector<double>& a) {
  double mx = kNegInf;
  for (double x : a) {
    if (std::isnan(x)) return kNaN;
    mx = std::max(mx, x);
  }
  if (mx == kNegInf) return kNegInf;
  if (std::isinf(mx)) return mx;
  double s = 0;
  for (double x : a) s += std::exp(x - mx);
  return mx + std::log(s);
}

// Gives callbacks access to the current observation.
class RowContext final : public EvaluationContext {
 public:
  RowContext(const Evaluator& ev, std::size_t m, std::size_t row, const Effects& b, double t)
      : ev_(ev), m_(m), row_(row), b_(b), t_(t) {}

  std::size_t model() const override { return m_; }
  std::size_t row() const override { return row_; }
  double depvar_mod(std::size_t m) const override {
    const auto& md = model_at(m);
    return md.response == npos ? kNaN : ev_.design().data->column(md.response)[row_];
  }
  double event_mod(std::size_t m) const override {
    const auto& md = model_at(m);
    if (md.failure != npos) return ev_.design().data->column(md.failure)[row_];
    return md.family.survival ? 1.0 : kNaN;
  }
  double timevar() const override { return t_; }
  double predictor(std::size_t m, LinkKind what, std::optional<double> t) const override {
    model_at(m);
    double tt = t ? *t : t_;
    return ev_.quantity(m, row_, b_, std::isnan(tt) ? nullptr : &tt, what);
  }
  std::size_t nap() const override { return ev_.design().models[m_].family.n_anc; }
  double ap(std::size_t k) const override {
    if (k < 1 || k > nap())
      throw ValidationError("ancillary parameter " + std::to_string(k) + " requested, model has " +
                            std::to_string(nap()));
    return ev_.anc(m_)[k - 1];
  }

 private:
  const ModelDesign& model_at(std::size_t m) const {
    if (m >= ev_.design().models.size())
      throw ValidationError("callback referenced model " + std::to_string(m + 1) + ", which does not exist");
    return ev_.design().models[m];
  }

  const Evaluator& ev_;
  std::size_t m_, row_;
  const Effects& b_;
  double t_;
};

class RowPredictor final : public TimePredictor {
 public:
  RowPredictor(const Evaluator& ev, std::size_t m, std::size_t row, const Effects& b)
      : ev_(ev), m_(m), row_(row), b_(b) {}

  Jet at(double t, int order) const override { return ev_.eta(m_, row_, b_, &t, order); }
  bool time_dependent() const override { return ev_.design().models[m_].time_dependent; }
  double user_hazard(double t) const override {
    RowContext ctx(ev_, m_, row_, b_, t);
    return ev_.design().models[m_].family.hazard(ctx);
  }
  double user_chazard(double t) const override {
    RowContext ctx(ev_, m_, row_, b_, t);
    return ev_.design().models[m_].family.chazard(ctx);
  }

 private:
  const Evaluator& ev_;
  std::size_t m_, row_;
  const Effects& b_;
};

}  // namespace

Eigen::MatrixXd level_correlation(const LevelDesign& level, const double* theta) {
  const std::size_t q = level.q();
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(q, q);
  if (q == 0) return w;
  w(0, 0) = 1;
  std::size_t p = level.first_param + q;
  for (std::size_t i = 1; i < q; ++i) {
    double used = 0;
    for (std::size_t j = 0; j < i; ++j) {
      double r = level.unstructured ? std::tanh(theta[p++]) : 0.0;
      w(i, j) = r * std::sqrt(std::max(0.0, 1 - used));
      used += w(i, j) * w(i, j);
    }
    w(i, i) = std::sqrt(std::max(0.0, 1 - used));
  }
  return w * w.transpose();
}

Eigen::MatrixXd level_cholesky(const LevelDesign& level, const double* theta) {
  const std::size_t q = level.q();
  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(q, q);
  if (!level.unstructured) {
    for (std::size_t i = 0; i < q; ++i) l(i, i) = std::exp(theta[level.first_param + i]);
    return l;
  }
  std::size_t p = level.first_param + q;
  for (std::size_t i = 0; i < q; ++i) {
    double sd = std::exp(theta[level.first_param + i]);
    double used = 0;
    for (std::size_t j = 0; j < i; ++j) {
      double w = std::tanh(theta[p++]) * std::sqrt(std::max(0.0, 1 - used));
      used += w * w;
      l(i, j) = sd * w;
    }
    l(i, i) = sd * std::sqrt(std::max(0.0, 1 - used));
  }
  return l;
}

Evaluator::Evaluator(const Design& design, const Eigen::VectorXd& theta) : design_(&design), theta_(theta) {
  if (static_cast<std::size_t>(theta.size()) != design.n_params())
    throw ValidationError("parameter vector has " + std::to_string(theta.size()) + " entries, expected " +
                          std::to_string(design.n_params()));
  for (const auto& l : design.levels) {
    if (l.q() > kMaxEffects) throw ValidationError("too many random effects at one level");
    chol_.push_back(level_cholesky(l, theta.data()));
  }
}

Jet Evaluator::element_jet(std::size_t m, const ElementDesign& e, std::size_t row, const Effects& b,
                           const double* t, double t_row, int order) const {
  switch (e.kind) {
    case ElementKind::random_effect:
      return constant_jet(b.b[e.level] ? b.b[e.level][e.effect] : 0.0);
    case ElementKind::link: {
      const bool ev = link_uses_expected_value(e.link);
      auto f = [&](const double* tp, int k) {
        return ev ? mean(e.target, row, b, tp, k) : eta(e.target, row, b, tp, k);
      };
      switch (link_derivative_order(e.link)) {
        case 0: return f(t, order);
        case 1: {
          Jet j = f(t, std::min(order + 1, 2));
          return {j.d1, order >= 1 ? j.d2 : kNaN, kNaN};
        }
        case 2: {
          Jet j = f(t, 2);
          return {j.d2, kNaN, kNaN};
        }
        default: {
          double tx = t ? *t : t_row;
          double i = integral(e.target, row, b, tx, ev);
          if (order == 0) return constant_jet(i);
          Jet j = f(&tx, order - 1);
          return {i, j.v, j.d1};
        }
      }
    }
    case ElementKind::user: {
      double tx = t ? *t : t_row;
      auto at = [&](double u) {
        RowContext ctx(*this, m, row, b, u);
        return e.callback(ctx);
      };
      Jet j = constant_jet(at(tx));
      if (order > 0) {
        if (std::isnan(tx)) return {j.v, kNaN, kNaN};
        double h = 1e-4 * std::max(1.0, std::abs(tx));
        double fp = at(tx + h), fm = at(tx - h);
        j.d1 = (fp - fm) / (2 * h);
        j.d2 = order >= 2 ? (fp - 2 * j.v + fm) / (h * h) : kNaN;
      }
      return j;
    }
    default: return constant_jet(kNaN);
  }
}

Jet Evaluator::eta(std::size_t m, std::size_t row, const Effects& b, const double* t, int order) const {
  const ModelDesign& md = design_->models[m];
  const Dataset& d = *design_->data;
  const bool dynamic = md.time_dependent && (t || order > 0);
  const double t_row = md.timevar != npos ? d.column(md.timevar)[row] : kNaN;
  const double tt = t ? *t : t_row;
  // time handed on to linked models
  const double* t_link = (t || order > 0) && !std::isnan(tt) ? &tt : nullptr;
  const double* th = theta_.data();

  Jet total{0, 0, 0};
  if (md.cons_param) total.v += th[*md.cons_param];

  struct TimeValues {
    std::size_t element;
    double v[kMaxCols], d1[kMaxCols], d2[kMaxCols];
  };
  TimeValues tv[kMaxTimeElements];

  for (const ComponentDesign& c : md.components) {
    auto coef = [&](std::size_t j) { return c.constraint ? *c.constraint : th[c.first_param + j]; };
    Jet sum{0, 0, 0};
    if (!dynamic || !c.has_time_data) {
      const double* s = c.static_cols.row(row).data();
      for (std::size_t j = 0; j < c.ncols; ++j) sum.v += coef(j) * s[j];
    } else {
      std::size_t nt = 0;
      for (std::size_t e = 0; e < c.elements.size(); ++e) {
        const ElementDesign& el = c.elements[e];
        if (!el.is_data() || !el.time) continue;
        if (nt == kMaxTimeElements) throw ValidationError("too many time-varying elements in one component");
        TimeValues& out = tv[nt++];
        out.element = e;
        double x = tt + (el.offset != npos ? d.column(el.offset)[row] : 0.0);
        if (el.basis) {
          std::fill(out.d1, out.d1 + el.ncols, 0.0);
          std::fill(out.d2, out.d2 + el.ncols, 0.0);
          try {
            el.basis->eval(x, out.v, order >= 1 ? out.d1 : nullptr, order >= 2 ? out.d2 : nullptr);
          } catch (const Error&) {
            std::fill(out.v, out.v + el.ncols, kNaN);
          }
        } else {
          out.v[0] = x;
          out.d1[0] = 1;
          out.d2[0] = 0;
        }
      }
      const double* fixed = c.fixed_cols.row(row).data();
      for (std::size_t j = 0; j < c.ncols; ++j) {
        Jet p = constant_jet(fixed[j]);
        for (std::size_t k = 0; k < nt; ++k) {
          std::size_t e = tv[k].element;
          std::size_t idx = (j / c.stride[e]) % c.elements[e].ncols;
          p = p * Jet{tv[k].v[idx], tv[k].d1[idx], tv[k].d2[idx]};
        }
        sum += coef(j) * p;
      }
    }
    if (c.has_scalar) {
      Jet s = constant_jet(1.0);
      for (const ElementDesign& el : c.elements)
        if (!el.is_data()) s = s * element_jet(m, el, row, b, t_link, t_row, order);
      sum = sum * s;
    }
    total += sum;
  }
  if (!md.time_dependent) {
    total.d1 = 0;
    total.d2 = 0;
  } else {
    if (order < 1) total.d1 = kNaN;
    if (order < 2) total.d2 = kNaN;
  }
  return total;
}

Jet Evaluator::mean(std::size_t m, std::size_t row, const Effects& b, const double* t, int order) const {
  return inverse_link(design_->models[m].family.tag, eta(m, row, b, t, order));
}

double Evaluator::integral(std::size_t m, std::size_t row, const Effects& b, double t, bool expected) const {
  if (t == 0) return 0.0;
  if (!(t > 0)) return kNaN;
  const QuadratureRule& r = design_->time_rule;
  double s = 0;
  for (std::size_t k = 0; k < r.size(); ++k) {
    double u = t * r.nodes[k];
    s += r.weights[k] * (expected ? mean(m, row, b, &u, 0).v : eta(m, row, b, &u, 0).v);
  }
  return t * s;
}

double Evaluator::quantity(std::size_t m, std::size_t row, const Effects& b, const double* t,
                           LinkKind what) const {
  const bool ev = link_uses_expected_value(what);
  auto f = [&](int k) { return ev ? mean(m, row, b, t, k) : eta(m, row, b, t, k); };
  switch (link_derivative_order(what)) {
    case 0: return f(0).v;
    case 1: return f(1).d1;
    case 2: return f(2).d2;
    default: {
      const ModelDesign& md = design_->models[m];
      double tx = t ? *t : (md.timevar != npos ? design_->data->column(md.timevar)[row] : kNaN);
      return integral(m, row, b, tx, ev);
    }
  }
}

double Evaluator::row_loglik(std::size_t m, std::size_t row, const Effects& b) const {
  const ModelDesign& md = design_->models[m];
  const Dataset& d = *design_->data;
  const FamilyInfo& f = md.family;
  if (f.llfunction) {
    double t_row = md.timevar != npos ? d.column(md.timevar)[row] : kNaN;
    RowContext ctx(*this, m, row, b, t_row);
    return f.llfunction(ctx);
  }
  if (f.survival) {
    double t = d.column(md.response)[row];
    double ev = md.failure != npos ? d.column(md.failure)[row] : 1.0;
    std::optional<double> t0;
    if (md.ltruncated != npos) t0 = d.column(md.ltruncated)[row];
    RowPredictor tp(*this, m, row, b);
    return survival_loglik(f, anc(m), t, ev, t0, tp, design_->time_rule);
  }
  double y = d.column(md.response)[row];
  return log_density(f.tag, y, eta(m, row, b, nullptr, 0).v, anc(m));
}

double Evaluator::log_hazard(std::size_t m, std::size_t row, const Effects& b, double t) const {
  RowPredictor tp(*this, m, row, b);
  return merlin::log_hazard(design_->models[m].family, anc(m), t, tp);
}

double Evaluator::cum_hazard(std::size_t m, std::size_t row, const Effects& b, double t) const {
  RowPredictor tp(*this, m, row, b);
  return merlin::cum_hazard(design_->models[m].family, anc(m), t, tp, design_->time_rule);
}

bool find_mode(const std::function<double(const Eigen::VectorXd&)>& g, Eigen::VectorXd& z,
               Eigen::MatrixXd& chol) {
  const Eigen::Index q = z.size();
  const double h = 1e-3;
  Eigen::VectorXd grad(q);
  Eigen::MatrixXd hess(q, q);
  auto derivatives = [&](double f0) {
    Eigen::VectorXd fp(q), fm(q);
    Eigen::VectorXd x = z;
    for (Eigen::Index i = 0; i < q; ++i) {
      x(i) = z(i) + h;
      fp(i) = g(x);
      x(i) = z(i) - h;
      fm(i) = g(x);
      x(i) = z(i);
      grad(i) = (fp(i) - fm(i)) / (2 * h);
      hess(i, i) = (fp(i) - 2 * f0 + fm(i)) / (h * h);
    }
    for (Eigen::Index i = 0; i < q; ++i)
      for (Eigen::Index j = 0; j < i; ++j) {
        double s = 0;
        for (int si = -1; si <= 1; si += 2)
          for (int sj = -1; sj <= 1; sj += 2) {
            x = z;
            x(i) += si * h;
            x(j) += sj * h;
            s += si * sj * g(x);
          }
        hess(i, j) = hess(j, i) = s / (4 * h * h);
      }
    return grad.allFinite() && hess.allFinite();
  };

  double f0 = g(z);
  if (!std::isfinite(f0)) return false;
  bool converged = false;
  for (int it = 0; it < 60; ++it) {
    if (!derivatives(f0)) return false;
    Eigen::MatrixXd neg = -hess;
    Eigen::LLT<Eigen::MatrixXd> llt(neg);
    Eigen::VectorXd step;
    if (llt.info() == Eigen::Success) {
      step = llt.solve(grad);
    } else {
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(neg);
      double shift = std::max(0.0, -es.eigenvalues().minCoeff()) + 1.0;
      step = (neg + shift * Eigen::MatrixXd::Identity(q, q)).ldlt().solve(grad);
    }
    double alpha = 1;
    double f1 = kNaN;
    for (int k = 0; k < 30; ++k) {
      f1 = g(z + alpha * step);
      if (std::isfinite(f1) && f1 >= f0 - 1e-10 * std::abs(f0)) break;
      alpha *= 0.5;
    }
    if (!std::isfinite(f1)) return false;
    Eigen::VectorXd dz = alpha * step;
    z += dz;
    f0 = f1;
    if (dz.cwiseAbs().maxCoeff() < 1e-7) {
      converged = true;
      break;
    }
  }
  if (!converged || !derivatives(f0)) return false;
  Eigen::LLT<Eigen::MatrixXd> llt(-hess);
  if (llt.info() != Eigen::Success) return false;
  Eigen::MatrixXd cov = llt.solve(Eigen::MatrixXd::Identity(q, q));
  Eigen::LLT<Eigen::MatrixXd> c(cov);
  if (c.info() != Eigen::Success) return false;
  chol = c.matrixL();
  return chol.allFinite();
}

Likelihood::Likelihood(const Design& design, IntegrationOptions opt) : design_(&design), opt_(opt) {
  const auto& levels = design.clusters.levels;
  const std::size_t depth = design.levels.size();
  if (depth > 2) throw ValidationError("at most two levels of random effects are supported");
  if (depth > 0 && levels.size() != depth) throw ValidationError("cluster index does not match the levels");
  if (opt_.gh_nodes < 1) throw ValidationError("intpoints must be positive");
  if (depth > 0) clusters_.resize(levels[0].size());
  std::unordered_map<std::size_t, std::size_t> inner_pos;
  if (depth == 2) {
    for (std::size_t c = 0; c < levels[0].size(); ++c) {
      const auto& ch = levels[0].children[c];
      clusters_[c].inner.resize(ch.size());
      for (std::size_t k = 0; k < ch.size(); ++k) inner_pos[ch[k]] = k;
    }
  }
  for (std::size_t m = 0; m < design.models.size(); ++m) {
    const ModelDesign& md = design.models[m];
    bool any = std::any_of(md.level_dep.begin(), md.level_dep.end(), [](bool x) { return x; });
    for (std::size_t r : md.rows) {
      RowRef ref{static_cast<std::uint32_t>(m), static_cast<std::uint32_t>(r)};
      if (!any || depth == 0) {
        free_rows_.push_back(ref);
        continue;
      }
      std::size_t c = levels[0].cluster_of_row[r];
      if (c == ClusterLevel::npos) throw ValidationError("row " + std::to_string(r + 1) + " has no cluster");
      if (depth == 2 && md.level_dep[1]) {
        std::size_t c2 = levels[1].cluster_of_row[r];
        if (c2 == ClusterLevel::npos) throw ValidationError("row " + std::to_string(r + 1) + " has no cluster");
        clusters_[c].inner[inner_pos.at(c2)].push_back(ref);
      } else {
        clusters_[c].outer.push_back(ref);
      }
    }
  }
  QuadratureRule gh = gauss_hermite(opt_.gh_nodes);
  for (const auto& l : design.levels) base_rule_.push_back(tensor_rule(gh, l.q()));
  reset_adaptation();
}

void Likelihood::reset_adaptation() {
  const std::size_t q = design_->levels.empty() ? 0 : design_->levels[0].q();
  mode_.assign(clusters_.size(), Eigen::VectorXd::Zero(q));
  scale_.assign(clusters_.size(), Eigen::MatrixXd::Identity(q, q));
}

double Likelihood::rows_loglik(const Evaluator& ev, const std::vector<RowRef>& rows, const Effects& b) const {
  double s = 0;
  for (const RowRef& r : rows) s += ev.row_loglik(r.model, r.row, b);
  return s;
}

double Likelihood::inner_loglik(const Evaluator& ev, const std::vector<RowRef>& rows, const double* b_outer) const {
  if (rows.empty()) return 0.0;
  const Eigen::MatrixXd& l1 = ev.chol(1);
  const std::size_t q = l1.rows();
  Eigen::VectorXd b1(q);
  auto ll = [&](const double* z) {
    b1.noalias() = l1 * Eigen::Map<const Eigen::VectorXd>(z, q);
    Effects e;
    e.b[0] = b_outer;
    e.b[1] = b1.data();
    return rows_loglik(ev, rows, e);
  };
  const TensorRule* rule = &base_rule_[1];
  TensorRule adapted;
  if (opt_.adaptive && q > 0) {
    Eigen::VectorXd z = Eigen::VectorXd::Zero(q);
    Eigen::MatrixXd c;
    auto g = [&](const Eigen::VectorXd& x) { return ll(x.data()) - 0.5 * x.squaredNorm(); };
    if (find_mode(g, z, c)) {
      adapted = adapt_rule(base_rule_[1], z, c);
      rule = &adapted;
    }
  }
  std::vector<double> acc(rule->size());
  for (std::size_t k = 0; k < rule->size(); ++k) acc[k] = rule->log_weights[k] + ll(rule->node(k));
  return log_sum_exp(acc);
}

double Likelihood::cluster_loglik(const Evaluator& ev, std::size_t c) const {
  const ClusterPlan& plan = clusters_[c];
  const Eigen::MatrixXd& l0 = ev.chol(0);
  const std::size_t q = l0.rows();
  const bool nested = design_->levels.size() == 2;
  const TensorRule* rule = &base_rule_[0];
  TensorRule adapted;
  if (opt_.adaptive && !nested && q > 0) {
    adapted = adapt_rule(base_rule_[0], mode_[c], scale_[c]);
    rule = &adapted;
  }
  Eigen::VectorXd b0(q);
  std::vector<double> acc(rule->size());
  for (std::size_t k = 0; k < rule->size(); ++k) {
    b0.noalias() = l0 * Eigen::Map<const Eigen::VectorXd>(rule->node(k), q);
    Effects e;
    e.b[0] = b0.data();
    double f = rows_loglik(ev, plan.outer, e);
    for (const auto& in : plan.inner) f += inner_loglik(ev, in, b0.data());
    acc[k] = rule->log_weights[k] + f;
  }
  return log_sum_exp(acc);
}

std::size_t Likelihood::adapt(const Eigen::VectorXd& theta) {
  if (!opt_.adaptive || design_->levels.size() != 1 || design_->levels[0].q() == 0) return 0;
  Evaluator ev(*design_, theta);
  const Eigen::MatrixXd& l0 = ev.chol(0);
  const Eigen::Index q = l0.rows();
  std::atomic<std::size_t> failures{0};
  parallel_for(clusters_.size(), opt_.threads, [&](std::size_t c) {
    Eigen::VectorXd b(q);
    auto g = [&](const Eigen::VectorXd& z) {
      b.noalias() = l0 * z;
      Effects e;
      e.b[0] = b.data();
      return rows_loglik(ev, clusters_[c].outer, e) - 0.5 * z.squaredNorm();
    };
    Eigen::VectorXd z = mode_[c];
    Eigen::MatrixXd chol;
    if (find_mode(g, z, chol)) {
      mode_[c] = z;
      scale_[c] = chol;
      return;
    }
    // retry from the prior mean before giving up
    z.setZero();
    if (find_mode(g, z, chol)) {
      mode_[c] = z;
      scale_[c] = chol;
    } else {
      ++failures;
    }
  });
  return failures;
}

double Likelihood::total(const Eigen::VectorXd& theta) const {
  Evaluator ev(*design_, theta);
  const std::size_t nf = free_rows_.size();
  std::vector<double> slots(nf + clusters_.size());
  parallel_for(slots.size(), opt_.threads, [&](std::size_t i) {
    if (i < nf) {
      slots[i] = ev.row_loglik(free_rows_[i].model, free_rows_[i].row, Effects{});
    } else {
      slots[i] = cluster_loglik(ev, i - nf);
    }
  });
  return pairwise_sum(slots);
}

double Likelihood::fixed_only(const Eigen::VectorXd& theta) const {
  Evaluator ev(*design_, theta);
  std::vector<RowRef> all;
  for (std::size_t m = 0; m < design_->models.size(); ++m)
    for (std::size_t r : design_->models[m].rows)
      all.push_back({static_cast<std::uint32_t>(m), static_cast<std::uint32_t>(r)});
  std::vector<double> slots(all.size());
  parallel_for(all.size(), opt_.threads,
               [&](std::size_t i) { slots[i] = ev.row_loglik(all[i].model, all[i].row, Effects{}); });
  return pairwise_sum(slots);
}

void Likelihood::check_finite(const Eigen::VectorXd& theta) const {
  Evaluator ev(*design_, theta);
  for (std::size_t m = 0; m < design_->models.size(); ++m) {
    const ModelDesign& md = design_->models[m];
    for (std::size_t r : md.rows) {
      double v = ev.row_loglik(m, r, Effects{});
      if (!std::isfinite(v))
        throw NumericalError("non-finite log-likelihood contribution (" + std::to_string(v) + ") in model " +
                             std::to_string(m + 1) + " (" + md.spec.response + "), data row " +
                             std::to_string(r + 1));
    }
  }
}

}  // namespace merlin
