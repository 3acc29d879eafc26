#include "merlin/design.hpp"

#include <cmath>
#include <functional>
#include <map>

#include "merlin/error.hpp"

namespace merlin {

std::vector<std::string> Design::param_names() const {
  std::vector<std::string> names;
  names.reserve(params.size());
  for (const auto& p : params) names.push_back(p.panel + ":" + p.label);
  return names;
}

namespace {

std::string element_label(const ElementSpec& e) {
  switch (e.kind) {
    case ElementKind::variable: return e.variable;
    case ElementKind::rcs: return "rcs()";
    case ElementKind::bs: return "bs()";
    case ElementKind::fp: return "fp()";
    case ElementKind::user: return "mf()";
    case ElementKind::link: return std::string(to_string(e.link)) + "[]";
    case ElementKind::random_effect: {
      std::string s = e.effect + "[";
      for (std::size_t i = 0; i < e.level_path.size(); ++i) s += (i ? ">" : "") + e.level_path[i];
      return s + "]";
    }
  }
  return "?";
}

// Fills the product of the selected data elements for one row; false if an
// input is missing or outside the basis domain.
bool data_product(const Dataset& d, const ComponentDesign& c, std::size_t row, bool include_time,
                  double* out) {
  for (std::size_t j = 0; j < c.ncols; ++j) out[j] = 1.0;
  double vals[64];
  for (std::size_t e = 0; e < c.elements.size(); ++e) {
    const auto& el = c.elements[e];
    if (!el.is_data() || (el.time && !include_time)) continue;
    if (d.is_missing(el.source, row)) return false;
    double x = d.column(el.source)[row];
    if (el.offset != npos) {
      if (d.is_missing(el.offset, row)) return false;
      x += d.column(el.offset)[row];
    }
    if (el.basis) {
      try {
        el.basis->eval(x, vals, nullptr, nullptr);
      } catch (const Error&) {
        return false;
      }
    } else {
      vals[0] = x;
    }
    for (std::size_t j = 0; j < c.ncols; ++j) out[j] *= vals[(j / c.stride[e]) % el.ncols];
  }
  return true;
}

}  // namespace

Design build_design(const ValidatedGraph& vg, const Dataset& d, const CallbackRegistry& callbacks,
                    int gl_nodes, const FrozenBases* frozen) {
  Design D;
  D.data = &d;
  D.graph = vg.graph;
  D.clusters = vg.clusters;
  D.time_rule = graded_unit_rule(gl_nodes);
  const auto& g = D.graph;
  const std::size_t n_rows = d.n_rows();
  const auto dep = level_dependence(g);

  std::map<std::string, std::pair<std::size_t, std::size_t>> effect_pos;
  for (std::size_t l = 0; l < g.levels.size(); ++l) {
    LevelDesign ld;
    ld.variable = g.levels[l];
    ld.unstructured = g.options.covariance == CovarianceStructure::unstructured;
    for (const auto& e : g.effects)
      if (e.level_path.size() == l + 1) {
        effect_pos[e.name] = {l, ld.effects.size()};
        ld.effects.push_back(e.name);
      }
    D.levels.push_back(std::move(ld));
  }
  if (frozen && frozen->size() != g.models.size()) throw FormatError("stored bases do not match the model");

  auto col_or_npos = [&](const std::optional<std::string>& name) {
    return name && d.has_column(*name) ? d.column_index(*name) : npos;
  };

  for (std::size_t m = 0; m < g.models.size(); ++m) {
    const ModelSpec& spec = g.models[m];
    ModelDesign md;
    md.spec = spec;
    md.rows = m < vg.rows.size() ? vg.rows[m] : RowSet{};
    md.response = spec.response.empty() ? npos : col_or_npos(spec.response);
    md.failure = col_or_npos(spec.family.failure);
    md.ltruncated = col_or_npos(spec.family.ltruncated);
    md.timevar = col_or_npos(spec.timevar);
    md.level_dep = dep[m];

    std::vector<std::uint8_t> events;
    if (md.failure != npos) {
      auto f = d.column(md.failure);
      for (std::size_t r : md.rows) events.push_back(f[r] == 1 ? 1 : 0);
    }

    for (std::size_t ci = 0; ci < spec.components.size(); ++ci) {
      const auto& cs = spec.components[ci];
      ComponentDesign cd;
      cd.constraint = cs.constraint;
      std::string label;
      for (std::size_t ei = 0; ei < cs.elements.size(); ++ei) {
        const ElementSpec& es = cs.elements[ei];
        ElementDesign ed;
        ed.kind = es.kind;
        ed.label = element_label(es);
        label += (ei ? "#" : "") + ed.label;
        switch (es.kind) {
          case ElementKind::variable:
          case ElementKind::rcs:
          case ElementKind::bs:
          case ElementKind::fp: {
            ed.source = d.column_index(es.variable);
            if (es.options.offset) ed.offset = d.column_index(*es.options.offset);
            ed.time = spec.timevar && es.variable == *spec.timevar;
            if (es.kind != ElementKind::variable) {
              if (frozen) {
                const auto& fm = (*frozen)[m];
                if (ci >= fm.elements.size() || ei >= fm.elements[ci].size() || !fm.elements[ci][ei])
                  throw FormatError("stored basis missing for model " + std::to_string(m + 1));
                ed.basis = *fm.elements[ci][ei];
              } else {
                std::vector<double> x;
                x.reserve(md.rows.size());
                auto src = d.column(ed.source);
                for (std::size_t r : md.rows)
                  x.push_back(src[r] + (ed.offset != npos ? d.column(ed.offset)[r] : 0.0));
                ed.basis = build_basis(es.kind, es.options, x, events.empty() ? nullptr : &events);
              }
              ed.ncols = ed.basis->columns();
            }
            if (ed.time) cd.has_time_data = true;
            break;
          }
          case ElementKind::random_effect: {
            auto [l, k] = effect_pos.at(es.effect);
            ed.level = l;
            ed.effect = k;
            cd.has_effect = true;
            cd.has_scalar = true;
            break;
          }
          case ElementKind::link:
            ed.target = *es.target_index;
            ed.link = es.link;
            cd.has_scalar = true;
            break;
          case ElementKind::user:
            ed.callback = callbacks.get(es.variable);
            cd.has_scalar = true;
            break;
        }
        cd.elements.push_back(std::move(ed));
      }
      cd.ncols = 1;
      for (const auto& e : cd.elements) cd.ncols *= e.ncols;
      if (cd.ncols > 64) throw ValidationError("component has too many columns");
      cd.stride.assign(cd.elements.size(), 1);
      for (std::size_t e = cd.elements.size(); e-- > 1;) cd.stride[e - 1] = cd.stride[e] * cd.elements[e].ncols;

      cd.static_cols.resize(n_rows, cd.ncols);
      if (cd.has_time_data) cd.fixed_cols.resize(n_rows, cd.ncols);
      for (std::size_t r = 0; r < n_rows; ++r) {
        if (!data_product(d, cd, r, true, cd.static_cols.row(r).data()))
          cd.static_cols.row(r).setConstant(kNaN);
        if (cd.has_time_data && !data_product(d, cd, r, false, cd.fixed_cols.row(r).data()))
          cd.fixed_cols.row(r).setConstant(kNaN);
      }
      for (std::size_t r : md.rows)
        if (std::isnan(cd.static_cols(r, 0)))
          throw ValidationError("model " + std::to_string(m + 1) + " (" + spec.response + "): component '" +
                                label + "' cannot be evaluated on row " + std::to_string(r + 1));
      for (std::size_t j = 0; j < cd.ncols; ++j)
        cd.labels.push_back(cd.ncols > 1 ? label + ":" + std::to_string(j + 1) : label);
      md.components.push_back(std::move(cd));
    }

    std::optional<FrozenBasis> baseline;
    if (spec.family.tag == FamilyTag::rp || spec.family.tag == FamilyTag::rcs) {
      if (frozen) {
        baseline = (*frozen)[m].baseline;
        if (!baseline) throw FormatError("stored baseline spline missing for model " + std::to_string(m + 1));
      } else {
        std::vector<double> t;
        auto tc = d.column(md.response);
        for (std::size_t r : md.rows) t.push_back(tc[r]);
        FrozenBasis b;
        b.kind = BasisKind::rcs;
        b.knots = spec.family.df ? place_knots(t, *spec.family.df, &events, true)
                                 : knots_from_list(spec.family.knots, true);
        Eigen::MatrixXd raw(t.size(), b.columns());
        std::vector<double> row(b.columns());
        for (std::size_t i = 0; i < t.size(); ++i) {
          b.eval(t[i], row.data(), nullptr, nullptr);
          for (Eigen::Index c = 0; c < raw.cols(); ++c) raw(i, c) = row[c];
        }
        b.transform = orthogonalize(raw).second;
        baseline = b;
      }
    }
    md.family = make_family(spec.family, baseline, callbacks);
    D.models.push_back(std::move(md));
  }

  // time dependence, following links
  std::vector<int> state(D.models.size(), 0);
  std::function<bool(std::size_t)> timed = [&](std::size_t m) -> bool {
    if (state[m]) return D.models[m].time_dependent;
    state[m] = 1;
    bool any = false;
    for (auto& c : D.models[m].components) {
      bool ct = c.has_time_data;
      for (const auto& e : c.elements) {
        if (e.kind == ElementKind::link)
          ct = ct || link_derivative_order(e.link) != 0 || timed(e.target);
        if (e.kind == ElementKind::user) ct = ct || D.models[m].timevar != npos;
      }
      c.time_dependent = ct;
      any = any || ct;
    }
    D.models[m].time_dependent = any;
    return any;
  };
  for (std::size_t m = 0; m < D.models.size(); ++m) timed(m);

  // parameter layout
  for (std::size_t m = 0; m < D.models.size(); ++m) {
    auto& md = D.models[m];
    const std::string panel = md.spec.response.empty() ? "model" + std::to_string(m + 1) : md.spec.response;
    for (auto& c : md.components) {
      if (c.constraint) {
        for (const auto& lab : c.labels) D.constrained.push_back({m, D.params.size(), lab, *c.constraint});
        continue;
      }
      c.first_param = D.params.size();
      for (const auto& lab : c.labels) {
        ParameterInfo p;
        p.panel = panel;
        p.label = lab;
        p.kind = ParamKind::coefficient;
        p.model = m;
        p.in_effect_component = c.has_effect;
        D.params.push_back(p);
      }
    }
    if (md.spec.has_constant) {
      md.cons_param = D.params.size();
      ParameterInfo p;
      p.panel = panel;
      p.label = "_cons";
      p.kind = ParamKind::constant;
      p.model = m;
      D.params.push_back(p);
    }
    md.anc_first = D.params.size();
    for (const auto& name : ancillary_names(md.family, m)) {
      ParameterInfo p;
      p.panel = panel;
      p.label = name;
      p.kind = ParamKind::ancillary;
      p.model = m;
      p.hidden = md.family.tag == FamilyTag::rp || md.family.tag == FamilyTag::rcs;
      p.exp_display = md.family.tag == FamilyTag::gaussian;
      D.params.push_back(p);
    }
  }
  for (std::size_t l = 0; l < D.levels.size(); ++l) {
    auto& ld = D.levels[l];
    ld.first_param = D.params.size();
    for (const auto& e : ld.effects) {
      ParameterInfo p;
      p.panel = ld.variable;
      p.label = "sd(" + e + ")";
      p.kind = ParamKind::log_sd;
      p.level = l;
      p.exp_display = true;
      D.params.push_back(p);
    }
    if (ld.unstructured)
      for (std::size_t i = 1; i < ld.q(); ++i)
        for (std::size_t j = 0; j < i; ++j) {
          ParameterInfo p;
          p.panel = ld.variable;
          p.label = "corr(" + ld.effects[i] + "," + ld.effects[j] + ")";
          p.kind = ParamKind::correlation;
          p.level = l;
          p.row_i = i;
          p.row_j = j;
          D.params.push_back(p);
        }
  }
  return D;
}

FrozenBases frozen_bases(const Design& design) {
  FrozenBases out;
  for (const auto& md : design.models) {
    FrozenModel fm;
    for (const auto& c : md.components) {
      std::vector<std::optional<FrozenBasis>> els;
      for (const auto& e : c.elements) els.push_back(e.basis);
      fm.elements.push_back(std::move(els));
    }
    fm.baseline = md.family.baseline;
    out.push_back(std::move(fm));
  }
  return out;
}

}  // namespace merlin
