#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "merlin/basis.hpp"
#include "merlin/data.hpp"
#include "merlin/family.hpp"
#include "merlin/formula.hpp"
#include "merlin/quadrature.hpp"

namespace merlin {

inline constexpr std::size_t npos = static_cast<std::size_t>(-1);

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ElementDesign {
  ElementKind kind = ElementKind::variable;
  std::string label;
  std::size_t ncols = 1;
  std::size_t source = npos;  // data column of a variable / basis source
  std::size_t offset = npos;
  bool time = false;          // source is the model's timevar
  std::optional<FrozenBasis> basis;
  std::size_t level = 0;      // random effect: level and position within it
  std::size_t effect = 0;
  std::size_t target = 0;     // link
  LinkKind link = LinkKind::xb;
  UserFunction callback;      // mf()

  bool is_data() const {
    return kind == ElementKind::variable || kind == ElementKind::rcs || kind == ElementKind::bs ||
           kind == ElementKind::fp;
  }
};

struct ComponentDesign {
  std::vector<ElementDesign> elements;
  std::size_t ncols = 1;
  std::vector<std::size_t> stride;  // mixed radix, first element varies slowest
  std::optional<double> constraint;
  std::size_t first_param = npos;
  bool has_time_data = false;  // a data element driven by the timevar
  bool has_scalar = false;     // random effect, link or mf() factors
  bool has_effect = false;     // contains a random effect directly
  bool time_dependent = false;
  RowMatrix static_cols;  // product of data elements at each row's own values
  RowMatrix fixed_cols;   // product of data elements not driven by the timevar
  std::vector<std::string> labels;
};

struct ModelDesign {
  ModelSpec spec;
  FamilyInfo family;
  std::size_t response = npos, failure = npos, ltruncated = npos, timevar = npos;
  std::vector<ComponentDesign> components;
  std::optional<std::size_t> cons_param;
  std::size_t anc_first = 0;
  bool time_dependent = false;
  std::vector<bool> level_dep;
  RowSet rows;
};

struct LevelDesign {
  std::string variable;
  std::vector<std::string> effects;
  std::size_t first_param = 0;
  bool unstructured = false;

  std::size_t q() const { return effects.size(); }
  std::size_t n_params() const { return q() + (unstructured ? q() * (q() - 1) / 2 : 0); }
};

enum class ParamKind { coefficient, constant, ancillary, log_sd, correlation };

struct ParameterInfo {
  std::string panel;
  std::string label;
  ParamKind kind = ParamKind::coefficient;
  std::size_t model = npos;
  std::size_t level = npos;
  std::size_t row_i = 0, row_j = 0;  // correlation pair (i > j)
  bool in_effect_component = false;
  bool hidden = false;
  bool exp_display = false;  // reported as exp(θ), e.g. sd(resid.)
};

/// A constrained component, reported as a row with a fixed value.
struct ConstrainedRow {
  std::size_t model;
  std::size_t before_param;  // position in the parameter order
  std::string label;
  double value;
};

struct Design {
  const Dataset* data = nullptr;
  ModelGraph graph;
  ClusterIndex clusters;
  std::vector<ModelDesign> models;
  std::vector<LevelDesign> levels;
  std::vector<ParameterInfo> params;
  std::vector<ConstrainedRow> constrained;
  QuadratureRule time_rule;

  std::size_t n_params() const { return params.size(); }
  std::vector<std::string> param_names() const;
};

struct FrozenModel {
  std::vector<std::vector<std::optional<FrozenBasis>>> elements;  // [component][element]
  std::optional<FrozenBasis> baseline;
};
using FrozenBases = std::vector<FrozenModel>;

/// Precomputes time-constant columns over every dataset row, builds (or
/// reuses) spline bases and lays out the parameter vector.
Design build_design(const ValidatedGraph& vg, const Dataset& d, const CallbackRegistry& callbacks,
                    int gl_nodes, const FrozenBases* frozen = nullptr);

FrozenBases frozen_bases(const Design& design);

}  // namespace merlin
