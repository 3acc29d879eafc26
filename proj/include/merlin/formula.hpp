#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "merlin/data.hpp"

namespace merlin {

enum class ElementKind { variable, rcs, bs, fp, random_effect, link, user };

/// Cross-model links: expected value (EV) or complex predictor (XB) of
/// another submodel, or its first/second time derivative or time integral.
enum class LinkKind { ev, dev, d2ev, iev, xb, dxb, d2xb, ixb };

const char* to_string(LinkKind k);
bool link_uses_expected_value(LinkKind k);
int link_derivative_order(LinkKind k);  // 0, 1, 2, or -1 for the integral kinds

struct BasisOptions {
  std::optional<int> df;
  std::vector<double> knots;
  std::vector<double> bknots;
  std::vector<double> powers;
  bool log = false;
  bool orthog = false;
  bool event = false;
  bool intercept = false;
  std::optional<std::string> offset;

  bool operator==(const BasisOptions&) const = default;
};

struct ElementSpec {
  ElementKind kind = ElementKind::variable;
  std::string variable;                 // variable / basis source / mf() callback name
  BasisOptions options;                 // rcs, bs, fp
  std::string effect;                   // random effect name (M1, M2, ...)
  std::vector<std::string> level_path;  // outer > ... > inner
  LinkKind link = LinkKind::ev;
  std::string target;                   // as written: response name or 1-based index
  std::optional<std::size_t> target_index;  // 0-based, set by resolve_links()

  bool operator==(const ElementSpec&) const = default;
};

struct ComponentSpec {
  std::vector<ElementSpec> elements;
  std::optional<double> constraint;

  bool operator==(const ComponentSpec&) const = default;
};

enum class FamilyTag { gaussian, bernoulli, poisson, exponential, weibull, gompertz, rp, rcs, user };

const char* to_string(FamilyTag f);

struct FamilySpec {
  FamilyTag tag = FamilyTag::gaussian;
  std::optional<std::string> failure;
  std::optional<std::string> ltruncated;
  std::optional<int> df;
  std::vector<double> knots;
  bool orthog = false;
  int nap = 0;
  std::string llfunction;
  std::string hazard;
  std::string chazard;

  bool operator==(const FamilySpec&) const = default;
};

struct ModelSpec {
  std::string response;
  std::vector<ComponentSpec> components;
  FamilySpec family;
  std::optional<std::string> timevar;
  bool has_constant = true;

  bool survival() const;
  bool operator==(const ModelSpec&) const = default;
};

enum class CovarianceStructure { diagonal, unstructured };

struct GlobalOptions {
  CovarianceStructure covariance = CovarianceStructure::diagonal;
  std::optional<int> intpoints;
  std::optional<bool> adaptive;
  std::optional<int> chintpoints;
  bool nolog = false;

  bool operator==(const GlobalOptions&) const = default;
};

struct RandomEffectInfo {
  std::string name;
  std::vector<std::string> level_path;

  bool operator==(const RandomEffectInfo&) const = default;
};

struct LinkEdge {
  std::size_t from;
  std::size_t to;
  LinkKind kind;

  bool operator==(const LinkEdge&) const = default;
};

struct ModelGraph {
  std::vector<ModelSpec> models;
  /// Distinct random effects, sorted by level depth then name.
  std::vector<RandomEffectInfo> effects;
  /// The full level hierarchy, outermost first.
  std::vector<std::string> levels;
  std::vector<LinkEdge> edges;  // filled by resolve_links()
  GlobalOptions options;

  bool operator==(const ModelGraph&) const = default;
};

/// Parses `(model1) [(model2) ...] [, options]`.
ModelGraph parse_spec(const std::string& text);

/// Canonical text; parse_spec(render(g)) reproduces g (before resolve_links).
std::string render(const ModelGraph& g);
std::string render(const ModelSpec& m);

/// Resolves EV/XB targets to model indices and rejects cycles. Idempotent.
void resolve_links(ModelGraph& g);

struct ValidatedGraph {
  ModelGraph graph;
  std::vector<RowSet> rows;  // per model
  ClusterIndex clusters;     // over rows of random-effect-dependent models
};

ValidatedGraph validate(ModelGraph g, const Dataset& d);

/// Data columns the model refers to apart from responses and event
/// indicators; `include_outcomes` adds those too.
std::vector<std::string> referenced_variables(const ModelSpec& m, bool include_outcomes);
std::vector<std::string> referenced_variables(const ModelGraph& g, bool include_outcomes);

/// Models whose predictor depends (directly or through links) on effects at
/// each level; result[m][l].
std::vector<std::vector<bool>> level_dependence(const ModelGraph& g);

}  // namespace merlin
