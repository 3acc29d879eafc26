#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "merlin/design.hpp"
#include "merlin/optimize.hpp"

namespace merlin {

enum class Readapt { every_iter, every_eval };

struct FitOptions {
  std::optional<int> gh_nodes;    // default: model option, MERLIN_GH_NODES, then 7
  std::optional<bool> adaptive;   // default: model option, then adaptive
  std::optional<int> gl_nodes;    // default: model option, then 30
  Readapt readapt = Readapt::every_iter;
  int threads = 1;
  int max_iter = 300;
  OptimizerKind optimizer = OptimizerKind::bfgs;
  std::ostream* log = nullptr;    // progress output; null for silence
  bool nolog = false;             // headers only, no iteration lines
  CallbackRegistry callbacks;
};

struct EstimationResult {
  static constexpr int kSchemaVersion = 1;

  std::string model_text;  // canonical model text
  std::vector<std::string> names;
  Eigen::VectorXd theta;
  Eigen::MatrixXd vcov;  // NaN when the Hessian is not invertible
  bool vcov_ok = false;
  double loglik = 0;
  bool converged = false;
  int iterations = 0;
  double gradient_norm = 0;
  std::size_t n_obs = 0;
  int gh_nodes = 7;
  bool adaptive = true;
  int gl_nodes = 30;
  FrozenBases bases;
  std::vector<std::string> schema;  // referenced data columns
  std::uint64_t fingerprint = 0;
};

struct FitOutput {
  Design design;
  EstimationResult result;
};

/// Two-stage maximum likelihood fit: a fixed-effects fit for starting
/// values (when random effects are present), then the full model.
FitOutput fit(const ModelGraph& graph, const Dataset& d, const FitOptions& opt);
FitOutput fit(const std::string& model_text, const Dataset& d, const FitOptions& opt);

/// Default starting values with random-effect parameters at sd = 1,
/// correlation 0, and loadings at `loading`.
Eigen::VectorXd starting_values(const Design& design, double loading);

/// Design for evaluating a stored result on (possibly new) data.
Design rebuild_design(const EstimationResult& res, const Dataset& d, const CallbackRegistry& callbacks);

/// FNV-1a over column names and category labels.
std::uint64_t schema_fingerprint(const Dataset& d, const std::vector<std::string>& columns);

std::string to_json(const EstimationResult& res);
EstimationResult from_json(const std::string& text);
void save_result(const EstimationResult& res, const std::filesystem::path& path);
EstimationResult load_result(const std::filesystem::path& path);

}  // namespace merlin
