#pragma once

#include <cstddef>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "merlin/data.hpp"
#include "merlin/estimate.hpp"

namespace merlin {

enum class Statistic { mu, eta, hazard, chazard, survival, cif, rmst, timelost };

Statistic parse_statistic(const std::string& name);
const char* to_string(Statistic s);

struct PredictionRequest {
  Statistic statistic = Statistic::eta;
  std::size_t outcome = 0;            // 0-based model index
  std::vector<std::size_t> causes;    // 0-based; empty means all survival models
  std::vector<std::pair<std::string, double>> at;
  std::optional<std::string> timevar;  // column of evaluation times
  bool marginal = false;               // otherwise fixed effects only (b = 0)
  bool ci = false;
  bool force = false;                  // skip convergence and schema checks
  int threads = 1;
};

struct PredictionOutput {
  std::string statistic;
  bool has_time = false;
  bool has_ci = false;
  std::vector<double> time;  // NaN where not applicable
  std::vector<double> value;
  std::vector<double> lo, hi;
};

/// Evaluates the requested statistic on every row of `d`. Rows with missing
/// inputs give NaN.
PredictionOutput predict(const EstimationResult& res, const Dataset& d, const PredictionRequest& req,
                         const CallbackRegistry& callbacks = {});

/// `row,time,<stat>[,<stat>_lo,<stat>_hi]`, 1-based rows, empty cells for
/// missing values.
void write_prediction_csv(std::ostream& os, const PredictionOutput& out);

}  // namespace merlin
