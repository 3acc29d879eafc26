#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "merlin/design.hpp"
#include "merlin/estimate.hpp"

namespace merlin {

inline constexpr double kZ975 = 1.959964;

struct TableRow {
  std::string label;
  double coef = 0;
  double se = 0;     // NaN when unavailable
  double z = 0;      // NaN for transformed rows
  double p = 0;
  double lo = 0, hi = 0;
  bool constrained = false;
  bool transformed = false;  // sd / corr rows: no z or p
  std::size_t param = npos;  // estimation-scale parameter, if any
};

struct TablePanel {
  std::string title;
  std::vector<TableRow> rows;
};

/// Reporting rows: estimation-scale rows with normal-theory z, p and CI;
/// sd rows exponentiated (CI exponentiated); correlations from the
/// partial-correlation parameters with delta-method SE and a CI formed on
/// the atanh scale; constrained components with their fixed value.
std::vector<TablePanel> standard_errors(const Design& design, const EstimationResult& res);

/// Stata-like %9.7g without the leading zero (.1157301, -.0047585).
std::string format_number(double v);
/// Integer with thousands separators.
std::string format_count(std::size_t n);

void print_table(std::ostream& os, const std::vector<TablePanel>& panels, const EstimationResult& res);

/// Two-sided standard-normal p-value.
double normal_p_value(double z);

}  // namespace merlin
