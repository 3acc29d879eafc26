#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace merlin {

using RowSet = std::vector<std::size_t>;

/// Column-oriented numeric table. Missing cells are tracked by an explicit
/// mask; their stored value is NaN so arithmetic on them never looks valid.
class Dataset {
 public:
  Dataset() = default;
  explicit Dataset(std::size_t n_rows) : n_rows_(n_rows) {}

  std::size_t n_rows() const { return n_rows_; }
  std::size_t n_columns() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }

  bool has_column(std::string_view name) const;
  std::size_t column_index(std::string_view name) const;

  std::span<const double> column(std::string_view name) const;
  std::span<const double> column(std::size_t index) const { return values_[index]; }
  bool is_missing(std::string_view name, std::size_t row) const;
  bool is_missing(std::size_t index, std::size_t row) const { return missing_[index][row] != 0; }

  /// String labels of a categorical column, indexed by code; empty for
  /// numeric columns.
  const std::vector<std::string>& categories(std::string_view name) const;

  /// Adds a column; `missing` may be empty (nothing missing).
  void add_column(std::string name, std::vector<double> values,
                  std::vector<std::uint8_t> missing = {},
                  std::vector<std::string> categories = {});
  /// Replaces every value of an existing column (used by `at()` overrides).
  void fill_column(std::string_view name, double value);
  void set_value(std::string_view name, std::size_t row, double value);

 private:
  std::size_t n_rows_ = 0;
  std::vector<std::string> names_;
  std::vector<std::vector<double>> values_;
  std::vector<std::vector<std::uint8_t>> missing_;
  std::vector<std::vector<std::string>> categories_;
  std::unordered_map<std::string, std::size_t> index_;
};

std::set<std::string> default_na_tokens();

/// Reads an RFC-4180 style CSV file with a header row. Columns whose
/// non-missing cells are all non-numeric are stored as dense integer codes
/// (ascending label order).
Dataset load_csv(const std::filesystem::path& path,
                 const std::set<std::string>& na_tokens = default_na_tokens());
Dataset parse_csv(std::string_view text,
                  const std::set<std::string>& na_tokens = default_na_tokens());

struct ClusterLevel {
  std::string variable;
  std::vector<double> keys;               // ascending
  std::vector<RowSet> rows;               // rows of each cluster, ascending
  std::vector<std::size_t> parent;        // outer cluster, empty at the top level
  std::vector<std::vector<std::size_t>> children;
  std::vector<std::size_t> cluster_of_row;  // npos for rows outside the index

  std::size_t size() const { return keys.size(); }
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
};

/// Nested partition of rows, outermost level first.
struct ClusterIndex {
  std::vector<ClusterLevel> levels;

  bool empty() const { return levels.empty(); }
  std::size_t depth() const { return levels.size(); }
};

ClusterIndex build_cluster_index(const Dataset& d, std::span<const std::string> levels);
ClusterIndex build_cluster_index(const Dataset& d, std::span<const std::string> levels,
                                 const RowSet& rows);

/// Rows where every response and covariate column is observed.
RowSet model_rows(const Dataset& d, std::span<const std::string> responses,
                  std::span<const std::string> covariates);

}  // namespace merlin
