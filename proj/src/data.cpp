#include "merlin/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "merlin/error.hpp"

namespace merlin {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

bool parse_number(std::string_view s, double& out) {
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

// Splits CSV text into records of fields. Quoted fields may contain commas,
// doubled quotes and newlines.
std::vector<std::vector<std::string>> split_records(std::string_view text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> record;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  std::size_t i = 0;
  auto end_record = [&] {
    record.push_back(field);
    field.clear();
    field_started = false;
    records.push_back(std::move(record));
    record.clear();
  };
  while (i < text.size()) {
    char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        field.push_back(c);
      }
    } else if (c == '"') {
      in_quotes = true;
      field_started = true;
    } else if (c == ',') {
      record.push_back(field);
      field.clear();
      field_started = false;
    } else if (c == '\n') {
      end_record();
    } else if (c == '\r') {
      // CRLF handled by the following '\n'
    } else {
      field.push_back(c);
      field_started = true;
    }
    ++i;
  }
  if (in_quotes) throw DataError("csv: unterminated quoted field");
  if (field_started || !record.empty() || !field.empty()) end_record();
  return records;
}

}  // namespace

bool Dataset::has_column(std::string_view name) const {
  return index_.find(std::string(name)) != index_.end();
}

std::size_t Dataset::column_index(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw DataError("unknown variable '" + std::string(name) + "'");
  return it->second;
}

std::span<const double> Dataset::column(std::string_view name) const {
  return values_[column_index(name)];
}

bool Dataset::is_missing(std::string_view name, std::size_t row) const {
  return missing_[column_index(name)][row] != 0;
}

const std::vector<std::string>& Dataset::categories(std::string_view name) const {
  return categories_[column_index(name)];
}

void Dataset::add_column(std::string name, std::vector<double> values,
                         std::vector<std::uint8_t> missing,
                         std::vector<std::string> categories) {
  if (names_.empty() && n_rows_ == 0) n_rows_ = values.size();
  if (values.size() != n_rows_)
    throw DataError("column '" + name + "' has " + std::to_string(values.size()) +
                    " rows, expected " + std::to_string(n_rows_));
  if (has_column(name)) throw DataError("duplicate column '" + name + "'");
  if (missing.empty()) {
    missing.assign(values.size(), 0);
    for (std::size_t i = 0; i < values.size(); ++i)
      if (std::isnan(values[i])) missing[i] = 1;
  }
  if (missing.size() != values.size()) throw DataError("missing mask length mismatch");
  for (std::size_t i = 0; i < values.size(); ++i)
    if (missing[i]) values[i] = kNaN;
  index_.emplace(name, names_.size());
  names_.push_back(std::move(name));
  values_.push_back(std::move(values));
  missing_.push_back(std::move(missing));
  categories_.push_back(std::move(categories));
}

void Dataset::fill_column(std::string_view name, double value) {
  std::size_t j = column_index(name);
  std::fill(values_[j].begin(), values_[j].end(), value);
  std::fill(missing_[j].begin(), missing_[j].end(), std::isnan(value) ? 1 : 0);
}

void Dataset::set_value(std::string_view name, std::size_t row, double value) {
  std::size_t j = column_index(name);
  values_[j].at(row) = value;
  missing_[j][row] = std::isnan(value) ? 1 : 0;
}

std::set<std::string> default_na_tokens() { return {"", ".", "NA"}; }

Dataset parse_csv(std::string_view text, const std::set<std::string>& na_tokens) {
  auto records = split_records(text);
  // drop blank trailing lines
  while (!records.empty() && records.back().size() == 1 && trim(records.back()[0]).empty())
    records.pop_back();
  if (records.empty()) throw DataError("csv: missing header row");

  std::vector<std::string> header;
  for (auto& h : records[0]) header.emplace_back(trim(h));
  {
    std::set<std::string> seen;
    for (auto& h : header) {
      if (h.empty()) throw DataError("csv: empty column name in header");
      if (!seen.insert(h).second) throw DataError("csv: duplicate column name '" + h + "'");
    }
  }

  const std::size_t n_rows = records.size() - 1;
  const std::size_t n_cols = header.size();
  std::vector<std::vector<std::string_view>> cells(n_cols, std::vector<std::string_view>(n_rows));
  for (std::size_t r = 0; r < n_rows; ++r) {
    const auto& rec = records[r + 1];
    if (rec.size() != n_cols)
      throw DataError("csv: line " + std::to_string(r + 2) + " has " + std::to_string(rec.size()) +
                      " fields, expected " + std::to_string(n_cols));
    for (std::size_t c = 0; c < n_cols; ++c) cells[c][r] = trim(rec[c]);
  }

  Dataset d(n_rows);
  for (std::size_t c = 0; c < n_cols; ++c) {
    std::vector<double> values(n_rows, kNaN);
    std::vector<std::uint8_t> missing(n_rows, 0);
    std::size_t numeric = 0, textual = 0, first_text = 0, first_num = 0;
    for (std::size_t r = 0; r < n_rows; ++r) {
      std::string_view s = cells[c][r];
      if (na_tokens.count(std::string(s))) {
        missing[r] = 1;
      } else if (parse_number(s, values[r])) {
        if (numeric++ == 0) first_num = r;
      } else {
        if (textual++ == 0) first_text = r;
      }
    }
    std::vector<std::string> categories;
    if (textual > 0 && numeric > 0) {
      std::size_t bad = std::max(first_text, first_num);
      throw DataError("csv: column '" + header[c] + "' mixes numeric and non-numeric values (line " +
                      std::to_string(bad + 2) + ": '" + std::string(cells[c][bad]) + "')");
    }
    if (textual > 0) {
      std::map<std::string, double> codes;
      for (std::size_t r = 0; r < n_rows; ++r)
        if (!missing[r]) codes.emplace(std::string(cells[c][r]), 0.0);
      double next = 0;
      for (auto& [label, code] : codes) {
        code = next++;
        categories.push_back(label);
      }
      for (std::size_t r = 0; r < n_rows; ++r)
        if (!missing[r]) values[r] = codes.at(std::string(cells[c][r]));
    }
    d.add_column(header[c], std::move(values), std::move(missing), std::move(categories));
  }
  return d;
}

Dataset load_csv(const std::filesystem::path& path, const std::set<std::string>& na_tokens) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_csv(ss.str(), na_tokens);
}

ClusterIndex build_cluster_index(const Dataset& d, std::span<const std::string> levels) {
  RowSet all(d.n_rows());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return build_cluster_index(d, levels, all);
}

ClusterIndex build_cluster_index(const Dataset& d, std::span<const std::string> levels,
                                 const RowSet& rows) {
  ClusterIndex index;
  for (std::size_t l = 0; l < levels.size(); ++l) {
    const std::size_t col = d.column_index(levels[l]);
    auto values = d.column(col);
    ClusterLevel level;
    level.variable = levels[l];
    std::map<double, std::size_t> slot;
    for (std::size_t r : rows) {
      if (d.is_missing(col, r))
        throw DataError("cluster variable '" + levels[l] + "' is missing on row " +
                        std::to_string(r + 1));
      slot.emplace(values[r], 0);
    }
    for (auto& [key, s] : slot) {
      s = level.keys.size();
      level.keys.push_back(key);
    }
    level.rows.resize(level.keys.size());
    level.cluster_of_row.assign(d.n_rows(), ClusterLevel::npos);
    for (std::size_t r : rows) {
      std::size_t c = slot.at(values[r]);
      level.rows[c].push_back(r);
      level.cluster_of_row[r] = c;
    }
    for (auto& rs : level.rows) std::sort(rs.begin(), rs.end());

    if (l > 0) {
      const ClusterLevel& outer = index.levels.back();
      level.parent.assign(level.size(), ClusterLevel::npos);
      for (std::size_t c = 0; c < level.size(); ++c) {
        for (std::size_t r : level.rows[c]) {
          std::size_t p = outer.cluster_of_row[r];
          if (level.parent[c] == ClusterLevel::npos) {
            level.parent[c] = p;
          } else if (level.parent[c] != p) {
            auto fmt = [](double v) {
              std::ostringstream s;
              s << v;
              return s.str();
            };
            throw DataError("broken nesting: " + levels[l] + " " + fmt(level.keys[c]) +
                            " spans " + outer.variable + " " + fmt(outer.keys[level.parent[c]]) +
                            " and " + fmt(outer.keys[p]));
          }
        }
      }
      index.levels.back().children.assign(outer.size(), {});
      for (std::size_t c = 0; c < level.size(); ++c)
        index.levels.back().children[level.parent[c]].push_back(c);
    }
    index.levels.push_back(std::move(level));
  }
  return index;
}

RowSet model_rows(const Dataset& d, std::span<const std::string> responses,
                  std::span<const std::string> covariates) {
  std::vector<std::size_t> cols;
  for (const auto& r : responses) cols.push_back(d.column_index(r));
  for (const auto& c : covariates) cols.push_back(d.column_index(c));
  RowSet rows;
  for (std::size_t i = 0; i < d.n_rows(); ++i) {
    bool ok = true;
    for (std::size_t c : cols)
      if (d.is_missing(c, i)) {
        ok = false;
        break;
      }
    if (ok) rows.push_back(i);
  }
  return rows;
}

}  // namespace merlin
