// Copyright 2026 The nestgen Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Real-vs-synthetic fidelity: per-column Wasserstein and Jensen-Shannon
// distances, the association-matrix difference, k-way marginal scores and
// per-entity consistency rules.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "nestgen/data.hpp"
#include "nestgen/quantile.hpp"
#include "nestgen/schema.hpp"

namespace nestgen {

class MetricsError : public Error {
 public:
  using Error::Error;
};

// --- tables -----------------------------------------------------------------

enum class ColumnKind { kNumeric, kCategorical };

/// One column of a flat table. Missing cells (an exploded empty list) are NaN
/// for numbers and nullopt for symbols.
struct Column {
  std::string name;
  ColumnKind kind = ColumnKind::kCategorical;
  std::vector<double> numbers;
  std::vector<std::optional<std::string>> symbols;

  std::size_t size() const { return kind == ColumnKind::kNumeric ? numbers.size() : symbols.size(); }
  bool numeric() const { return kind == ColumnKind::kNumeric; }

  /// Non-missing numbers.
  std::vector<double> present_numbers() const {
    std::vector<double> out;
    for (double x : numbers)
      if (!std::isnan(x)) out.push_back(x);
    return out;
  }
  std::vector<std::string> present_symbols() const {
    std::vector<std::string> out;
    for (const auto& s : symbols)
      if (s) out.push_back(*s);
    return out;
  }
};

struct Table {
  std::vector<Column> columns;

  std::size_t rows() const { return columns.empty() ? 0 : columns.front().size(); }
  const Column& column(const std::string& name) const {
    for (const auto& c : columns)
      if (c.name == name) return c;
    throw MetricsError("no column named " + name);
  }
};

namespace detail {

/// Partial rows produced while exploding one value: column index -> cell.
struct Cell {
  double number = std::numeric_limits<double>::quiet_NaN();
  std::optional<std::string> symbol;
};
using PartialRow = std::map<std::size_t, Cell>;

struct ColumnSpec {
  std::string name;
  ColumnKind kind;
};

/// Column layout of the exploded table: every leaf, plus a `#len` column per
/// list. Names are paths below the root.
inline void exploded_columns(const SchemaNode& s, const std::string& name,
                             std::vector<ColumnSpec>& out) {
  switch (s.kind) {
    case SchemaKind::kCategorical:
      out.push_back({name, ColumnKind::kCategorical});
      break;
    case SchemaKind::kNumerical:
      out.push_back({name, ColumnKind::kNumeric});
      break;
    case SchemaKind::kStruct:
      for (const auto& c : s.children)
        exploded_columns(c, name.empty() ? c.name : name + "/" + c.name, out);
      break;
    case SchemaKind::kList: {
      out.push_back({(name.empty() ? s.name : name) + "/#len", ColumnKind::kNumeric});
      const std::string item = name.empty() ? s.item().name : name + "/" + s.item().name;
      exploded_columns(s.item(), item, out);
      break;
    }
  }
}

inline std::size_t leaf_count(const SchemaNode& s) {
  if (s.is_leaf()) return 1;
  if (s.kind == SchemaKind::kList) return 1 + leaf_count(s.item());
  std::size_t n = 0;
  for (const auto& c : s.children) n += leaf_count(c);
  return n;
}

inline Cell leaf_cell(const SchemaNode& s, const json& v) {
  Cell c;
  if (s.kind == SchemaKind::kNumerical)
    c.number = number_of(v);
  else
    c.symbol = scalar_text(v);
  return c;
}

/// Rows of one value; column indices start at `first`. Structs take the
/// cross product of their fields' rows; a list contributes one row per item
/// (or one row of missing item cells when empty), each tagged with its length.
inline std::vector<PartialRow> explode(const SchemaNode& s, const json& v, std::size_t first) {
  switch (s.kind) {
    case SchemaKind::kCategorical:
    case SchemaKind::kNumerical:
      return {PartialRow{{first, leaf_cell(s, v)}}};
    case SchemaKind::kStruct: {
      std::vector<PartialRow> rows{PartialRow{}};
      std::size_t at = first;
      for (const auto& c : s.children) {
        const auto sub = explode(c, v.at(c.name), at);
        std::vector<PartialRow> next;
        next.reserve(rows.size() * sub.size());
        for (const auto& r : rows)
          for (const auto& q : sub) {
            PartialRow merged = r;
            merged.insert(q.begin(), q.end());
            next.push_back(std::move(merged));
          }
        rows = std::move(next);
        at += leaf_count(c);
      }
      return rows;
    }
    case SchemaKind::kList: {
      Cell len;
      len.number = static_cast<double>(v.size());
      std::vector<PartialRow> rows;
      for (const auto& item : v)
        for (auto& r : explode(s.item(), item, first + 1)) {
          r.emplace(first, len);
          rows.push_back(std::move(r));
        }
      if (rows.empty()) rows.push_back(PartialRow{{first, len}});
      return rows;
    }
  }
  return {};
}

inline Table make_table(const std::vector<ColumnSpec>& specs) {
  Table t;
  for (const auto& s : specs) t.columns.push_back(Column{s.name, s.kind, {}, {}});
  return t;
}

inline void append_row(Table& t, const PartialRow& row) {
  for (std::size_t i = 0; i < t.columns.size(); ++i) {
    Column& c = t.columns[i];
    auto it = row.find(i);
    const Cell cell = it == row.end() ? Cell{} : it->second;
    if (c.numeric())
      c.numbers.push_back(cell.number);
    else
      c.symbols.push_back(cell.symbol);
  }
}

/// Throws with the record number when a record does not fit the schema.
inline void require_conforming(const SchemaNode& schema, const std::vector<json>& records,
                               const std::string& label) {
  for (std::size_t i = 0; i < records.size(); ++i) {
    const json& v = root_value(schema, records[i], i + 1);
    try {
      const RowStatus status = check_value(schema, v, schema.name, i + 1);
      if (status == RowStatus::kNull)
        throw DataError("record " + std::to_string(i + 1) + " holds a null");
      if (status == RowStatus::kOverlength)
        throw DataError("record " + std::to_string(i + 1) + " has a list longer than max_len");
    } catch (const DataError& e) {
      throw MetricsError(label + " dataset does not conform to the schema: " + e.what());
    }
  }
}

}  // namespace detail

/// Flat view of nested records: lists are exploded (one row per item, parent
/// cells repeated) with a `<list>/#len` column holding each list's length.
/// A flat schema gives one row per record.
inline Table explode_records(const SchemaNode& schema, const std::vector<json>& records,
                             const std::string& label = "input") {
  detail::require_conforming(schema, records, label);
  std::vector<detail::ColumnSpec> specs;
  detail::exploded_columns(schema, "", specs);
  Table t = detail::make_table(specs);
  for (std::size_t i = 0; i < records.size(); ++i)
    for (const auto& row :
         detail::explode(schema, detail::root_value(schema, records[i], i + 1), 0))
      detail::append_row(t, row);
  return t;
}

/// One row per record: the leaves outside any list plus the length of every
/// top-level list. Always free of missing cells.
inline Table entity_records(const SchemaNode& schema, const std::vector<json>& records,
                            const std::string& label = "input") {
  detail::require_conforming(schema, records, label);
  Table t;
  std::vector<std::pair<std::vector<std::string>, const SchemaNode*>> leaves;
  std::function<void(const SchemaNode&, std::vector<std::string>)> collect =
      [&](const SchemaNode& s, std::vector<std::string> path) {
        if (s.kind == SchemaKind::kStruct) {
          for (const auto& c : s.children) {
            auto p = path;
            p.push_back(c.name);
            collect(c, p);
          }
          return;
        }
        leaves.emplace_back(path, &s);
        std::string name;
        for (const auto& part : path) name += (name.empty() ? "" : "/") + part;
        if (name.empty()) name = s.name;
        if (s.kind == SchemaKind::kList)
          t.columns.push_back(Column{name + "/#len", ColumnKind::kNumeric, {}, {}});
        else
          t.columns.push_back(Column{
              name, s.is_leaf() && s.kind == SchemaKind::kNumerical ? ColumnKind::kNumeric
                                                                     : ColumnKind::kCategorical,
              {}, {}});
      };
  collect(schema, {});
  for (std::size_t i = 0; i < records.size(); ++i) {
    const json& root = detail::root_value(schema, records[i], i + 1);
    for (std::size_t k = 0; k < leaves.size(); ++k) {
      const json* v = &root;
      for (const auto& part : leaves[k].first) v = &v->at(part);
      const SchemaNode& s = *leaves[k].second;
      Column& c = t.columns[k];
      if (s.kind == SchemaKind::kList)
        c.numbers.push_back(static_cast<double>(v->size()));
      else if (s.kind == SchemaKind::kNumerical)
        c.numbers.push_back(detail::leaf_cell(s, *v).number);
      else
        c.symbols.push_back(scalar_text(*v));
    }
  }
  return t;
}

// --- per-column distances ---------------------------------------------------

/// 1-D earth mover's distance between two empirical distributions, through
/// the coupling of their sorted samples (quantile functions). `normalized`
/// first maps both columns by the real column's min/max onto [0, 1].
inline double wasserstein_1d(std::vector<double> real, std::vector<double> synth,
                             bool normalized = false) {
  if (real.empty() || synth.empty()) throw MetricsError("Wasserstein distance of an empty column");
  if (normalized) {
    const auto [lo, hi] = std::minmax_element(real.begin(), real.end());
    const double min = *lo, range = *hi - *lo;
    auto rescale = [&](double x) { return range > 0.0 ? (x - min) / range : x - min; };
    for (double& x : real) x = rescale(x);
    for (double& x : synth) x = rescale(x);
  }
  std::sort(real.begin(), real.end());
  std::sort(synth.begin(), synth.end());
  const std::size_t n = real.size(), m = synth.size();
  double total = 0.0;
  std::size_t i = 0, j = 0;
  double u = 0.0;
  while (i < n && j < m) {
    // Next breakpoint of the two step quantile functions: (i+1)/n or (j+1)/m.
    const std::size_t a = (i + 1) * m, b = (j + 1) * n;
    const double next = a <= b ? static_cast<double>(i + 1) / static_cast<double>(n)
                               : static_cast<double>(j + 1) / static_cast<double>(m);
    total += std::abs(real[i] - synth[j]) * (next - u);
    u = next;
    if (a <= b) ++i;
    if (b <= a) ++j;
  }
  return total;
}

struct JensenResult {
  double distance = 0.0;    ///< sqrt of the divergence
  double divergence = 0.0;  ///< natural-log JS divergence in [0, ln 2]
};

/// Empirical frequencies of two symbol columns over their union of symbols.
inline std::pair<std::vector<double>, std::vector<double>> frequencies(
    const std::vector<std::string>& real, const std::vector<std::string>& synth) {
  std::map<std::string, std::pair<double, double>> counts;
  for (const auto& s : real) counts[s].first += 1.0;
  for (const auto& s : synth) counts[s].second += 1.0;
  std::vector<double> p, q;
  for (const auto& [_, c] : counts) {
    p.push_back(c.first / static_cast<double>(real.size()));
    q.push_back(c.second / static_cast<double>(synth.size()));
  }
  return {p, q};
}

inline JensenResult jensen_shannon(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size()) throw MetricsError("distributions over different supports");
  double js = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) js += 0.5 * p[i] * std::log(p[i] / m);
    if (q[i] > 0.0) js += 0.5 * q[i] * std::log(q[i] / m);
  }
  js = std::max(js, 0.0);
  return {std::sqrt(js), js};
}

/// Jensen-Shannon distance between the empirical frequencies of two
/// categorical columns.
inline JensenResult jensen_distance(const std::vector<std::string>& real,
                                    const std::vector<std::string>& synth) {
  if (real.empty() || synth.empty()) throw MetricsError("Jensen distance of an empty column");
  const auto [p, q] = frequencies(real, synth);
  return jensen_shannon(p, q);
}

// --- association matrices ---------------------------------------------------

namespace detail {

inline double entropy_of(const std::map<std::string, double>& counts, double n) {
  double h = 0.0;
  for (const auto& [_, c] : counts)
    if (c > 0.0) h -= (c / n) * std::log(c / n);
  return h;
}

}  // namespace detail

/// Pearson correlation; nullopt when a column is constant.
inline std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// Theil's uncertainty coefficient U(x | y) = (H(x) - H(x | y)) / H(x): the
/// fraction of x's entropy explained by y. nullopt when x is constant.
inline std::optional<double> theils_u(const std::vector<std::string>& x,
                                      const std::vector<std::string>& y) {
  const double n = static_cast<double>(x.size());
  std::map<std::string, double> cx, cy;
  std::map<std::pair<std::string, std::string>, double> cxy;
  for (std::size_t i = 0; i < x.size(); ++i) {
    cx[x[i]] += 1.0;
    cy[y[i]] += 1.0;
    cxy[{x[i], y[i]}] += 1.0;
  }
  const double hx = detail::entropy_of(cx, n);
  if (hx <= 0.0) return std::nullopt;
  double h_x_given_y = 0.0;
  for (const auto& [k, c] : cxy) h_x_given_y -= (c / n) * std::log(c / cy.at(k.second));
  return std::clamp((hx - h_x_given_y) / hx, 0.0, 1.0);
}

/// Correlation ratio eta between a categorical and a numeric column; nullopt
/// when the numeric column is constant.
inline std::optional<double> correlation_ratio(const std::vector<std::string>& cats,
                                               const std::vector<double>& ys) {
  const double n = static_cast<double>(ys.size());
  const double mean = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  std::map<std::string, std::pair<double, double>> groups;  // sum, count
  for (std::size_t i = 0; i < ys.size(); ++i) {
    groups[cats[i]].first += ys[i];
    groups[cats[i]].second += 1.0;
  }
  double between = 0.0, total = 0.0;
  for (const auto& [_, g] : groups) {
    const double d = g.first / g.second - mean;
    between += g.second * d * d;
  }
  for (double y : ys) total += (y - mean) * (y - mean);
  if (total <= 0.0) return std::nullopt;
  return std::clamp(std::sqrt(between / total), 0.0, 1.0);
}

struct AssociationMatrix {
  std::vector<std::string> names;
  std::vector<std::vector<double>> values;
};

/// Pairwise associations of a table without missing cells: Pearson for
/// numeric pairs, Theil's U (row given column) for categorical pairs and the
/// correlation ratio for mixed pairs. Undefined entries are 0 and reported
/// in `warnings`.
inline AssociationMatrix association_matrix(const Table& t, const std::string& label,
                                            std::vector<std::string>* warnings = nullptr) {
  const std::size_t n = t.columns.size();
  AssociationMatrix m;
  m.values.assign(n, std::vector<double>(n, 0.0));
  std::vector<std::vector<std::string>> syms(n);
  std::vector<std::vector<double>> nums(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Column& c = t.columns[i];
    m.names.push_back(c.name);
    if (c.numeric()) {
      nums[i] = c.present_numbers();
      if (nums[i].size() != c.size())
        throw MetricsError("association matrix needs complete columns; " + c.name + " has gaps");
    } else {
      syms[i] = c.present_symbols();
      if (syms[i].size() != c.size())
        throw MetricsError("association matrix needs complete columns; " + c.name + " has gaps");
    }
  }
  auto warn = [&](std::size_t i, std::size_t j) {
    if (warnings)
      warnings->push_back(label + ": association of " + t.columns[i].name + " and " +
                          t.columns[j].name + " is undefined (constant column); using 0");
  };
  for (std::size_t i = 0; i < n; ++i) {
    m.values[i][i] = 1.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const bool ni = t.columns[i].numeric(), nj = t.columns[j].numeric();
      std::optional<double> v;
      if (ni && nj) {
        if (j < i) continue;
        v = pearson(nums[i], nums[j]);
        if (v) m.values[j][i] = *v;
      } else if (!ni && !nj) {
        v = theils_u(syms[i], syms[j]);
      } else {
        if (j < i) continue;
        v = ni ? correlation_ratio(syms[j], nums[i]) : correlation_ratio(syms[i], nums[j]);
        if (v) m.values[j][i] = *v;
      }
      if (v)
        m.values[i][j] = *v;
      else
        warn(i, j);
    }
  }
  return m;
}

/// Frobenius norm of the difference of the two association matrices.
inline double correlation_diff(const Table& real, const Table& synth,
                               std::vector<std::string>* warnings = nullptr) {
  if (real.columns.size() != synth.columns.size())
    throw MetricsError("tables have different columns");
  const auto a = association_matrix(real, "real", warnings);
  const auto b = association_matrix(synth, "synthetic", warnings);
  if (a.names != b.names) throw MetricsError("tables have different columns");
  double s = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i)
    for (std::size_t j = 0; j < a.values.size(); ++j) {
      const double d = a.values[i][j] - b.values[i][j];
      s += d * d;
    }
  return std::sqrt(s);
}

// --- k-way marginals --------------------------------------------------------

/// Integer-coded columns shared by a real and a synthetic table.
struct CodedTables {
  std::vector<std::string> names;
  std::vector<std::vector<std::int64_t>> real;
  std::vector<std::vector<std::int64_t>> synth;
};

/// Discretizes both tables with one codebook per column: symbols by their
/// union, numbers by the nearest of `bins` quantiles of the real column.
/// Missing cells get their own code.
inline CodedTables discretize(const Table& real, const Table& synth, std::size_t bins) {
  if (real.columns.size() != synth.columns.size())
    throw MetricsError("tables have different columns");
  CodedTables out;
  for (std::size_t k = 0; k < real.columns.size(); ++k) {
    const Column& r = real.columns[k];
    const Column& s = synth.columns[k];
    if (r.name != s.name || r.kind != s.kind) throw MetricsError("tables have different columns");
    out.names.push_back(r.name);
    std::vector<std::int64_t> rc, sc;
    if (r.numeric()) {
      const auto present = r.present_numbers();
      std::optional<QuantileTable> q;
      if (!present.empty()) q = fit_quantiles(present, std::max<std::size_t>(bins, 2));
      auto code = [&](double x) -> std::int64_t {
        if (std::isnan(x)) return -1;
        return q ? static_cast<std::int64_t>(q->encode(x)) : 0;
      };
      for (double x : r.numbers) rc.push_back(code(x));
      for (double x : s.numbers) sc.push_back(code(x));
    } else {
      std::map<std::string, std::int64_t> book;
      for (const auto& v : r.symbols)
        if (v) book.emplace(*v, 0);
      for (const auto& v : s.symbols)
        if (v) book.emplace(*v, 0);
      std::int64_t next = 0;
      for (auto& [_, c] : book) c = next++;
      auto code = [&](const std::optional<std::string>& v) { return v ? book.at(*v) : -1; };
      for (const auto& v : r.symbols) rc.push_back(code(v));
      for (const auto& v : s.symbols) sc.push_back(code(v));
    }
    out.real.push_back(std::move(rc));
    out.synth.push_back(std::move(sc));
  }
  return out;
}

/// Total variation distance between the empirical joints of the given columns.
inline double marginal_tvd(const CodedTables& t, const std::vector<std::size_t>& cols) {
  const std::size_t n = t.real.empty() ? 0 : t.real[0].size();
  const std::size_t m = t.synth.empty() ? 0 : t.synth[0].size();
  if (n == 0 || m == 0) throw MetricsError("marginal of an empty table");
  std::map<std::vector<std::int64_t>, std::pair<std::size_t, std::size_t>> cells;
  std::vector<std::int64_t> key(cols.size());
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < cols.size(); ++c) key[c] = t.real[cols[c]][r];
    ++cells[key].first;
  }
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < cols.size(); ++c) key[c] = t.synth[cols[c]][r];
    ++cells[key].second;
  }
  double l1 = 0.0;
  for (const auto& [_, c] : cells)
    l1 += std::abs(static_cast<double>(c.first) / static_cast<double>(n) -
                   static_cast<double>(c.second) / static_cast<double>(m));
  return 0.5 * l1;
}

struct MarginalResult {
  double score = 0.0;     ///< 1000 * (1 - mean TVD)
  double mean_tvd = 0.0;  ///< raw mean total variation distance
  std::size_t k = 0;
  std::vector<std::vector<std::string>> subsets;
};

/// Average TVD over `n_subsets` k-column subsets drawn uniformly without
/// repetition (all subsets when there are no more than `n_subsets`), remapped
/// to a score in [0, 1000].
inline MarginalResult marginal_score(const CodedTables& t, std::size_t k, std::size_t n_subsets,
                                     std::uint64_t seed) {
  const std::size_t cols = t.names.size();
  if (k < 1) throw MetricsError("marginal order k must be at least 1");
  if (cols < k)
    throw MetricsError("marginal score needs at least " + std::to_string(k) + " columns, got " +
                       std::to_string(cols));
  if (n_subsets < 1) throw MetricsError("marginal score needs at least one subset");
  // Number of subsets, saturating once it exceeds the request.
  double total = 1.0;
  for (std::size_t i = 0; i < k; ++i)
    total = total * static_cast<double>(cols - i) / static_cast<double>(i + 1);
  std::vector<std::vector<std::size_t>> chosen;
  if (total <= static_cast<double>(n_subsets)) {
    std::vector<bool> pick(cols, false);
    std::fill(pick.begin(), pick.begin() + static_cast<std::ptrdiff_t>(k), true);
    do {
      std::vector<std::size_t> s;
      for (std::size_t i = 0; i < cols; ++i)
        if (pick[i]) s.push_back(i);
      chosen.push_back(s);
    } while (std::prev_permutation(pick.begin(), pick.end()));
  } else {
    Rng rng(seed);
    std::set<std::vector<std::size_t>> seen;
    std::vector<std::size_t> all(cols);
    std::iota(all.begin(), all.end(), std::size_t{0});
    while (chosen.size() < n_subsets) {
      rng.shuffle(all.begin(), all.end());
      std::vector<std::size_t> s(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k));
      std::sort(s.begin(), s.end());
      if (seen.insert(s).second) chosen.push_back(s);
    }
  }
  MarginalResult out;
  out.k = k;
  double sum = 0.0;
  for (const auto& s : chosen) {
    sum += marginal_tvd(t, s);
    std::vector<std::string> names;
    for (std::size_t c : s) names.push_back(t.names[c]);
    out.subsets.push_back(names);
  }
  out.mean_tvd = sum / static_cast<double>(chosen.size());
  out.score = 1000.0 * (1.0 - out.mean_tvd);
  return out;
}

// --- consistency rules ------------------------------------------------------

/// A per-entity rule over the records of one list:
///  - constant-field: `field` takes one value across the entity's records;
///  - at-most-one-per-key: no two records share the value of `key`;
///  - monotone-field: `field` never decreases along the records, ordered by
///    `by` when given (numbers, or the order of `levels` for symbols);
///  - derived-constant: `field` minus `minus` is constant (e.g. year - age).
struct ConsistencyRule {
  std::string name;
  std::string type;
  std::string list;  ///< path of the list below the root; empty for a list root
  std::string field;
  std::string key;
  std::string by;
  std::string minus;
  std::vector<std::string> levels;
  double tolerance = 1e-9;

  static ConsistencyRule from_json(const json& j) {
    ConsistencyRule r;
    r.type = j.at("type").get<std::string>();
    r.list = j.value("list", "");
    r.field = j.value("field", "");
    r.key = j.value("key", "");
    r.by = j.value("by", "");
    r.minus = j.value("minus", "");
    r.levels = j.value("levels", std::vector<std::string>{});
    r.tolerance = j.value("tolerance", 1e-9);
    r.name = j.value("name", r.type + "(" + (r.field.empty() ? r.key : r.field) + ")");
    static const std::set<std::string> kinds = {"constant-field", "at-most-one-per-key",
                                                "monotone-field", "derived-constant"};
    if (!kinds.count(r.type)) throw MetricsError("unknown consistency rule type " + r.type);
    return r;
  }
};

inline std::vector<ConsistencyRule> parse_rules(const json& j) {
  const json& list = j.is_object() && j.contains("rules") ? j.at("rules") : j;
  if (!list.is_array()) throw MetricsError("consistency rules must be a JSON array");
  std::vector<ConsistencyRule> out;
  for (const auto& r : list) out.push_back(ConsistencyRule::from_json(r));
  return out;
}

struct ConsistencyResult {
  std::vector<std::pair<std::string, double>> rules;  ///< fraction of consistent entities
  double overall = 1.0;                               ///< fraction violating no rule
};

namespace detail {

/// Schema node of the list a rule inspects, and the record field names.
inline const SchemaNode& rule_list(const SchemaNode& schema, const std::string& list) {
  if (list.empty()) {
    if (schema.kind != SchemaKind::kList)
      throw MetricsError("rule without \"list\" needs a list-rooted schema");
    return schema;
  }
  const SchemaNode* node = &schema;
  std::size_t start = 0;
  while (start <= list.size()) {
    const std::size_t end = std::min(list.find('/', start), list.size());
    const std::string part = list.substr(start, end - start);
    const SchemaNode* next = nullptr;
    for (const auto& c : node->children)
      if (c.name == part && node->kind == SchemaKind::kStruct) next = &c;
    if (!next) throw MetricsError("rule references missing list " + list);
    node = next;
    start = end + 1;
  }
  if (node->kind != SchemaKind::kList) throw MetricsError(list + " is not a list");
  return *node;
}

inline const SchemaNode& rule_field(const SchemaNode& list, const std::string& field,
                                    const std::string& rule) {
  const SchemaNode& item = list.item();
  if (item.kind == SchemaKind::kStruct) {
    for (const auto& c : item.children)
      if (c.name == field) {
        if (!c.is_leaf()) throw MetricsError(rule + ": field " + field + " is not a leaf");
        return c;
      }
  } else if (item.name == field) {
    return item;
  }
  throw MetricsError(rule + " references missing field \"" + field + "\"");
}

inline const json& rule_records(const SchemaNode& schema, const json& record,
                                const std::string& list, std::size_t row) {
  const json* v = &root_value(schema, record, row);
  std::size_t start = 0;
  while (!list.empty() && start <= list.size()) {
    const std::size_t end = std::min(list.find('/', start), list.size());
    v = &v->at(list.substr(start, end - start));
    start = end + 1;
  }
  return *v;
}

inline const json& field_of(const SchemaNode& list, const json& item, const std::string& field) {
  return list.item().kind == SchemaKind::kStruct ? item.at(field) : item;
}

inline double as_number(const json& v, const std::vector<std::string>& levels,
                        const std::string& rule) {
  if (v.is_number()) return v.get<double>();
  const std::string t = *scalar_text(v);
  if (!levels.empty()) {
    auto it = std::find(levels.begin(), levels.end(), t);
    if (it == levels.end()) throw MetricsError(rule + ": value \"" + t + "\" is not in levels");
    return static_cast<double>(it - levels.begin());
  }
  try {
    std::size_t used = 0;
    const double x = std::stod(t, &used);
    if (used == t.size()) return x;
  } catch (const std::exception&) {
  }
  throw MetricsError(rule + ": value \"" + t + "\" is not numeric; give \"levels\"");
}

inline bool entity_consistent(const ConsistencyRule& r, const SchemaNode& list,
                              const json& items) {
  if (r.type == "constant-field") {
    std::set<std::string> values;
    for (const auto& it : items) values.insert(field_of(list, it, r.field).dump());
    return values.size() <= 1;
  }
  if (r.type == "at-most-one-per-key") {
    std::set<std::string> keys;
    for (const auto& it : items)
      if (!keys.insert(field_of(list, it, r.key).dump()).second) return false;
    return true;
  }
  if (r.type == "monotone-field") {
    std::vector<std::pair<double, double>> seq;  // (order, value)
    std::size_t pos = 0;
    for (const auto& it : items) {
      const double order = r.by.empty() ? static_cast<double>(pos)
                                        : as_number(field_of(list, it, r.by), {}, r.name);
      seq.emplace_back(order, as_number(field_of(list, it, r.field), r.levels, r.name));
      ++pos;
    }
    std::stable_sort(seq.begin(), seq.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    for (std::size_t i = 1; i < seq.size(); ++i)
      if (seq[i].second < seq[i - 1].second) return false;
    return true;
  }
  // derived-constant
  std::optional<double> first;
  for (const auto& it : items) {
    const double d = as_number(field_of(list, it, r.field), {}, r.name) -
                     as_number(field_of(list, it, r.minus), {}, r.name);
    if (!first) first = d;
    if (std::abs(d - *first) > r.tolerance) return false;
  }
  return true;
}

}  // namespace detail

/// Fraction of entities (top-level records) that satisfy each rule, and the
/// fraction that satisfy all of them.
inline ConsistencyResult consistency_check(const SchemaNode& schema,
                                           const std::vector<json>& records,
                                           const std::vector<ConsistencyRule>& rules) {
  detail::require_conforming(schema, records, "input");
  ConsistencyResult out;
  std::vector<const SchemaNode*> lists;
  for (const auto& r : rules) {
    const SchemaNode& list = detail::rule_list(schema, r.list);
    if (r.type == "at-most-one-per-key") {
      detail::rule_field(list, r.key, r.name);
    } else {
      detail::rule_field(list, r.field, r.name);
      if (r.type == "monotone-field" && !r.by.empty()) detail::rule_field(list, r.by, r.name);
      if (r.type == "derived-constant") {
        if (r.minus.empty()) throw MetricsError(r.name + " needs \"minus\"");
        detail::rule_field(list, r.minus, r.name);
      }
    }
    lists.push_back(&list);
  }
  if (records.empty()) {
    for (const auto& r : rules) out.rules.emplace_back(r.name, 1.0);
    return out;
  }
  std::vector<std::size_t> ok(rules.size(), 0);
  std::size_t all_ok = 0;
  for (std::size_t e = 0; e < records.size(); ++e) {
    bool all = true;
    for (std::size_t k = 0; k < rules.size(); ++k) {
      const json& items = detail::rule_records(schema, records[e], rules[k].list, e + 1);
      if (detail::entity_consistent(rules[k], *lists[k], items))
        ++ok[k];
      else
        all = false;
    }
    all_ok += all;
  }
  const double n = static_cast<double>(records.size());
  for (std::size_t k = 0; k < rules.size(); ++k)
    out.rules.emplace_back(rules[k].name, static_cast<double>(ok[k]) / n);
  out.overall = static_cast<double>(all_ok) / n;
  return out;
}

// --- report -----------------------------------------------------------------

struct EvalOptions {
  bool columns = true;
  bool correlation = true;
  bool marginal = true;
  std::size_t k = 4;
  std::size_t subsets = 50;
  std::uint64_t seed = 0;
  std::size_t bins = 10;
  std::vector<ConsistencyRule> rules;
};

struct ColumnReport {
  std::string name;
  ColumnKind kind;
  double wasserstein = 0.0;
  double wasserstein_normalized = 0.0;
  double jensen = 0.0;
  double js_divergence = 0.0;
};

struct MetricsReport {
  std::size_t real_rows = 0, synth_rows = 0;
  std::vector<ColumnReport> columns;
  std::optional<double> correlation_diff;
  std::optional<MarginalResult> marginal;
  std::optional<ConsistencyResult> real_consistency, synth_consistency;
  std::vector<std::string> warnings;

  json to_json() const {
    json cols = json::array();
    for (const auto& c : columns) {
      if (c.kind == ColumnKind::kNumeric)
        cols.push_back({{"name", c.name},
                        {"kind", "numeric"},
                        {"wasserstein", c.wasserstein},
                        {"wasserstein_normalized", c.wasserstein_normalized}});
      else
        cols.push_back({{"name", c.name},
                        {"kind", "categorical"},
                        {"jensen_distance", c.jensen},
                        {"js_divergence", c.js_divergence}});
    }
    json j = {{"rows", {{"real", real_rows}, {"synthetic", synth_rows}}},
              {"columns", cols},
              {"correlation_diff", correlation_diff ? json(*correlation_diff) : json(nullptr)},
              {"warnings", warnings}};
    if (marginal)
      j["marginal"] = {{"score", marginal->score},
                       {"mean_tvd", marginal->mean_tvd},
                       {"k", marginal->k},
                       {"subsets", marginal->subsets.size()}};
    else
      j["marginal"] = nullptr;
    auto consistency = [](const std::optional<ConsistencyResult>& c) -> json {
      if (!c) return nullptr;
      json rules = json::array();
      for (const auto& [name, f] : c->rules) rules.push_back({{"rule", name}, {"fraction", f}});
      return {{"rules", rules}, {"overall", c->overall}};
    };
    j["consistency"] = {{"real", consistency(real_consistency)},
                        {"synthetic", consistency(synth_consistency)}};
    return j;
  }

  std::string to_text() const {
    std::string out;
    auto line = [&](const std::string& s) { out += s + "\n"; };
    char buf[256];
    std::snprintf(buf, sizeof buf, "rows: real %zu, synthetic %zu", real_rows, synth_rows);
    line(buf);
    if (!columns.empty()) {
      std::size_t w = 6;
      for (const auto& c : columns) w = std::max(w, c.name.size());
      std::snprintf(buf, sizeof buf, "%-*s  %-11s  %12s  %12s", static_cast<int>(w), "column",
                    "kind", "distance", "normalized");
      line(buf);
      for (const auto& c : columns) {
        if (c.kind == ColumnKind::kNumeric)
          std::snprintf(buf, sizeof buf, "%-*s  %-11s  %12.6g  %12.6g", static_cast<int>(w),
                        c.name.c_str(), "wasserstein", c.wasserstein, c.wasserstein_normalized);
        else
          std::snprintf(buf, sizeof buf, "%-*s  %-11s  %12.6g  %12s", static_cast<int>(w),
                        c.name.c_str(), "jensen", c.jensen, "-");
        line(buf);
      }
    }
    if (correlation_diff) {
      std::snprintf(buf, sizeof buf, "correlation difference (Frobenius): %.6g",
                    *correlation_diff);
      line(buf);
    }
    if (marginal) {
      std::snprintf(buf, sizeof buf, "%zu-way marginal score: %.2f / 1000 (mean TVD %.6g, %zu subsets)",
                    marginal->k, marginal->score, marginal->mean_tvd, marginal->subsets.size());
      line(buf);
    }
    auto consistency = [&](const char* label, const std::optional<ConsistencyResult>& c) {
      if (!c) return;
      for (const auto& [name, f] : c->rules) {
        std::snprintf(buf, sizeof buf, "consistency (%s) %s: %.4f", label, name.c_str(), f);
        line(buf);
      }
      std::snprintf(buf, sizeof buf, "consistency (%s) overall: %.4f", label, c->overall);
      line(buf);
    };
    consistency("real", real_consistency);
    consistency("synthetic", synth_consistency);
    for (const auto& w : warnings) line("warning: " + w);
    return out;
  }
};

/// Full comparison of two record sets under one schema. Column distances
/// and marginals use the exploded table; correlations use one row per entity.
inline MetricsReport evaluate(const SchemaNode& schema, const std::vector<json>& real,
                              const std::vector<json>& synth, const EvalOptions& opts) {
  MetricsReport rep;
  const Table rt = explode_records(schema, real, "real");
  const Table st = explode_records(schema, synth, "synthetic");
  rep.real_rows = real.size();
  rep.synth_rows = synth.size();
  if (real.empty() || synth.empty()) throw MetricsError("cannot evaluate an empty dataset");
  if (opts.columns) {
    for (std::size_t k = 0; k < rt.columns.size(); ++k) {
      const Column& r = rt.columns[k];
      const Column& s = st.columns[k];
      ColumnReport c{r.name, r.kind};
      if (r.numeric()) {
        const auto a = r.present_numbers(), b = s.present_numbers();
        if (a.empty() || b.empty()) {
          rep.warnings.push_back("column " + r.name + " has no values on one side; skipped");
          continue;
        }
        c.wasserstein = wasserstein_1d(a, b);
        c.wasserstein_normalized = wasserstein_1d(a, b, true);
      } else {
        const auto a = r.present_symbols(), b = s.present_symbols();
        if (a.empty() || b.empty()) {
          rep.warnings.push_back("column " + r.name + " has no values on one side; skipped");
          continue;
        }
        const auto js = jensen_distance(a, b);
        c.jensen = js.distance;
        c.js_divergence = js.divergence;
      }
      rep.columns.push_back(c);
    }
  }
  if (opts.correlation) {
    const Table re = entity_records(schema, real, "real");
    const Table se = entity_records(schema, synth, "synthetic");
    if (re.columns.size() >= 2) rep.correlation_diff = correlation_diff(re, se, &rep.warnings);
  }
  if (opts.marginal) {
    if (rt.columns.size() < opts.k) {
      rep.warnings.push_back("marginal score skipped: fewer than k=" + std::to_string(opts.k) +
                             " columns");
    } else {
      rep.marginal = marginal_score(discretize(rt, st, opts.bins), opts.k, opts.subsets, opts.seed);
    }
  }
  if (!opts.rules.empty()) {
    rep.real_consistency = consistency_check(schema, real, opts.rules);
    rep.synth_consistency = consistency_check(schema, synth, opts.rules);
  }
  return rep;
}

}  // namespace nestgen
