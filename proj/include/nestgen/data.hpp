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

// Dataset ingestion and emission: RFC-4180 CSV for flat tables, JSON lines
// for nested records, the relational join that nests a child table under its
// parent, and the fitted preprocessing (vocabularies, quantile tables).

#pragma once

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nestgen/batch.hpp"
#include "nestgen/model.hpp"
#include "nestgen/quantile.hpp"
#include "nestgen/schema.hpp"

namespace nestgen {

class DataError : public Error {
 public:
  using Error::Error;
};

enum class Format { kCsv, kJsonl };

inline Format parse_format(const std::string& name) {
  if (name == "csv") return Format::kCsv;
  if (name == "jsonl") return Format::kJsonl;
  throw DataError("unknown format \"" + name + "\" (expected csv or jsonl)");
}

/// Format implied by a file extension; JSON lines unless it ends in `.csv`.
inline Format format_of_path(const std::string& path) {
  return path.size() >= 4 && path.compare(path.size() - 4, 4, ".csv") == 0 ? Format::kCsv
                                                                          : Format::kJsonl;
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << text;
  if (!out) throw DataError("failed writing " + path);
}

// --- CSV --------------------------------------------------------------------

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

/// RFC-4180 parser: quoted fields may hold commas, doubled quotes and line
/// breaks; CRLF and LF both end a record; a trailing newline is optional.
inline CsvTable parse_csv(std::string_view text) {
  if (text.substr(0, 3) == "\xEF\xBB\xBF") text.remove_prefix(3);
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> record;
  std::string field;
  bool quoted = false, field_started = false, closed = false;
  std::size_t line = 1;
  auto end_field = [&] {
    record.push_back(std::move(field));
    field.clear();
    field_started = false;
    closed = false;
  };
  auto end_record = [&] {
    end_field();
    records.push_back(std::move(record));
    record.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
          closed = true;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        if (field_started || !field.empty())
          throw DataError("CSV line " + std::to_string(line) + ": stray quote inside a field");
        quoted = true;
        field_started = true;
        break;
      case ',':
        end_field();
        break;
      case '\r':
        if (i + 1 < text.size() && text[i + 1] == '\n') ++i;
        [[fallthrough]];
      case '\n':
        end_record();
        ++line;
        break;
      default:
        if (closed)
          throw DataError("CSV line " + std::to_string(line) + ": text after closing quote");
        field.push_back(c);
    }
  }
  if (quoted) throw DataError("CSV: unterminated quoted field");
  if (field_started || !field.empty() || !record.empty()) end_record();

  CsvTable t;
  if (records.empty()) throw DataError("CSV input has no header row");
  t.header = std::move(records.front());
  for (std::size_t r = 1; r < records.size(); ++r) {
    // A blank line between records carries no data.
    if (records[r].size() == 1 && records[r][0].empty()) continue;
    if (records[r].size() != t.header.size())
      throw DataError("CSV row " + std::to_string(r) + " has " +
                      std::to_string(records[r].size()) + " fields, header has " +
                      std::to_string(t.header.size()));
    t.rows.push_back(std::move(records[r]));
  }
  return t;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  return out + "\"";
}

inline std::string format_csv(const CsvTable& t) {
  std::string out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out.push_back(',');
      out += csv_escape(cells[i]);
    }
    out += "\r\n";
  };
  line(t.header);
  for (const auto& r : t.rows) line(r);
  return out;
}

// --- raw records ------------------------------------------------------------

/// CSV rows as JSON objects of strings; empty cells become null.
inline std::vector<json> csv_records(const CsvTable& t) {
  std::set<std::string> seen;
  for (const auto& h : t.header)
    if (!seen.insert(h).second) throw DataError("duplicate CSV column \"" + h + "\"");
  std::vector<json> out;
  out.reserve(t.rows.size());
  for (const auto& row : t.rows) {
    json obj = json::object();
    for (std::size_t i = 0; i < row.size(); ++i)
      obj[t.header[i]] = row[i].empty() ? json(nullptr) : json(row[i]);
    out.push_back(std::move(obj));
  }
  return out;
}

inline std::vector<json> parse_jsonl(std::string_view text) {
  std::vector<json> out;
  std::size_t line = 0, start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    ++line;
    std::string_view s = text.substr(start, end - start);
    if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
    if (s.find_first_not_of(" \t") != std::string_view::npos) {
      try {
        out.push_back(json::parse(s));
      } catch (const json::parse_error& e) {
        throw DataError("JSONL line " + std::to_string(line) + ": malformed JSON (" + e.what() +
                        ")");
      }
    }
    start = end + 1;
  }
  return out;
}

inline std::vector<json> read_records(const std::string& path, Format format) {
  const std::string text = read_text(path);
  return format == Format::kCsv ? csv_records(parse_csv(text)) : parse_jsonl(text);
}

/// Text of a scalar cell; nullopt for null. Containers are malformed here.
inline std::optional<std::string> scalar_text(const json& v) {
  if (v.is_null()) return std::nullopt;
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean() || v.is_number()) return v.dump();
  throw DataError("expected a scalar, found " + std::string(v.type_name()));
}

// --- relational join --------------------------------------------------------

struct JoinReport {
  std::size_t parents = 0;
  std::size_t children = 0;
  std::size_t orphans = 0;  ///< child rows whose key matches no parent
};

/// Nests each child row under the parent sharing its key, as the array
/// `list_field` of the parent (one-to-many). Key columns are dropped from the
/// children; children keep their input order.
inline std::vector<json> join_tables(std::vector<json> parents, const std::vector<json>& children,
                                     const std::string& parent_key, const std::string& child_key,
                                     const std::string& list_field, JoinReport* report = nullptr) {
  std::map<std::string, std::size_t> by_key;
  for (std::size_t i = 0; i < parents.size(); ++i) {
    const json& p = parents[i];
    if (!p.is_object() || !p.contains(parent_key))
      throw DataError("parent record " + std::to_string(i + 1) + " lacks key column \"" +
                      parent_key + "\"");
    const auto key = scalar_text(p[parent_key]);
    if (!key) throw DataError("parent record " + std::to_string(i + 1) + " has a null key");
    if (!by_key.emplace(*key, i).second)
      throw DataError("duplicate parent key \"" + *key + "\"");
    parents[i][list_field] = json::array();
  }
  JoinReport r;
  r.parents = parents.size();
  for (std::size_t i = 0; i < children.size(); ++i) {
    const json& c = children[i];
    if (!c.is_object() || !c.contains(child_key))
      throw DataError("child record " + std::to_string(i + 1) + " lacks key column \"" +
                      child_key + "\"");
    const auto key = scalar_text(c[child_key]);
    auto it = key ? by_key.find(*key) : by_key.end();
    if (it == by_key.end()) {
      ++r.orphans;
      continue;
    }
    json item = c;
    item.erase(child_key);
    parents[it->second][list_field].push_back(std::move(item));
    ++r.children;
  }
  if (report) *report = r;
  return parents;
}

// --- ingestion --------------------------------------------------------------

/// Counts of rows dropped while ingesting.
struct IngestReport {
  std::size_t read = 0;
  std::size_t kept = 0;
  std::size_t rejected_null = 0;
  std::size_t rejected_overlength = 0;
};

namespace detail {

enum class RowStatus { kOk, kNull, kOverlength };

/// Field of `record` for node `s`; the root of a list or leaf schema may be
/// the bare JSON value itself.
inline const json& node_value(const SchemaNode& s, const json& parent, const std::string& path,
                              std::size_t row) {
  if (!parent.is_object())
    throw DataError("record " + std::to_string(row) + ": expected an object holding \"" + s.name +
                    "\" (" + path + ")");
  auto it = parent.find(s.name);
  if (it == parent.end())
    throw DataError("record " + std::to_string(row) + ": missing column \"" + s.name + "\" (" +
                    path + ")");
  return *it;
}

inline const json& root_value(const SchemaNode& s, const json& record, std::size_t row) {
  if (s.kind == SchemaKind::kStruct) return record;
  if (s.kind == SchemaKind::kList && record.is_array()) return record;
  if (s.is_leaf() && !record.is_object()) return record;
  return node_value(s, record, s.name, row);
}

/// Structural check of one value. Malformed input throws; nulls and
/// overlength lists are reported so the row can be dropped.
inline RowStatus check_value(const SchemaNode& s, const json& v, const std::string& path,
                             std::size_t row) {
  if (v.is_null()) return RowStatus::kNull;
  auto malformed = [&](const std::string& what) {
    return DataError("record " + std::to_string(row) + ": column " + path + " " + what);
  };
  switch (s.kind) {
    case SchemaKind::kCategorical:
      if (v.is_object() || v.is_array()) throw malformed("expects a scalar category");
      return RowStatus::kOk;
    case SchemaKind::kNumerical: {
      if (v.is_number()) return RowStatus::kOk;
      if (!v.is_string()) throw malformed("expects a number");
      const std::string& t = v.get_ref<const std::string&>();
      double x;
      auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), x);
      if (ec != std::errc() || p != t.data() + t.size() || !std::isfinite(x))
        throw malformed("expects a number, got \"" + t + "\"");
      return RowStatus::kOk;
    }
    case SchemaKind::kStruct: {
      if (!v.is_object()) throw malformed("expects an object");
      RowStatus status = RowStatus::kOk;
      for (const auto& c : s.children) {
        const RowStatus r = check_value(c, node_value(c, v, path + "/" + c.name, row),
                                        path + "/" + c.name, row);
        if (r != RowStatus::kOk && status == RowStatus::kOk) status = r;
      }
      return status;
    }
    case SchemaKind::kList: {
      if (!v.is_array()) throw malformed("expects an array");
      RowStatus status = v.size() > s.max_len ? RowStatus::kOverlength : RowStatus::kOk;
      const std::string ipath = path + "/" + s.item().name;
      for (const auto& item : v) {
        const RowStatus r = check_value(s.item(), item, ipath, row);
        if (r != RowStatus::kOk && status == RowStatus::kOk) status = r;
      }
      return status;
    }
  }
  return RowStatus::kOk;
}

inline double number_of(const json& v) {
  if (v.is_number()) return v.get<double>();
  const std::string& t = v.get_ref<const std::string&>();
  double x = 0.0;
  std::from_chars(t.data(), t.data() + t.size(), x);
  return x;
}

struct Observations {
  std::map<std::string, std::set<std::string>> symbols;
  std::map<std::string, std::vector<double>> numbers;
};

inline void observe(const SchemaNode& s, const json& v, const std::string& path,
                    Observations& obs) {
  switch (s.kind) {
    case SchemaKind::kCategorical:
      obs.symbols[path].insert(*scalar_text(v));
      break;
    case SchemaKind::kNumerical:
      obs.numbers[path].push_back(number_of(v));
      break;
    case SchemaKind::kStruct:
      for (const auto& c : s.children) observe(c, v.at(c.name), path + "/" + c.name, obs);
      break;
    case SchemaKind::kList:
      for (const auto& item : v) observe(s.item(), item, path + "/" + s.item().name, obs);
      break;
  }
}

inline bool is_small_index(const std::string& t, std::size_t n) {
  if (t.empty() || t.size() > 18 || (t.size() > 1 && t[0] == '0')) return false;
  if (!std::all_of(t.begin(), t.end(), [](char c) { return c >= '0' && c <= '9'; })) return false;
  return std::stoull(t) < n;
}

/// Vocabulary of one categorical column. Declared symbols win; a declared
/// cardinality with integer data in [0, n) keeps the integers as indices;
/// otherwise observed symbols sort lexicographically, padded with unseen
/// placeholders up to a declared cardinality.
inline std::vector<std::string> build_vocab(const SchemaNode& s, const std::string& path,
                                            const std::set<std::string>& seen) {
  if (!s.symbols.empty()) return s.symbols;
  if (s.cardinality > 0) {
    if (std::all_of(seen.begin(), seen.end(),
                    [&](const std::string& t) { return is_small_index(t, s.cardinality); })) {
      std::vector<std::string> v;
      for (std::size_t k = 0; k < s.cardinality; ++k) v.push_back(std::to_string(k));
      return v;
    }
    if (seen.size() > s.cardinality)
      throw DataError("column " + path + " has " + std::to_string(seen.size()) +
                      " distinct values, more than its declared cardinality " +
                      std::to_string(s.cardinality));
  }
  if (seen.empty())
    throw DataError("column " + path + " has no observations to infer its categories from");
  std::vector<std::string> v(seen.begin(), seen.end());  // std::set order is lexicographic
  for (std::size_t k = v.size(); k < s.cardinality; ++k) v.push_back("<unseen-" + std::to_string(k) + ">");
  return v;
}

struct Lookup {
  std::map<std::string, std::map<std::string, std::int64_t>> index;
};

inline Value to_value(const SchemaNode& s, const json& v, const std::string& path,
                      const Preprocessing& prep, const Lookup& lookup, std::size_t row) {
  switch (s.kind) {
    case SchemaKind::kCategorical: {
      const std::string t = *scalar_text(v);
      const auto& table = lookup.index.at(path);
      auto it = table.find(t);
      if (it == table.end())
        throw DataError("record " + std::to_string(row) + ": unknown category \"" + t +
                        "\" in column " + path);
      return Value::category(it->second);
    }
    case SchemaKind::kNumerical: {
      Value out = Value::num(number_of(v));
      out.index = static_cast<std::int64_t>(prep.quantiles.at(path).encode(out.number));
      return out;
    }
    case SchemaKind::kStruct: {
      Value out;
      for (const auto& c : s.children)
        out.children.push_back(
            to_value(c, v.at(c.name), path + "/" + c.name, prep, lookup, row));
      return out;
    }
    case SchemaKind::kList: {
      Value out;
      for (const auto& item : v)
        out.children.push_back(
            to_value(s.item(), item, path + "/" + s.item().name, prep, lookup, row));
      return out;
    }
  }
  return {};
}

/// Copy of `s` with every categorical cardinality taken from `prep`.
inline SchemaNode resolve_cardinalities(SchemaNode s, const Preprocessing& prep,
                                        const std::string& prefix = "") {
  const std::string path = prefix.empty() ? s.name : prefix + "/" + s.name;
  if (s.kind == SchemaKind::kCategorical) {
    auto it = prep.vocab.find(path);
    if (it == prep.vocab.end()) throw DataError("no vocabulary for column " + path);
    s.cardinality = it->second.size();
  }
  for (auto& c : s.children) c = resolve_cardinalities(std::move(c), prep, path);
  return s;
}

}  // namespace detail

/// Ingested dataset: observations with numeric bins assigned, the schema with
/// cardinalities resolved, and the preprocessing that produced them.
struct Dataset {
  SchemaNode schema;
  Preprocessing prep;
  std::vector<Value> values;
  IngestReport report;

  BatchTree batch() const { return make_batch(schema, values); }
};

namespace detail {

inline std::vector<std::size_t> accepted_rows(const SchemaNode& schema,
                                              const std::vector<json>& records,
                                              IngestReport& report) {
  std::vector<std::size_t> keep;
  report.read = records.size();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const json& v = root_value(schema, records[i], i + 1);
    switch (check_value(schema, v, schema.name, i + 1)) {
      case RowStatus::kOk:
        keep.push_back(i);
        break;
      case RowStatus::kNull:
        ++report.rejected_null;
        break;
      case RowStatus::kOverlength:
        ++report.rejected_overlength;
        break;
    }
  }
  report.kept = keep.size();
  return keep;
}

inline Dataset transform(const SchemaNode& schema, const std::vector<json>& records,
                         const std::vector<std::size_t>& keep, Preprocessing prep,
                         IngestReport report) {
  Lookup lookup;
  for (const auto& [path, symbols] : prep.vocab)
    for (std::size_t k = 0; k < symbols.size(); ++k)
      lookup.index[path].emplace(symbols[k], static_cast<std::int64_t>(k));
  Dataset d;
  d.schema = resolve_cardinalities(schema, prep);
  walk_schema(d.schema, [&](const SchemaNode& s, const std::string& path) {
    if (s.kind == SchemaKind::kNumerical && !prep.quantiles.count(path))
      throw DataError("no quantile table for column " + path);
  });
  d.values.reserve(keep.size());
  for (std::size_t i : keep)
    d.values.push_back(to_value(d.schema, root_value(schema, records[i], i + 1), schema.name,
                                prep, lookup, i + 1));
  d.prep = std::move(prep);
  d.report = report;
  return d;
}

}  // namespace detail

/// Fits vocabularies and quantile tables on the accepted rows, then converts
/// them. Rows holding nulls or overlength lists are dropped and counted.
inline Dataset ingest(const std::vector<json>& records, const SchemaNode& schema) {
  IngestReport report;
  const auto keep = detail::accepted_rows(schema, records, report);
  detail::Observations obs;
  for (std::size_t i : keep)
    detail::observe(schema, detail::root_value(schema, records[i], i + 1), schema.name, obs);
  Preprocessing prep;
  walk_schema(schema, [&](const SchemaNode& s, const std::string& path) {
    if (s.kind == SchemaKind::kCategorical) {
      prep.vocab[path] = detail::build_vocab(s, path, obs.symbols[path]);
    } else if (s.kind == SchemaKind::kNumerical) {
      const auto& xs = obs.numbers[path];
      if (xs.empty()) throw DataError("column " + path + " has no observations to bin");
      prep.quantiles[path] = fit_quantiles(xs, static_cast<std::size_t>(s.bins), s.integer);
    }
  });
  return detail::transform(schema, records, keep, std::move(prep), report);
}

/// Converts records with already-fitted preprocessing; a category outside the
/// vocabulary is an error naming its column.
inline Dataset ingest(const std::vector<json>& records, const SchemaNode& schema,
                      const Preprocessing& prep) {
  IngestReport report;
  const auto keep = detail::accepted_rows(schema, records, report);
  return detail::transform(schema, records, keep, prep, report);
}

inline Dataset ingest_file(const std::string& path, const SchemaNode& schema, Format format) {
  if (format == Format::kCsv && !is_flat(schema))
    throw DataError("CSV input needs a flat schema; use JSON lines for nested records");
  return ingest(read_records(path, format), schema);
}

// --- emission ---------------------------------------------------------------

inline std::string format_number(double x, bool integer) {
  if (integer) return std::to_string(static_cast<long long>(std::llround(x)));
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, p);
}

namespace detail {

/// Symbols that read back as the same JSON number are written as numbers.
inline json symbol_json(const std::string& symbol) {
  if (symbol.empty() || symbol.size() > 32) return symbol;
  const char c = symbol[0];
  if (!(c == '-' || (c >= '0' && c <= '9'))) return symbol;
  try {
    json j = json::parse(symbol);
    if (j.is_number() && j.dump() == symbol) return j;
  } catch (const json::parse_error&) {
  }
  return symbol;
}

inline json value_json(const SchemaNode& s, const Value& v, const std::string& path,
                       const Preprocessing& prep) {
  switch (s.kind) {
    case SchemaKind::kCategorical:
      return symbol_json(prep.vocab.at(path).at(static_cast<std::size_t>(v.index)));
    case SchemaKind::kNumerical:
      if (s.integer) return static_cast<long long>(std::llround(v.number));
      return v.number;
    case SchemaKind::kStruct: {
      json out = json::object();
      for (std::size_t k = 0; k < s.children.size(); ++k)
        out[s.children[k].name] =
            value_json(s.children[k], v.children[k], path + "/" + s.children[k].name, prep);
      return out;
    }
    case SchemaKind::kList: {
      json out = json::array();
      for (const auto& item : v.children)
        out.push_back(value_json(s.item(), item, path + "/" + s.item().name, prep));
      return out;
    }
  }
  return nullptr;
}

}  // namespace detail

/// JSON record of one observation: a struct root is the object itself, any
/// other root is wrapped as {root name: value}.
inline json to_record(const SchemaNode& schema, const Value& v, const Preprocessing& prep) {
  json j = detail::value_json(schema, v, schema.name, prep);
  if (schema.kind == SchemaKind::kStruct) return j;
  json wrapped = json::object();
  wrapped[schema.name] = std::move(j);
  return wrapped;
}

/// Serializes observations; CSV only for flat struct schemas.
inline std::string format_dataset(const SchemaNode& schema, const std::vector<Value>& values,
                                  const Preprocessing& prep, Format format) {
  if (format == Format::kJsonl) {
    std::string out;
    for (const auto& v : values) out += to_record(schema, v, prep).dump() + "\n";
    return out;
  }
  if (!is_flat(schema))
    throw DataError("CSV output needs a flat schema; " + schema.name +
                    " is nested, use --format jsonl");
  CsvTable t;
  for (const auto& c : schema.children) t.header.push_back(c.name);
  for (const auto& v : values) {
    std::vector<std::string> row;
    for (std::size_t k = 0; k < schema.children.size(); ++k) {
      const SchemaNode& c = schema.children[k];
      const std::string path = schema.name + "/" + c.name;
      if (c.kind == SchemaKind::kCategorical)
        row.push_back(prep.vocab.at(path).at(static_cast<std::size_t>(v.children[k].index)));
      else
        row.push_back(format_number(v.children[k].number, c.integer));
    }
    t.rows.push_back(std::move(row));
  }
  return format_csv(t);
}

inline void emit(const std::string& path, const SchemaNode& schema,
                 const std::vector<Value>& values, const Preprocessing& prep, Format format) {
  write_text(path, format_dataset(schema, values, prep, format));
}

}  // namespace nestgen
