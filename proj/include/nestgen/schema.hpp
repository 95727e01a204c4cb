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

// Declarative type language: an avro-flavored JSON dialect.
//
//   record  -> Struct      (`fields`, optional `shuffled`)
//   array   -> List        (`items`, required `max_len`, optional `shuffled`)
//   enum    -> Categorical (`cardinality` and/or `symbols`; may be left for
//                           ingestion to infer)
//   float, double, int, long -> Numerical (optional `bins`)
//
// Fields may carry their type attributes inline (`{"name": "Sex", "type":
// "enum"}`) or through a nested type object. A string type naming an earlier
// record or enum reuses that definition.

#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "nestgen/tensor.hpp"

namespace nestgen {

using json = nlohmann::json;

inline constexpr int kDefaultBins = 100;

enum class SchemaKind { kCategorical, kNumerical, kStruct, kList };

struct SchemaNode {
  SchemaKind kind = SchemaKind::kCategorical;
  std::string name;
  /// Categorical: number of categories; 0 while still to be inferred.
  std::size_t cardinality = 0;
  std::vector<std::string> symbols;
  /// Numerical.
  int bins = kDefaultBins;
  bool integer = false;
  /// Struct fields in chain-rule order, or the single List item.
  std::vector<SchemaNode> children;
  std::size_t max_len = 0;
  bool shuffled = false;

  bool is_leaf() const { return kind == SchemaKind::kCategorical || kind == SchemaKind::kNumerical; }
  const SchemaNode& item() const { return children.at(0); }
  SchemaNode& item() { return children.at(0); }

  friend bool operator==(const SchemaNode&, const SchemaNode&) = default;

  static SchemaNode categorical(std::string name, std::size_t n) {
    SchemaNode s;
    s.kind = SchemaKind::kCategorical;
    s.name = std::move(name);
    s.cardinality = n;
    return s;
  }
  static SchemaNode numerical(std::string name, int bins = kDefaultBins, bool integer = false) {
    SchemaNode s;
    s.kind = SchemaKind::kNumerical;
    s.name = std::move(name);
    s.bins = bins;
    s.integer = integer;
    return s;
  }
  static SchemaNode structure(std::string name, std::vector<SchemaNode> fields,
                              bool shuffled = false) {
    SchemaNode s;
    s.kind = SchemaKind::kStruct;
    s.name = std::move(name);
    s.children = std::move(fields);
    s.shuffled = shuffled;
    return s;
  }
  static SchemaNode list(std::string name, SchemaNode item, std::size_t max_len,
                         bool shuffled = false) {
    SchemaNode s;
    s.kind = SchemaKind::kList;
    s.name = std::move(name);
    s.children.push_back(std::move(item));
    s.max_len = max_len;
    s.shuffled = shuffled;
    return s;
  }
};

class SchemaError : public Error {
 public:
  using Error::Error;
};

namespace detail {

class SchemaParser {
 public:
  SchemaNode parse_root(const json& doc) {
    if (!doc.is_object()) throw SchemaError("schema root must be a JSON object");
    return parse_type(doc, doc.value("name", std::string("root")), "");
  }

 private:
  static std::string where(const std::string& path) { return path.empty() ? "<root>" : path; }

  SchemaNode parse_type(const json& spec, const std::string& fallback_name,
                        const std::string& path) {
    if (spec.is_string()) {
      json obj = json::object();
      obj["type"] = spec;
      return parse_object(obj, fallback_name, path);
    }
    if (!spec.is_object())
      throw SchemaError("type at " + where(path) + " must be a string or an object");
    return parse_object(spec, fallback_name, path);
  }

  SchemaNode parse_object(const json& obj, const std::string& fallback_name,
                          const std::string& path) {
    if (!obj.contains("type")) throw SchemaError("missing \"type\" at " + where(path));
    const json& type = obj["type"];
    const std::string name = obj.value("name", fallback_name);
    if (type.is_object()) {
      // Field wrapper: {"name": ..., "type": {...}}; the field name wins.
      SchemaNode node = parse_type(type, name, path);
      node.name = name;
      return node;
    }
    if (!type.is_string()) throw SchemaError("\"type\" at " + where(path) + " must be a string");
    const std::string tag = type.get<std::string>();
    const std::string here = path.empty() ? name : path + "/" + name;

    SchemaNode node;
    node.name = name;
    if (tag == "record") {
      node.kind = SchemaKind::kStruct;
      // Inline definitions may shadow an enclosing name; only references
      // back to an enclosing record form a cycle.
      const auto active = active_.insert(name);
      if (!obj.contains("fields") || !obj["fields"].is_array() || obj["fields"].empty())
        throw SchemaError("record " + here + " needs a non-empty \"fields\" array");
      std::set<std::string> seen;
      for (const json& f : obj["fields"]) {
        if (!f.is_object() || !f.contains("name"))
          throw SchemaError("every field of " + here + " needs a \"name\"");
        const std::string fname = f["name"].get<std::string>();
        if (!seen.insert(fname).second)
          throw SchemaError("duplicate field name \"" + fname + "\" in " + here);
        node.children.push_back(parse_object(f, fname, here));
      }
      node.shuffled = obj.value("shuffled", false);
      active_.erase(active);
      named_[name] = node;
    } else if (tag == "array") {
      node.kind = SchemaKind::kList;
      if (!obj.contains("items")) throw SchemaError("array " + here + " needs \"items\"");
      if (!obj.contains("max_len")) throw SchemaError("array " + here + " is missing max_len");
      const auto max_len = obj["max_len"].get<long long>();
      if (max_len < 1) throw SchemaError("array " + here + " needs max_len >= 1");
      node.max_len = static_cast<std::size_t>(max_len);
      node.children.push_back(parse_type(obj["items"], name + "_item", here));
      node.shuffled = obj.value("shuffled", false);
    } else if (tag == "enum") {
      node.kind = SchemaKind::kCategorical;
      if (obj.contains("symbols")) {
        node.symbols = obj["symbols"].get<std::vector<std::string>>();
        std::set<std::string> uniq(node.symbols.begin(), node.symbols.end());
        if (uniq.size() != node.symbols.size())
          throw SchemaError("duplicate symbols in enum " + here);
        node.cardinality = node.symbols.size();
      }
      if (obj.contains("cardinality")) {
        const auto n = obj["cardinality"].get<long long>();
        if (n < 1) throw SchemaError("enum " + here + " needs cardinality >= 1");
        if (!node.symbols.empty() && static_cast<std::size_t>(n) != node.symbols.size())
          throw SchemaError("enum " + here + ": cardinality disagrees with symbols");
        node.cardinality = static_cast<std::size_t>(n);
      }
      named_[name] = node;
    } else if (tag == "float" || tag == "double" || tag == "int" || tag == "long") {
      node.kind = SchemaKind::kNumerical;
      node.integer = (tag == "int" || tag == "long");
      node.bins = obj.value("bins", kDefaultBins);
      if (node.bins < 2) throw SchemaError("numeric " + here + " needs bins >= 2");
    } else if (active_.count(tag)) {
      throw SchemaError("cyclic type reference to " + tag + " at " + here);
    } else if (auto it = named_.find(tag); it != named_.end()) {
      node = it->second;
      node.name = name;
    } else {
      throw SchemaError("unknown type tag \"" + tag + "\" at " + here);
    }
    return node;
  }

  std::multiset<std::string> active_;
  std::map<std::string, SchemaNode> named_;
};

}  // namespace detail

inline SchemaNode parse_schema(const json& doc) {
  try {
    return detail::SchemaParser().parse_root(doc);
  } catch (const json::exception& e) {
    throw SchemaError(std::string("malformed schema attribute: ") + e.what());
  }
}

inline SchemaNode parse_schema(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw SchemaError(std::string("schema is not valid JSON: ") + e.what());
  }
  return parse_schema(doc);
}

inline SchemaNode parse_schema(const char* text) { return parse_schema(std::string(text)); }

/// Canonical JSON form; parse(serialize(s)) == s.
inline json serialize_schema(const SchemaNode& s) {
  json j;
  j["name"] = s.name;
  switch (s.kind) {
    case SchemaKind::kCategorical:
      j["type"] = "enum";
      if (s.cardinality) j["cardinality"] = s.cardinality;
      if (!s.symbols.empty()) j["symbols"] = s.symbols;
      break;
    case SchemaKind::kNumerical:
      j["type"] = s.integer ? "int" : "float";
      j["bins"] = s.bins;
      break;
    case SchemaKind::kStruct: {
      j["type"] = "record";
      json fields = json::array();
      for (const auto& f : s.children) fields.push_back(serialize_schema(f));
      j["fields"] = std::move(fields);
      if (s.shuffled) j["shuffled"] = true;
      break;
    }
    case SchemaKind::kList:
      j["type"] = "array";
      j["max_len"] = s.max_len;
      j["items"] = serialize_schema(s.item());
      if (s.shuffled) j["shuffled"] = true;
      break;
  }
  return j;
}

/// Codec-tree notation, e.g. `User: C_struct[Age: C_num, Sex: C_cat]`.
inline std::string describe_codec(const SchemaNode& s) {
  std::string out = s.name + ": ";
  switch (s.kind) {
    case SchemaKind::kCategorical:
      return out + "C_cat";
    case SchemaKind::kNumerical:
      return out + "C_num";
    case SchemaKind::kStruct: {
      out += s.shuffled ? "C_shuffled_struct[" : "C_struct[";
      for (std::size_t i = 0; i < s.children.size(); ++i) {
        if (i) out += ", ";
        out += describe_codec(s.children[i]);
      }
      return out + "]";
    }
    case SchemaKind::kList:
      return out + (s.shuffled ? "C_set[" : "C_list[") + describe_codec(s.item()) + "]";
  }
  return out;
}

/// Visits every node with its slash path (root path = root name).
template <class Fn>
void walk_schema(const SchemaNode& s, Fn&& fn, const std::string& prefix = "") {
  const std::string path = prefix.empty() ? s.name : prefix + "/" + s.name;
  fn(s, path);
  for (const auto& c : s.children) walk_schema(c, fn, path);
}

/// True when the root is a struct of primitive columns.
inline bool is_flat(const SchemaNode& s) {
  if (s.kind != SchemaKind::kStruct) return false;
  for (const auto& c : s.children)
    if (!c.is_leaf()) return false;
  return true;
}

}  // namespace nestgen
