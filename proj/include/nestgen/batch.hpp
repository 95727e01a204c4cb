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

#pragma once

#include <cstdint>
#include <vector>

#include "nestgen/schema.hpp"

namespace nestgen {

/// One observation as a tree mirroring the schema. Categorical leaves use
/// `index`; numerical leaves use `number` (and `index` once binned); structs
/// hold their fields in order and lists their items.
struct Value {
  std::int64_t index = 0;
  double number = 0.0;
  std::vector<Value> children;

  friend bool operator==(const Value&, const Value&) = default;

  static Value category(std::int64_t k) {
    Value v;
    v.index = k;
    return v;
  }
  static Value num(double x) {
    Value v;
    v.number = x;
    return v;
  }
  static Value of(std::vector<Value> children) {
    Value v;
    v.children = std::move(children);
    return v;
  }
};

/// Schema-transposed batch: nested containers of flat arrays, batch index
/// outermost. A list node stores `lengths[b]` and an item tree holding
/// `count * max_len` instances, padded past each length.
struct BatchTree {
  SchemaKind kind = SchemaKind::kCategorical;
  std::size_t count = 0;
  std::vector<std::int64_t> index;
  std::vector<double> number;
  std::vector<BatchTree> children;
  std::vector<std::size_t> lengths;
  std::size_t max_len = 0;

  const BatchTree& item() const { return children.at(0); }
  BatchTree& item() { return children.at(0); }

  bool valid(std::size_t b, std::size_t p) const { return p < lengths[b]; }

  /// Row-major [count, max_len] validity mask of a list node.
  std::vector<std::uint8_t> mask() const {
    std::vector<std::uint8_t> m(count * max_len, 0);
    for (std::size_t b = 0; b < count; ++b)
      for (std::size_t p = 0; p < lengths[b] && p < max_len; ++p) m[b * max_len + p] = 1;
    return m;
  }

  friend bool operator==(const BatchTree&, const BatchTree&) = default;
};

/// A batch of `count` default instances (category 0, empty lists).
inline BatchTree filler_batch(const SchemaNode& s, std::size_t count) {
  BatchTree t;
  t.kind = s.kind;
  t.count = count;
  switch (s.kind) {
    case SchemaKind::kCategorical:
      t.index.assign(count, 0);
      break;
    case SchemaKind::kNumerical:
      t.index.assign(count, 0);
      t.number.assign(count, 0.0);
      break;
    case SchemaKind::kStruct:
      for (const auto& c : s.children) t.children.push_back(filler_batch(c, count));
      break;
    case SchemaKind::kList:
      t.max_len = s.max_len;
      t.lengths.assign(count, 0);
      t.children.push_back(filler_batch(s.item(), count * s.max_len));
      break;
  }
  return t;
}

/// Copies instance `si` of `src` into instance `di` of `dst` (same schema).
inline void copy_instance(BatchTree& dst, std::size_t di, const BatchTree& src, std::size_t si) {
  switch (dst.kind) {
    case SchemaKind::kCategorical:
      dst.index[di] = src.index[si];
      break;
    case SchemaKind::kNumerical:
      dst.index[di] = src.index[si];
      dst.number[di] = src.number[si];
      break;
    case SchemaKind::kStruct:
      for (std::size_t k = 0; k < dst.children.size(); ++k)
        copy_instance(dst.children[k], di, src.children[k], si);
      break;
    case SchemaKind::kList:
      dst.lengths[di] = src.lengths[si];
      for (std::size_t p = 0; p < dst.max_len; ++p)
        copy_instance(dst.item(), di * dst.max_len + p, src.item(), si * src.max_len + p);
      break;
  }
}

/// Sub-batch made of the listed instances, in order.
inline BatchTree take(const BatchTree& src, const std::vector<std::size_t>& rows) {
  BatchTree t;
  t.kind = src.kind;
  t.count = rows.size();
  t.max_len = src.max_len;
  switch (src.kind) {
    case SchemaKind::kCategorical:
    case SchemaKind::kNumerical:
      for (std::size_t r : rows) t.index.push_back(src.index[r]);
      if (src.kind == SchemaKind::kNumerical)
        for (std::size_t r : rows) t.number.push_back(src.number[r]);
      break;
    case SchemaKind::kStruct:
      for (const auto& c : src.children) t.children.push_back(take(c, rows));
      break;
    case SchemaKind::kList: {
      std::vector<std::size_t> inner;
      inner.reserve(rows.size() * src.max_len);
      for (std::size_t r : rows) {
        t.lengths.push_back(src.lengths[r]);
        for (std::size_t p = 0; p < src.max_len; ++p) inner.push_back(r * src.max_len + p);
      }
      t.children.push_back(take(src.item(), inner));
      break;
    }
  }
  return t;
}

/// Builds a batch from observations. Numerical leaves must already carry
/// their bin in `index`.
inline void fill_instance(const SchemaNode& s, BatchTree& t, std::size_t at, const Value& v) {
  switch (s.kind) {
    case SchemaKind::kCategorical:
      if (v.index < 0 || static_cast<std::size_t>(v.index) >= s.cardinality)
        throw Error("category " + std::to_string(v.index) + " out of range for " + s.name);
      t.index[at] = v.index;
      break;
    case SchemaKind::kNumerical:
      t.index[at] = v.index;
      t.number[at] = v.number;
      break;
    case SchemaKind::kStruct:
      if (v.children.size() != s.children.size())
        throw Error("struct " + s.name + " expects " + std::to_string(s.children.size()) +
                    " fields, got " + std::to_string(v.children.size()));
      for (std::size_t k = 0; k < s.children.size(); ++k)
        fill_instance(s.children[k], t.children[k], at, v.children[k]);
      break;
    case SchemaKind::kList:
      if (v.children.size() > s.max_len)
        throw Error("list " + s.name + " has " + std::to_string(v.children.size()) +
                    " items, more than max_len " + std::to_string(s.max_len));
      t.lengths[at] = v.children.size();
      for (std::size_t p = 0; p < v.children.size(); ++p)
        fill_instance(s.item(), t.item(), at * s.max_len + p, v.children[p]);
      break;
  }
}

inline BatchTree make_batch(const SchemaNode& s, const std::vector<Value>& values) {
  BatchTree t = filler_batch(s, values.size());
  for (std::size_t i = 0; i < values.size(); ++i) fill_instance(s, t, i, values[i]);
  return t;
}

inline Value extract_instance(const BatchTree& t, std::size_t at) {
  Value v;
  switch (t.kind) {
    case SchemaKind::kCategorical:
      v.index = t.index[at];
      break;
    case SchemaKind::kNumerical:
      v.index = t.index[at];
      v.number = t.number[at];
      break;
    case SchemaKind::kStruct:
      for (const auto& c : t.children) v.children.push_back(extract_instance(c, at));
      break;
    case SchemaKind::kList:
      for (std::size_t p = 0; p < t.lengths[at]; ++p)
        v.children.push_back(extract_instance(t.item(), at * t.max_len + p));
      break;
  }
  return v;
}

inline std::vector<Value> unbatch(const BatchTree& t) {
  std::vector<Value> out;
  out.reserve(t.count);
  for (std::size_t i = 0; i < t.count; ++i) out.push_back(extract_instance(t, i));
  return out;
}

/// True when `v` has the shape `s` prescribes (arity, ranges, lengths).
inline bool conforms(const SchemaNode& s, const Value& v) {
  switch (s.kind) {
    case SchemaKind::kCategorical:
      return v.children.empty() && v.index >= 0 &&
             static_cast<std::size_t>(v.index) < s.cardinality;
    case SchemaKind::kNumerical:
      return v.children.empty() && std::isfinite(v.number);
    case SchemaKind::kStruct:
      if (v.children.size() != s.children.size()) return false;
      for (std::size_t k = 0; k < s.children.size(); ++k)
        if (!conforms(s.children[k], v.children[k])) return false;
      return true;
    case SchemaKind::kList:
      if (v.children.size() > s.max_len) return false;
      for (const auto& c : v.children)
        if (!conforms(s.item(), c)) return false;
      return true;
  }
  return false;
}

}  // namespace nestgen
