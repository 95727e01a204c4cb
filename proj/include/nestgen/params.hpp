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

#include <map>
#include <string>
#include <unordered_map>

#include "nestgen/autodiff.hpp"

namespace nestgen {

/// Every trainable tensor of a model, keyed by a stable slash path such as
/// `user/review/movie/title/W`. Ordered so that iteration is reproducible.
class ParamStore {
 public:
  using Map = std::map<std::string, Tensor>;

  void add(const std::string& path, Tensor value) {
    if (!params_.emplace(path, std::move(value)).second)
      throw Error("duplicate parameter path: " + path);
  }

  bool contains(const std::string& path) const { return params_.count(path) > 0; }

  const Tensor& at(const std::string& path) const {
    auto it = params_.find(path);
    if (it == params_.end()) throw Error("unknown parameter: " + path);
    return it->second;
  }
  Tensor& at(const std::string& path) {
    auto it = params_.find(path);
    if (it == params_.end()) throw Error("unknown parameter: " + path);
    return it->second;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
  }

  Map::const_iterator begin() const { return params_.begin(); }
  Map::const_iterator end() const { return params_.end(); }
  Map::iterator begin() { return params_.begin(); }
  Map::iterator end() { return params_.end(); }
  std::size_t size() const { return params_.size(); }

  friend bool operator==(const ParamStore&, const ParamStore&) = default;

 private:
  Map params_;
};

using GradMap = std::map<std::string, Tensor>;

/// Lends parameters to one tape. Each path becomes a single leaf however many
/// times it is requested, so shared codecs accumulate into one gradient.
class ParamBinder {
 public:
  ParamBinder(Tape& tape, const ParamStore& store) : tape_(tape), store_(store) {}

  Var get(const std::string& path) {
    auto it = bound_.find(path);
    if (it != bound_.end()) return it->second;
    Var v = tape_.leaf(store_.at(path), true);
    bound_.emplace(path, v);
    return v;
  }

  Tape& tape() { return tape_; }
  const ParamStore& store() const { return store_; }

  /// Gradients for every stored parameter after `tape().backward(...)`;
  /// parameters that were never bound get zeros.
  GradMap gradients() const {
    GradMap out;
    for (const auto& [path, value] : store_) {
      auto it = bound_.find(path);
      out.emplace(path, it == bound_.end() ? Tensor(value.shape()) : tape_.grad(it->second));
    }
    return out;
  }

 private:
  Tape& tape_;
  const ParamStore& store_;
  std::unordered_map<std::string, Var> bound_;
};

inline double grad_norm(const GradMap& grads) {
  double s = 0.0;
  for (const auto& [_, g] : grads) s += g.squared_norm();
  return std::sqrt(s);
}

}  // namespace nestgen
