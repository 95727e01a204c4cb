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

#include <cmath>
#include <map>
#include <string>

#include "nestgen/params.hpp"

namespace nestgen {

enum class OptimizerKind { kSgd, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment accumulators for Adam; shape-congruent with the parameters.
struct OptimizerState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  std::size_t step = 0;
};

/// Applies one update in place. Parameters without an entry in `grads` are
/// left untouched.
inline void optimizer_step(ParamStore& params, const GradMap& grads, OptimizerState& state,
                           const OptimizerConfig& cfg) {
  for (const auto& [path, g] : grads) {
    const Tensor& p = params.at(path);
    if (p.shape() != g.shape())
      throw Error("gradient shape " + shape_str(g.shape()) + " does not match parameter " +
                  path + " " + shape_str(p.shape()));
    if (!g.all_finite()) throw Error("non-finite gradient for parameter " + path);
  }
  ++state.step;
  if (cfg.kind == OptimizerKind::kSgd) {
    for (const auto& [path, g] : grads) {
      Tensor& p = params.at(path);
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= cfg.lr * g[i];
    }
    return;
  }
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (const auto& [path, g] : grads) {
    Tensor& p = params.at(path);
    auto [mit, mnew] = state.m.try_emplace(path, p.shape());
    auto [vit, vnew] = state.v.try_emplace(path, p.shape());
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      p[i] -= cfg.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
    }
  }
}

}  // namespace nestgen
