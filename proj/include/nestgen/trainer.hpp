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

// Mini-batch training: plain SGD or Adam, shuffle augmentation for shuffled
// nodes, and DP-SGD with per-example clipping and Gaussian noise.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nestgen/model.hpp"
#include "nestgen/optimizer.hpp"

namespace nestgen {

class TrainError : public Error {
 public:
  TrainError(const std::string& what, std::size_t epoch, std::size_t batch)
      : Error(what), epoch(epoch), batch(batch) {}
  std::size_t epoch;
  std::size_t batch;
};

/// True when any node of the schema is a shuffled struct or set.
inline bool has_shuffled_node(const SchemaNode& s) {
  if (s.shuffled) return true;
  return std::any_of(s.children.begin(), s.children.end(), has_shuffled_node);
}

struct TrainConfig {
  std::size_t epochs = 1;
  std::size_t batch_size = 512;
  OptimizerConfig optimizer;
  /// Permutations drawn per batch for every shuffled node.
  std::size_t shuffle_passes = 1;
  std::uint64_t seed = 0;
  /// Visit the instances in a fresh seeded order every epoch.
  bool shuffle_data = true;

  void validate(const SchemaNode& schema) const {
    if (epochs < 1) throw Error("epochs must be at least 1");
    if (batch_size < 1) throw Error("batch size must be at least 1");
    if (!(optimizer.lr > 0.0) || !std::isfinite(optimizer.lr))
      throw Error("learning rate must be positive");
    if (shuffle_passes < 1) throw Error("shuffle passes must be at least 1");
    if (shuffle_passes > 1 && !has_shuffled_node(schema))
      throw Error("shuffle passes > 1 need a shuffled node in the schema");
  }
};

struct DpConfig {
  bool enabled = false;
  double clip_norm = 1e-3;
  double noise_multiplier = 1.08;

  void validate() const {
    if (!(clip_norm > 0.0) || !std::isfinite(clip_norm))
      throw Error("DP clip norm must be positive");
    if (!(noise_multiplier >= 0.0) || !std::isfinite(noise_multiplier))
      throw Error("DP noise multiplier must be non-negative");
  }
};

/// Rescales `g` in place to L2 norm at most `clip`; returns the factor used.
inline double clip_gradient(GradMap& g, double clip) {
  const double norm = grad_norm(g);
  const double scale = norm > clip ? clip / norm : 1.0;
  if (scale != 1.0)
    for (auto& [_, t] : g)
      for (double& x : t.storage()) x *= scale;
  return scale;
}

/// One DP-SGD aggregation: every per-example gradient is clipped to norm C,
/// the clipped gradients are averaged, and N(0, (sigma C / B)^2) noise is
/// added per coordinate, B being the number of examples.
inline GradMap dp_step(std::vector<GradMap> per_example, const DpConfig& dp, Rng& rng) {
  dp.validate();
  if (per_example.empty()) throw Error("DP step needs at least one example");
  const double batch = static_cast<double>(per_example.size());
  GradMap out;
  for (auto& g : per_example) {
    clip_gradient(g, dp.clip_norm);
    for (auto& [path, t] : g) {
      auto [it, fresh] = out.try_emplace(path, t.shape());
      Tensor& acc = it->second;
      if (acc.shape() != t.shape()) throw Error("per-example gradients disagree on " + path);
      for (std::size_t i = 0; i < t.size(); ++i) acc[i] += t[i] / batch;
    }
  }
  const double stddev = dp.noise_multiplier * dp.clip_norm / batch;
  if (stddev > 0.0)
    for (auto& [_, t] : out)
      for (double& x : t.storage()) x += rng.normal(0.0, stddev);
  return out;
}

/// What the run log records for each optimizer step.
struct BatchRecord {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  std::optional<DpConfig> dp;
  double batch_fraction = 0.0;
  std::size_t step = 0;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"epoch", epoch}, {"batch", batch}, {"loss", loss},
                        {"grad_norm", grad_norm}};
    if (dp)
      j["dp"] = {{"C", dp->clip_norm},
                 {"sigma", dp->noise_multiplier},
                 {"batch_fraction", batch_fraction},
                 {"steps", step}};
    else
      j["dp"] = nullptr;
    return j;
  }
};

struct FitResult {
  /// Mean loss of every batch, in order: epochs x ceil(N / batch_size).
  std::vector<double> losses;
  /// Instance-weighted mean loss of each epoch.
  std::vector<double> epoch_means;
  std::size_t steps = 0;
};

using BatchCallback = std::function<void(const BatchRecord&)>;

/// Trains `model` in place on `data`. All randomness (visit order, shuffle
/// permutations, DP noise) derives from `cfg.seed`.
inline FitResult fit(Model& model, const BatchTree& data, const TrainConfig& cfg,
                     const DpConfig& dp = {}, const BatchCallback& on_batch = {}) {
  cfg.validate(model.schema());
  if (dp.enabled) dp.validate();
  if (data.count == 0) throw Error("training data is empty");

  const Rng root(cfg.seed);
  Rng order_rng = root.split(1), shuffle_rng = root.split(2), noise_rng = root.split(3);
  ForwardOptions opts;
  if (has_shuffled_node(model.schema())) {
    opts.shuffle_rng = &shuffle_rng;
    opts.passes = cfg.shuffle_passes;
  }

  OptimizerState state;
  FitResult result;
  std::vector<std::size_t> order(data.count);
  const std::size_t batches = (data.count + cfg.batch_size - 1) / cfg.batch_size;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (cfg.shuffle_data) order_rng.shuffle(order.begin(), order.end());
    double epoch_total = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t start = b * cfg.batch_size;
      const std::size_t end = std::min(start + cfg.batch_size, data.count);
      const std::vector<std::size_t> rows(order.begin() + start, order.begin() + end);
      BatchRecord rec;
      rec.epoch = epoch;
      rec.batch = b;
      GradMap grads;
      try {
        if (dp.enabled) {
          // One example per top-level instance, each with its own backward.
          std::vector<GradMap> per_example;
          per_example.reserve(rows.size());
          double total = 0.0;
          for (std::size_t r : rows) {
            StepResult s = model.train_step(take(data, {r}), opts);
            total += s.loss;
            per_example.push_back(std::move(s.grads));
          }
          rec.loss = total / static_cast<double>(rows.size());
          grads = dp_step(std::move(per_example), dp, noise_rng);
        } else {
          StepResult s = model.train_step(take(data, rows), opts);
          rec.loss = s.loss;
          grads = std::move(s.grads);
        }
      } catch (const TrainError&) {
        throw;
      } catch (const Error& e) {
        throw TrainError("training failed at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(b) + ": " + e.what(),
                         epoch, b);
      }
      if (!std::isfinite(rec.loss))
        throw TrainError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(b),
                         epoch, b);
      rec.grad_norm = grad_norm(grads);
      optimizer_step(model.params(), grads, state, cfg.optimizer);
      ++result.steps;
      if (dp.enabled) {
        rec.dp = dp;
        rec.batch_fraction = static_cast<double>(rows.size()) / static_cast<double>(data.count);
        rec.step = result.steps;
      }
      result.losses.push_back(rec.loss);
      epoch_total += rec.loss * static_cast<double>(rows.size());
      if (on_batch) on_batch(rec);
    }
    result.epoch_means.push_back(epoch_total / static_cast<double>(data.count));
  }
  return result;
}

}  // namespace nestgen
