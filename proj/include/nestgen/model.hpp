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
#include <memory>
#include <string>
#include <vector>

#include "nestgen/codec.hpp"

namespace nestgen {

/// Fitted preprocessing: category symbols and quantile tables keyed by the
/// schema path of their leaf.
struct Preprocessing {
  std::map<std::string, std::vector<std::string>> vocab;
  std::map<std::string, QuantileTable> quantiles;

  friend bool operator==(const Preprocessing&, const Preprocessing&) = default;
};

inline std::unique_ptr<Codec> compile_node(const SchemaNode& s, const std::string& path,
                                           const TransformerConfig& cfg,
                                           const Preprocessing* prep) {
  switch (s.kind) {
    case SchemaKind::kCategorical:
      if (s.cardinality == 0)
        throw SchemaError("missing cardinality for " + path +
                          " (declare it or ingest data to infer it)");
      return std::make_unique<CategoricalCodec>(s, path, cfg, s.cardinality);
    case SchemaKind::kNumerical: {
      std::optional<QuantileTable> table;
      if (prep) {
        auto it = prep->quantiles.find(path);
        if (it != prep->quantiles.end()) table = it->second;
      }
      return std::make_unique<NumericalCodec>(s, path, cfg, std::move(table));
    }
    case SchemaKind::kStruct: {
      std::vector<std::unique_ptr<Codec>> fields;
      for (const auto& f : s.children)
        fields.push_back(compile_node(f, path + "/" + f.name, cfg, prep));
      return std::make_unique<StructCodec>(s, path, cfg, std::move(fields));
    }
    case SchemaKind::kList:
      return std::make_unique<ListCodec>(
          s, path, cfg, compile_node(s.item(), path + "/" + s.item().name, cfg, prep));
  }
  throw SchemaError("unknown schema node kind");
}

/// Result of one optimization step's forward/backward pass.
struct StepResult {
  double loss = 0.0;
  GradMap grads;
};

/// A compiled codec tree with its parameters: the generic training and
/// sampling drivers every codec plugs into.
class Model {
 public:
  Model(SchemaNode schema, TransformerConfig cfg, Preprocessing prep = {},
        std::uint64_t init_seed = 0)
      : schema_(std::move(schema)), cfg_(cfg), prep_(std::move(prep)) {
    cfg_.validate();
    root_ = compile_node(schema_, schema_.name, cfg_, &prep_);
    Rng rng(init_seed);
    root_->init_params(params_, rng);
    if (cfg_.trainable_c0) params_.add(c0_path(), Tensor(Shape{1, cfg_.width}));
  }

  const SchemaNode& schema() const { return schema_; }
  const TransformerConfig& config() const { return cfg_; }
  const Preprocessing& preprocessing() const { return prep_; }
  const Codec& root() const { return *root_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  std::size_t parameter_count() const { return params_.count(); }
  std::string c0_path() const { return schema_.name + "/c0"; }

  /// Initial conditioning vector, one row per instance.
  Var initial_condition(ParamBinder& binder, std::size_t batch) const {
    if (cfg_.trainable_c0)
      return ad::gather_rows(binder.get(c0_path()), std::vector<std::int64_t>(batch, 0));
    return binder.tape().constant(Tensor(Shape{batch, cfg_.width}));
  }

  /// Per-instance loss L(D(c0, E(x).context), x); the embedding E(x).embedding
  /// is computed and discarded.
  Var instance_losses(ParamBinder& binder, const BatchTree& batch,
                      const ForwardOptions& opts = {}) const {
    if (batch.count == 0) throw Error("empty batch");
    EncodeOut enc = root_->encode(binder, batch, opts);
    DistRep rep = root_->decode(binder, initial_condition(binder, batch.count), enc.context, opts);
    return root_->loss(rep, batch);
  }

  /// Mean loss over the batch and its gradient for every parameter.
  StepResult train_step(const BatchTree& batch, const ForwardOptions& opts = {}) const {
    Tape tape;
    ParamBinder binder(tape, params_);
    Var loss = ad::mean(instance_losses(binder, batch, opts));
    const double value = loss.value().item();
    if (!std::isfinite(value)) throw Error("non-finite loss");
    tape.backward(loss);
    return {value, binder.gradients()};
  }

  /// Mean loss only.
  double evaluate(const BatchTree& batch, const ForwardOptions& opts = {}) const {
    Tape tape(false);
    ParamBinder binder(tape, params_);
    return ad::mean(instance_losses(binder, batch, opts)).value().item();
  }

  /// log P(x) for each instance under the chained decoders.
  std::vector<double> log_likelihood(const BatchTree& batch) const {
    Tape tape(false);
    ParamBinder binder(tape, params_);
    const Tensor l = instance_losses(binder, batch).value();
    std::vector<double> out(l.size());
    for (std::size_t i = 0; i < l.size(); ++i) out[i] = -l[i];
    return out;
  }

  /// Draws `count` observations, autoregressively from c0, in chunks.
  BatchTree sample_batch(Rng& rng, std::size_t count, std::size_t chunk = 1024) const {
    BatchTree all = filler_batch(schema_, count);
    for (std::size_t start = 0; start < count; start += chunk) {
      const std::size_t n = std::min(chunk, count - start);
      Tape tape(false);
      ParamBinder binder(tape, params_);
      BatchTree part = root_->sample(binder, initial_condition(binder, n), rng);
      for (std::size_t i = 0; i < n; ++i) copy_instance(all, start + i, part, i);
    }
    return all;
  }

  std::vector<Value> sample(Rng& rng, std::size_t count) const {
    return unbatch(sample_batch(rng, count));
  }

  /// Batch of observations with numerical bins assigned.
  BatchTree batch_of(std::vector<Value> values) const {
    for (Value& v : values) root_->bin(v);
    return make_batch(schema_, values);
  }

 private:
  SchemaNode schema_;
  TransformerConfig cfg_;
  Preprocessing prep_;
  std::unique_ptr<Codec> root_;
  ParamStore params_;
};

/// Parameter count of a schema compiled at the given shape.
inline std::size_t count_parameters(const SchemaNode& schema, const TransformerConfig& cfg) {
  return Model(schema, cfg).parameter_count();
}

}  // namespace nestgen
