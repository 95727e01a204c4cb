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
#include <limits>
#include <string>
#include <vector>

#include "nestgen/autodiff.hpp"
#include "nestgen/params.hpp"

namespace nestgen {

/// Shape of every causal transformer in a codec tree.
struct TransformerConfig {
  std::size_t width = 64;
  std::size_t blocks = 2;
  std::size_t heads = 8;
  double init_std = 0.02;
  /// Learned per-slot embedding added before the first block. Off by default:
  /// order reaches the model only through the causal mask.
  bool positional = false;
  /// Make the root conditioning vector c0 a parameter instead of zeros.
  bool trainable_c0 = false;

  std::size_t head_width() const { return width / heads; }

  void validate() const {
    if (width == 0) throw Error("model width must be positive");
    if (heads == 0 || width % heads != 0)
      throw Error("width " + std::to_string(width) + " is not divisible by " +
                  std::to_string(heads) + " heads");
    if (blocks == 0) throw Error("transformer needs at least one block");
  }
};

/// Allocates the projections of one causal transformer under `prefix`:
/// `<prefix>/b<i>/{wq,wk,wv,wo}` (d x d, heads are contiguous column groups)
/// and the matching biases `{bq,bk,bv,bo}`.
inline void register_transformer(ParamStore& store, const std::string& prefix,
                                 const TransformerConfig& cfg, std::size_t max_positions,
                                 Rng& rng) {
  cfg.validate();
  const std::size_t d = cfg.width;
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const std::string p = prefix + "/b" + std::to_string(b) + "/";
    for (const char* w : {"wq", "wk", "wv", "wo"})
      store.add(p + w, random_normal(Shape{d, d}, cfg.init_std, rng));
    for (const char* w : {"bq", "bk", "bv", "bo"}) store.add(p + w, Tensor(Shape{d}));
  }
  if (cfg.positional)
    store.add(prefix + "/pos", random_normal(Shape{max_positions, d}, cfg.init_std, rng));
}

/// keep[b, h, i, j] = (j <= i) && (j < valid[b]).
inline std::vector<std::uint8_t> causal_keep_mask(std::size_t batch, std::size_t heads,
                                                  std::size_t len,
                                                  const std::vector<std::size_t>& valid) {
  std::vector<std::uint8_t> keep(batch * heads * len * len);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t v = valid.empty() ? len : std::max<std::size_t>(1, valid[b]);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < len; ++i)
        for (std::size_t j = 0; j < len; ++j)
          keep[((b * heads + h) * len + i) * len + j] = (j <= i) && (j < v);
  }
  return keep;
}

/// Reduced causal transformer: each block computes
/// y = CausalSelfAttention(x) + x, with no layer norm and no dense layer.
///
/// `x` is [B, L, d]. `valid` optionally gives the number of leading valid
/// positions per row; keys past it are masked like future positions.
inline Var causal_transformer(ParamBinder& params, const std::string& prefix,
                              const TransformerConfig& cfg, Var x,
                              const std::vector<std::size_t>& valid = {}) {
  const Tensor& xv = x.value();
  if (xv.rank() != 3) throw Error("causal_transformer expects [B, L, d] input");
  if (xv.dim(1) == 0) throw Error("causal_transformer: empty sequence");
  if (xv.dim(2) != cfg.width)
    throw Error("causal_transformer: input width " + std::to_string(xv.dim(2)) +
                " does not match model width " + std::to_string(cfg.width));
  const std::size_t batch = xv.dim(0), len = xv.dim(1), d = cfg.width;
  if (!valid.empty() && valid.size() != batch)
    throw Error("causal_transformer: valid-length count mismatch");

  if (cfg.positional) {
    Var table = params.get(prefix + "/pos");
    const std::size_t max_pos = table.value().dim(0);
    if (len > max_pos) throw Error("sequence longer than positional table");
    Var rows = ad::reshape(
        ad::slice_positions(ad::reshape(table, Shape{1, max_pos, d}), 0, len), Shape{len, d});
    x = ad::add_rows(x, rows);
  }

  const auto keep = causal_keep_mask(batch, cfg.heads, len, valid);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg.head_width()));
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const std::string p = prefix + "/b" + std::to_string(b) + "/";
    Var q = ad::add_bias(ad::matmul(x, params.get(p + "wq")), params.get(p + "bq"));
    Var k = ad::add_bias(ad::matmul(x, params.get(p + "wk")), params.get(p + "bk"));
    Var v = ad::add_bias(ad::matmul(x, params.get(p + "wv")), params.get(p + "bv"));
    Var scores = ad::scale(ad::attention_scores(q, k, cfg.heads), inv_sqrt);
    scores = ad::mask_fill(scores, keep, std::numeric_limits<double>::lowest());
    Var mixed = ad::attention_mix(ad::softmax(scores), v, cfg.heads);
    Var out = ad::add_bias(ad::matmul(mixed, params.get(p + "wo")), params.get(p + "bo"));
    x = ad::add(out, x);
  }
  return x;
}

}  // namespace nestgen
