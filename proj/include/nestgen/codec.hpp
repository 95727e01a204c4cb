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

// The codec contract. A codec is an encoder, a decoder, a sampler and a loss,
// all batched over the leading instance axis:
//
//   encode : BatchTree            -> (embedding [B, d], Context)
//   decode : (cond [B, d], Context) -> DistRep
//   loss   : (DistRep, BatchTree) -> per-instance loss [B]
//   sample : cond [B, d]          -> BatchTree of B new instances
//
// The loss is the negative log-likelihood, so exp(-loss) is the probability
// the chained decoders assign to an observation.

#pragma once

#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "nestgen/attention.hpp"
#include "nestgen/batch.hpp"
#include "nestgen/quantile.hpp"

namespace nestgen {

/// Intermediate context produced by an encoder. Primitive codecs leave it
/// empty; composite codecs keep one digest sequence per shuffle pass, the
/// permutations used, and their children's contexts.
struct Context {
  std::vector<Var> digests;
  std::vector<std::vector<std::size_t>> perms;
  std::vector<Context> children;
  std::vector<std::size_t> lengths;
  /// List only: item embeddings [B, max_len, d] before the encoder transformer.
  Var item_embeddings;

  bool trivial() const { return digests.empty() && children.empty(); }
};

struct EncodeOut {
  Var embedding;
  Context context;
};

/// Distribution representation: logits at categorical leaves, one child
/// representation per field (struct) or {length, items} (list) per pass.
struct DistRep {
  Var logits;
  std::vector<std::vector<DistRep>> passes;
  std::vector<std::vector<std::size_t>> perms;
};

/// Knobs of one forward pass.
struct ForwardOptions {
  /// Shuffle passes per shuffled node; only used when permutations are drawn.
  std::size_t passes = 1;
  /// Source of random permutations; null means identity order everywhere.
  Rng* shuffle_rng = nullptr;
  /// Overrides the permutation of node `path`: returns the order in which the
  /// first `n` elements of `instance` are fed, for shuffle pass `pass`.
  std::function<std::vector<std::size_t>(const std::string& path, std::size_t pass,
                                         std::size_t instance, std::size_t n)>
      permutation;
};

class Codec {
 public:
  Codec(SchemaNode schema, std::string path, const TransformerConfig& cfg)
      : schema_(std::move(schema)), path_(std::move(path)), cfg_(cfg) {}
  virtual ~Codec() = default;
  Codec(const Codec&) = delete;
  Codec& operator=(const Codec&) = delete;

  const SchemaNode& schema() const { return schema_; }
  const std::string& path() const { return path_; }
  std::size_t width() const { return cfg_.width; }

  virtual void init_params(ParamStore& store, Rng& rng) const = 0;
  virtual EncodeOut encode(ParamBinder& params, const BatchTree& x,
                           const ForwardOptions& opts) const = 0;
  virtual DistRep decode(ParamBinder& params, Var cond, const Context& ctx,
                         const ForwardOptions& opts) const = 0;
  virtual Var loss(const DistRep& d, const BatchTree& x) const = 0;
  virtual BatchTree sample(ParamBinder& params, Var cond, Rng& rng) const = 0;

  /// Assigns numerical bins inside an observation, in place.
  virtual void bin(Value& v) const = 0;

  virtual void visit(const std::function<void(const Codec&)>& fn) const { fn(*this); }

 protected:
  SchemaNode schema_;
  std::string path_;
  TransformerConfig cfg_;
};

namespace detail {

inline void check_cond(Var cond, std::size_t width, const std::string& path) {
  const Tensor& c = cond.value();
  if (c.rank() != 2 || c.dim(1) != width)
    throw Error("conditioning vector for " + path + " has shape " + shape_str(c.shape()) +
                ", expected [B, " + std::to_string(width) + "]");
}

/// Inverse-CDF draw from softmax(logits row) with one uniform.
inline std::size_t draw_category(const double* logits, std::size_t n, Rng& rng) {
  const double m = *std::max_element(logits, logits + n);
  std::vector<double> p(n);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) s += (p[j] = std::exp(logits[j] - m));
  const double u = rng.uniform() * s;
  double acc = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    acc += p[j];
    if (u < acc) return j;
  }
  return n - 1;
}

inline std::vector<std::size_t> invert(const std::vector<std::size_t>& perm, std::size_t len) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t b = 0; b < perm.size() / len; ++b)
    for (std::size_t p = 0; p < len; ++p) inv[b * len + perm[b * len + p]] = p;
  return inv;
}

inline bool is_identity(const std::vector<std::size_t>& perm, std::size_t len) {
  for (std::size_t i = 0; i < perm.size(); ++i)
    if (perm[i] != i % len) return false;
  return true;
}

/// Per-pass permutations [B * len] for a shuffled node. Only the first
/// `valid[b]` slots of each row move.
inline std::vector<std::vector<std::size_t>> draw_perms(const ForwardOptions& opts,
                                                        const std::string& path, bool shuffled,
                                                        std::size_t batch, std::size_t len,
                                                        const std::vector<std::size_t>& valid) {
  const bool active = shuffled && (opts.shuffle_rng || opts.permutation);
  const std::size_t passes = active ? std::max<std::size_t>(1, opts.passes) : 1;
  std::vector<std::vector<std::size_t>> out(passes, std::vector<std::size_t>(batch * len));
  for (std::size_t p = 0; p < passes; ++p) {
    auto& perm = out[p];
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t n = valid.empty() ? len : valid[b];
      std::size_t* row = perm.data() + b * len;
      std::iota(row, row + len, std::size_t{0});
      if (!active || n < 2) continue;
      if (opts.permutation) {
        const auto forced = opts.permutation(path, p, b, n);
        std::vector<std::uint8_t> seen(n, 0);
        if (forced.size() != n) throw Error("invalid permutation for " + path);
        for (std::size_t i = 0; i < n; ++i) {
          if (forced[i] >= n || seen[forced[i]]) throw Error("invalid permutation for " + path);
          seen[forced[i]] = 1;
          row[i] = forced[i];
        }
      } else {
        opts.shuffle_rng->shuffle(row, row + n);
      }
    }
  }
  return out;
}

inline Var as_sequence(Var rows) {
  const Tensor& v = rows.value();
  return ad::reshape(rows, Shape{v.dim(0), 1, v.dim(1)});
}

inline Var position(Var seq, std::size_t p) {
  const Tensor& v = seq.value();
  return ad::reshape(ad::slice_positions(seq, p, 1), Shape{v.dim(0), v.dim(2)});
}

/// Stacks per-instance losses [B] into [B, n, 1].
inline Var stack_losses(const std::vector<Var>& losses) {
  std::vector<Var> parts;
  for (Var l : losses)
    parts.push_back(ad::reshape(l, Shape{l.value().size(), 1, 1}));
  return ad::concat_positions(parts);
}

/// Rows of a [B, d] tensor, gathered.
inline Tensor take_rows(const Tensor& t, const std::vector<std::size_t>& rows) {
  const std::size_t d = t.dim(1);
  Tensor out(Shape{rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(t.data() + rows[i] * d, d, out.data() + i * d);
  return out;
}

}  // namespace detail

// --------------------------------------------------------------------------
// Categorical

/// Embedding matrix W [n, d]: encode is a row lookup, decode projects the
/// conditioning vector onto the rows (logits = c W^T), the loss is the
/// cross-entropy of the logits.
class CategoricalCodec : public Codec {
 public:
  CategoricalCodec(SchemaNode schema, std::string path, const TransformerConfig& cfg,
                   std::size_t n)
      : Codec(std::move(schema), std::move(path), cfg), n_(n) {
    if (n_ < 1) throw Error("categorical " + path_ + " needs at least one category");
  }

  std::size_t categories() const { return n_; }
  std::string weight_path() const { return path_ + "/W"; }

  void init_params(ParamStore& store, Rng& rng) const override {
    store.add(weight_path(), random_normal(Shape{n_, width()}, cfg_.init_std, rng));
  }

  EncodeOut encode(ParamBinder& params, const BatchTree& x, const ForwardOptions&) const override {
    return {ad::gather_rows(params.get(weight_path()), x.index), {}};
  }

  DistRep decode(ParamBinder& params, Var cond, const Context&,
                 const ForwardOptions&) const override {
    detail::check_cond(cond, width(), path_);
    DistRep d;
    d.logits = ad::matmul_nt(cond, params.get(weight_path()));
    return d;
  }

  Var loss(const DistRep& d, const BatchTree& x) const override {
    return ad::cross_entropy(d.logits, x.index);
  }

  BatchTree sample(ParamBinder& params, Var cond, Rng& rng) const override {
    const Tensor logits = decode(params, cond, {}, {}).logits.value();
    BatchTree out = filler_batch(schema_, logits.dim(0));
    for (std::size_t b = 0; b < out.count; ++b)
      out.index[b] = static_cast<std::int64_t>(
          detail::draw_category(logits.data() + b * n_, n_, rng));
    return out;
  }

  void bin(Value&) const override {}

 private:
  std::size_t n_;
};

// --------------------------------------------------------------------------
// Numerical

/// Quantile binning around a categorical codec over the bins. Sampling draws
/// a bin, then a uniform value inside [q_i, q_{i+1}].
class NumericalCodec : public Codec {
 public:
  NumericalCodec(SchemaNode schema, std::string path, const TransformerConfig& cfg,
                 std::optional<QuantileTable> table)
      : Codec(std::move(schema), std::move(path), cfg),
        bins_(SchemaNode::categorical(schema_.name, static_cast<std::size_t>(schema_.bins)),
              path_, cfg, static_cast<std::size_t>(schema_.bins)),
        table_(std::move(table)) {
    if (table_ && table_->bins() != static_cast<std::size_t>(schema_.bins))
      throw Error("quantile table for " + path_ + " has " + std::to_string(table_->bins()) +
                  " entries, schema declares " + std::to_string(schema_.bins) + " bins");
  }

  const QuantileTable& table() const {
    if (!table_) throw Error("numerical codec " + path_ + " has no fitted quantiles");
    return *table_;
  }

  void init_params(ParamStore& store, Rng& rng) const override { bins_.init_params(store, rng); }

  EncodeOut encode(ParamBinder& params, const BatchTree& x,
                   const ForwardOptions& opts) const override {
    return bins_.encode(params, x, opts);
  }
  DistRep decode(ParamBinder& params, Var cond, const Context& ctx,
                 const ForwardOptions& opts) const override {
    return bins_.decode(params, cond, ctx, opts);
  }
  Var loss(const DistRep& d, const BatchTree& x) const override { return bins_.loss(d, x); }

  BatchTree sample(ParamBinder& params, Var cond, Rng& rng) const override {
    BatchTree out = bins_.sample(params, cond, rng);
    out.kind = SchemaKind::kNumerical;
    out.number.assign(out.count, 0.0);
    const QuantileTable& t = table();
    for (std::size_t b = 0; b < out.count; ++b) {
      const auto [lo, hi] = t.interval(static_cast<std::size_t>(out.index[b]));
      double x = lo == hi ? lo : rng.uniform(lo, hi);
      if (t.integer_mode) x = std::round(x);
      out.number[b] = x;
    }
    return out;
  }

  void bin(Value& v) const override {
    if (!std::isfinite(v.number)) throw Error("non-finite value for numeric " + path_);
    v.index = static_cast<std::int64_t>(table().encode(v.number));
  }

 private:
  CategoricalCodec bins_;
  std::optional<QuantileTable> table_;
};

// --------------------------------------------------------------------------
// Struct

/// Chain-rule composition of field codecs through two causal transformers:
/// H^E digests the field embeddings, H^D turns (c, h_1^E .. h_{n-1}^E) into
/// one conditioning vector per field.
class StructCodec : public Codec {
 public:
  StructCodec(SchemaNode schema, std::string path, const TransformerConfig& cfg,
              std::vector<std::unique_ptr<Codec>> fields)
      : Codec(std::move(schema), std::move(path), cfg), fields_(std::move(fields)) {
    if (fields_.empty()) throw Error("struct " + path_ + " needs at least one field");
  }

  std::size_t arity() const { return fields_.size(); }
  const Codec& field(std::size_t k) const { return *fields_.at(k); }
  bool shuffled() const { return schema_.shuffled; }
  std::string encoder_prefix() const { return path_ + "/enc"; }
  std::string decoder_prefix() const { return path_ + "/dec"; }

  void init_params(ParamStore& store, Rng& rng) const override {
    register_transformer(store, encoder_prefix(), cfg_, arity(), rng);
    register_transformer(store, decoder_prefix(), cfg_, arity(), rng);
    for (const auto& f : fields_) f->init_params(store, rng);
  }

  EncodeOut encode(ParamBinder& params, const BatchTree& x,
                   const ForwardOptions& opts) const override {
    if (x.kind != SchemaKind::kStruct || x.children.size() != arity())
      throw Error("batch does not match struct " + path_);
    const std::size_t n = arity();
    EncodeOut out;
    std::vector<Var> embeddings;
    for (std::size_t k = 0; k < n; ++k) {
      EncodeOut child = fields_[k]->encode(params, x.children[k], opts);
      embeddings.push_back(child.embedding);
      out.context.children.push_back(std::move(child.context));
    }
    Var stacked = ad::stack_positions(embeddings);
    out.context.perms = detail::draw_perms(opts, path_, shuffled(), x.count, n, {});
    for (const auto& perm : out.context.perms) {
      Var in = detail::is_identity(perm, n) ? stacked : ad::gather_positions(stacked, perm, n);
      out.context.digests.push_back(causal_transformer(params, encoder_prefix(), cfg_, in));
    }
    out.embedding = detail::position(out.context.digests[0], n - 1);
    return out;
  }

  DistRep decode(ParamBinder& params, Var cond, const Context& ctx,
                 const ForwardOptions& opts) const override {
    detail::check_cond(cond, width(), path_);
    if (ctx.children.size() != arity() || ctx.digests.empty())
      throw Error("context arity does not match struct " + path_);
    const std::size_t n = arity();
    DistRep rep;
    rep.perms = ctx.perms;
    for (std::size_t p = 0; p < ctx.digests.size(); ++p) {
      Var in = detail::as_sequence(cond);
      if (n > 1) in = ad::concat_positions({in, ad::slice_positions(ctx.digests[p], 0, n - 1)});
      Var outs = causal_transformer(params, decoder_prefix(), cfg_, in);
      const auto& perm = ctx.perms[p];
      if (!detail::is_identity(perm, n))
        outs = ad::gather_positions(outs, detail::invert(perm, n), n);
      std::vector<DistRep> children;
      for (std::size_t k = 0; k < n; ++k)
        children.push_back(fields_[k]->decode(params, detail::position(outs, k),
                                              ctx.children[k], opts));
      rep.passes.push_back(std::move(children));
    }
    return rep;
  }

  Var loss(const DistRep& d, const BatchTree& x) const override {
    const std::size_t n = arity();
    if (x.children.size() != n) throw Error("batch does not match struct " + path_);
    Var total;
    for (std::size_t p = 0; p < d.passes.size(); ++p) {
      if (d.passes[p].size() != n) throw Error("representation does not match struct " + path_);
      std::vector<Var> losses;
      for (std::size_t k = 0; k < n; ++k)
        losses.push_back(fields_[k]->loss(d.passes[p][k], x.children[k]));
      Var stacked = detail::stack_losses(losses);
      const auto& perm = d.perms[p];
      // Summed in the order the fields were fed.
      if (!detail::is_identity(perm, n)) stacked = ad::gather_positions(stacked, perm, n);
      Var l = ad::row_sum(ad::reshape(stacked, Shape{x.count, n}));
      total = p == 0 ? l : ad::add(total, l);
    }
    if (d.passes.size() > 1) total = ad::scale(total, 1.0 / static_cast<double>(d.passes.size()));
    return total;
  }

  BatchTree sample(ParamBinder& params, Var cond, Rng& rng) const override {
    detail::check_cond(cond, width(), path_);
    Tape& tape = *cond.tape;
    const std::size_t batch = cond.value().dim(0);
    BatchTree out = filler_batch(schema_, batch);
    std::vector<Var> sampled;  // embeddings of fields drawn so far
    for (std::size_t k = 0; k < arity(); ++k) {
      Var in = detail::as_sequence(cond);
      if (k > 0) {
        Var digests = causal_transformer(params, encoder_prefix(), cfg_,
                                         ad::stack_positions(sampled));
        in = ad::concat_positions({in, digests});
      }
      Var outs = causal_transformer(params, decoder_prefix(), cfg_, in);
      out.children[k] = fields_[k]->sample(params, detail::position(outs, k), rng);
      if (k + 1 < arity()) {
        Var e = fields_[k]->encode(params, out.children[k], {}).embedding;
        sampled.push_back(tape.constant(e.value()));
      }
    }
    return out;
  }

  void bin(Value& v) const override {
    if (v.children.size() != arity()) throw Error("value does not match struct " + path_);
    for (std::size_t k = 0; k < arity(); ++k) fields_[k]->bin(v.children[k]);
  }

  void visit(const std::function<void(const Codec&)>& fn) const override {
    fn(*this);
    for (const auto& f : fields_) f->visit(fn);
  }

 private:
  std::vector<std::unique_ptr<Codec>> fields_;
};

// --------------------------------------------------------------------------
// List

/// Length codec (categorical over 0..max_len) followed by the items through
/// H^E / H^D. Items past each row's length are padding: masked out of the
/// attention and out of the loss.
class ListCodec : public Codec {
 public:
  ListCodec(SchemaNode schema, std::string path, const TransformerConfig& cfg,
            std::unique_ptr<Codec> item)
      : Codec(std::move(schema), std::move(path), cfg),
        length_(SchemaNode::categorical("len", schema_.max_len + 1), path_ + "/len", cfg,
                schema_.max_len + 1),
        item_(std::move(item)) {
    if (schema_.max_len < 1) throw Error("list " + path_ + " needs max_len >= 1");
  }

  std::size_t max_len() const { return schema_.max_len; }
  bool shuffled() const { return schema_.shuffled; }
  const Codec& item() const { return *item_; }
  const CategoricalCodec& length_codec() const { return length_; }
  std::string encoder_prefix() const { return path_ + "/enc"; }
  std::string decoder_prefix() const { return path_ + "/dec"; }

  void init_params(ParamStore& store, Rng& rng) const override {
    register_transformer(store, encoder_prefix(), cfg_, max_len() + 1, rng);
    register_transformer(store, decoder_prefix(), cfg_, max_len() + 1, rng);
    length_.init_params(store, rng);
    item_->init_params(store, rng);
  }

  EncodeOut encode(ParamBinder& params, const BatchTree& x,
                   const ForwardOptions& opts) const override {
    if (x.kind != SchemaKind::kList || x.max_len != max_len())
      throw Error("batch does not match list " + path_);
    const std::size_t batch = x.count, len = max_len(), d = width();
    for (std::size_t m : x.lengths)
      if (m > len) throw Error("list " + path_ + " longer than max_len");

    EncodeOut out;
    EncodeOut len_enc = length_.encode(params, length_batch(x), opts);
    EncodeOut item_enc = item_->encode(params, x.item(), opts);
    Var items = ad::reshape(item_enc.embedding, Shape{batch, len, d});
    out.context.children.push_back(std::move(len_enc.context));
    out.context.children.push_back(std::move(item_enc.context));
    out.context.item_embeddings = items;
    out.context.lengths = x.lengths;

    const auto valid = valid_positions(x.lengths);
    out.context.perms = detail::draw_perms(opts, path_, shuffled(), batch, len, x.lengths);
    Var head = detail::as_sequence(len_enc.embedding);
    for (const auto& perm : out.context.perms) {
      Var body = detail::is_identity(perm, len) ? items : ad::gather_positions(items, perm, len);
      out.context.digests.push_back(causal_transformer(
          params, encoder_prefix(), cfg_, ad::concat_positions({head, body}), valid));
    }
    // Digest at position m: h_m^E, or h_len^E for an empty list.
    out.embedding = ad::select_positions(out.context.digests[0], x.lengths);
    return out;
  }

  DistRep decode(ParamBinder& params, Var cond, const Context& ctx,
                 const ForwardOptions& opts) const override {
    detail::check_cond(cond, width(), path_);
    if (ctx.children.size() != 2 || ctx.digests.empty())
      throw Error("context does not match list " + path_);
    const std::size_t batch = cond.value().dim(0), len = max_len(), d = width();
    const auto valid = valid_positions(ctx.lengths);
    DistRep rep;
    rep.perms = ctx.perms;
    for (std::size_t p = 0; p < ctx.digests.size(); ++p) {
      Var in = ad::concat_positions(
          {detail::as_sequence(cond), ad::slice_positions(ctx.digests[p], 0, len)});
      Var outs = causal_transformer(params, decoder_prefix(), cfg_, in, valid);
      std::vector<DistRep> children;
      children.push_back(length_.decode(params, detail::position(outs, 0), ctx.children[0], opts));
      Var body = ad::slice_positions(outs, 1, len);
      const auto& perm = ctx.perms[p];
      if (!detail::is_identity(perm, len))
        body = ad::gather_positions(body, detail::invert(perm, len), len);
      children.push_back(item_->decode(params, ad::reshape(body, Shape{batch * len, d}),
                                       ctx.children[1], opts));
      rep.passes.push_back(std::move(children));
    }
    return rep;
  }

  Var loss(const DistRep& d, const BatchTree& x) const override {
    const std::size_t batch = x.count, len = max_len();
    const auto keep = x.mask();
    Var total;
    for (std::size_t p = 0; p < d.passes.size(); ++p) {
      Var len_loss = length_.loss(d.passes[p][0], length_batch(x));
      Var items = ad::mask_fill(item_->loss(d.passes[p][1], x.item()), keep, 0.0);
      items = ad::reshape(items, Shape{batch, len, 1});
      const auto& perm = d.perms[p];
      // Summed in the order the items were fed.
      if (!detail::is_identity(perm, len)) items = ad::gather_positions(items, perm, len);
      Var all = ad::concat_positions({ad::reshape(len_loss, Shape{batch, 1, 1}), items});
      Var l = ad::row_sum(ad::reshape(all, Shape{batch, len + 1}));
      total = p == 0 ? l : ad::add(total, l);
    }
    if (d.passes.size() > 1) total = ad::scale(total, 1.0 / static_cast<double>(d.passes.size()));
    return total;
  }

  BatchTree sample(ParamBinder& params, Var cond, Rng& rng) const override {
    detail::check_cond(cond, width(), path_);
    Tape& tape = *cond.tape;
    const std::size_t batch = cond.value().dim(0), d = width();
    const Tensor cond_v = cond.value();

    Var first = causal_transformer(params, decoder_prefix(), cfg_, detail::as_sequence(cond));
    BatchTree lengths = length_.sample(params, detail::position(first, 0), rng);
    BatchTree out = filler_batch(schema_, batch);
    std::size_t longest = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      out.lengths[b] = static_cast<std::size_t>(lengths.index[b]);
      longest = std::max(longest, out.lengths[b]);
    }
    if (longest == 0) return out;

    const Tensor len_emb = length_.encode(params, lengths, {}).embedding.value();
    // Item embeddings drawn so far, one [B, d] tensor per position.
    std::vector<Tensor> drawn;
    for (std::size_t i = 0; i < longest; ++i) {
      std::vector<std::size_t> active;
      for (std::size_t b = 0; b < batch; ++b)
        if (i < out.lengths[b]) active.push_back(b);
      std::vector<Var> seq{tape.constant(detail::take_rows(len_emb, active))};
      for (const Tensor& e : drawn) seq.push_back(tape.constant(detail::take_rows(e, active)));
      Var digests = causal_transformer(params, encoder_prefix(), cfg_, ad::stack_positions(seq));
      Var c = tape.constant(detail::take_rows(cond_v, active));
      Var outs = causal_transformer(params, decoder_prefix(), cfg_,
                                    ad::concat_positions({detail::as_sequence(c), digests}));
      BatchTree drawn_items = item_->sample(params, detail::position(outs, i + 1), rng);
      for (std::size_t a = 0; a < active.size(); ++a)
        copy_instance(out.item(), active[a] * max_len() + i, drawn_items, a);
      if (i + 1 < longest) {
        const Tensor e = item_->encode(params, drawn_items, {}).embedding.value();
        Tensor full(Shape{batch, d});
        for (std::size_t a = 0; a < active.size(); ++a)
          std::copy_n(e.data() + a * d, d, full.data() + active[a] * d);
        drawn.push_back(std::move(full));
      }
    }
    return out;
  }

  void bin(Value& v) const override {
    if (v.children.size() > max_len())
      throw Error("list " + path_ + " has " + std::to_string(v.children.size()) +
                  " items, more than max_len " + std::to_string(max_len()));
    for (Value& c : v.children) item_->bin(c);
  }

  void visit(const std::function<void(const Codec&)>& fn) const override {
    fn(*this);
    length_.visit(fn);
    item_->visit(fn);
  }

 private:
  static BatchTree length_batch(const BatchTree& x) {
    BatchTree t;
    t.kind = SchemaKind::kCategorical;
    t.count = x.count;
    t.index.assign(x.lengths.begin(), x.lengths.end());
    return t;
  }

  /// Valid sequence positions per row: the length slot plus m items.
  static std::vector<std::size_t> valid_positions(const std::vector<std::size_t>& lengths) {
    std::vector<std::size_t> v(lengths.size());
    for (std::size_t b = 0; b < lengths.size(); ++b) v[b] = lengths[b] + 1;
    return v;
  }

  CategoricalCodec length_;
  std::unique_ptr<Codec> item_;
};

}  // namespace nestgen
