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

// Tape-based reverse-mode automatic differentiation over dense tensors.
//
// Every op appends one node to a Tape. Node ids are allocated in creation
// order, so ids are already a topological order and `backward` replays the
// tape from the seed down to id 0.

#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cassert>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nestgen/tensor.hpp"

namespace nestgen {

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  explicit operator bool() const { return tape != nullptr; }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// With recording off no backward closures are kept (sampling mode).
  explicit Tape(bool recording) : recording_(recording) {}

  bool recording() const { return recording_; }

  Var leaf(Tensor value, bool requires_grad = true) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad && recording_;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Appends the result of an op. `backward` receives the node id and must
  /// accumulate into the grads of `inputs`.
  Var push(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
    if (!value.all_finite()) throw Error("non-finite value produced on tape");
    Node n;
    n.value = std::move(value);
    bool any = false;
    for (std::size_t in : inputs) {
      assert(in < nodes_.size());
      any = any || nodes_[in].requires_grad;
    }
    if (recording_ && any) {
      n.requires_grad = true;
      n.inputs = std::move(inputs);
      n.backward = std::move(backward);
    }
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor& value(Var v) const { return value(v.id); }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of node `id`, allocated on first use.
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape())
      n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  /// Gradient of the last backward seed with respect to `v`; zeros when `v`
  /// did not influence the seed.
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.shape() != n.value.shape()) return Tensor(n.value.shape());
    return n.grad;
  }

  void zero_grad() {
    for (Node& n : nodes_) n.grad = Tensor();
  }

  /// Reverse sweep seeded with d(seed)/d(seed) = 1.
  void backward(Var seed) {
    if (seed.tape != this) throw Error("backward seed belongs to another tape");
    if (value(seed).size() != 1)
      throw Error("backward seed must be a scalar, got shape " +
                  shape_str(value(seed).shape()));
    zero_grad();
    grad_buffer(seed.id)[0] = 1.0;
    for (std::size_t id = seed.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || !n.backward || n.grad.size() == 0) continue;
      for (std::size_t in : n.inputs) {
        if (in >= id) throw Error("cyclic tape: node depends on a later node");
      }
      n.backward(*this, id);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  bool recording_ = true;
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace ad {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

namespace detail {

inline Tape& tape_of(Var a) {
  if (!a.tape) throw Error("operation on an empty Var");
  return *a.tape;
}

inline void same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw Error("operands live on different tapes");
}

inline void accumulate(Tape& t, std::size_t id, const Tensor& g) {
  if (!t.requires_grad(id)) return;
  Tensor& dst = t.grad_buffer(id);
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

inline std::size_t last_dim(const Tensor& t) {
  if (t.rank() == 0) throw Error("expected a tensor of rank >= 1");
  return t.shape().back();
}

}  // namespace detail

inline Var reshape(Var x, Shape shape) {
  Tape& t = detail::tape_of(x);
  Tensor y = x.value().reshaped(std::move(shape));
  return t.push(std::move(y), {x.id}, [xi = x.id](Tape& tp, std::size_t self) {
    Tensor g = tp.grad_buffer(self);
    detail::accumulate(tp, xi, g);
  });
}

inline Var add(Var a, Var b) {
  detail::same_tape(a, b);
  Tape& t = detail::tape_of(a);
  if (a.shape() != b.shape())
    throw Error("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return t.push(std::move(y), {a.id, b.id}, [ai = a.id, bi = b.id](Tape& tp, std::size_t self) {
    Tensor g = tp.grad_buffer(self);
    detail::accumulate(tp, ai, g);
    detail::accumulate(tp, bi, g);
  });
}

/// x[..., n] + bias[n]
inline Var add_bias(Var x, Var bias) {
  detail::same_tape(x, bias);
  Tape& t = detail::tape_of(x);
  const std::size_t n = detail::last_dim(x.value());
  if (bias.value().size() != n) throw Error("add_bias: bias width mismatch");
  Tensor y = x.value();
  const Tensor& b = bias.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i % n];
  return t.push(std::move(y), {x.id, bias.id},
                [xi = x.id, bi = bias.id, n](Tape& tp, std::size_t self) {
                  const Tensor g = tp.grad_buffer(self);
                  detail::accumulate(tp, xi, g);
                  if (tp.requires_grad(bi)) {
                    Tensor& gb = tp.grad_buffer(bi);
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
                  }
                });
}

/// x[B, L, d] + table[L, d], broadcast over the leading axis.
inline Var add_rows(Var x, Var table) {
  detail::same_tape(x, table);
  Tape& t = detail::tape_of(x);
  const std::size_t block = table.value().size();
  if (block == 0 || x.value().size() % block != 0)
    throw Error("add_rows: table does not tile the input");
  Tensor y = x.value();
  const Tensor& tb = table.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += tb[i % block];
  return t.push(std::move(y), {x.id, table.id},
                [xi = x.id, ti = table.id, block](Tape& tp, std::size_t self) {
                  const Tensor g = tp.grad_buffer(self);
                  detail::accumulate(tp, xi, g);
                  if (tp.requires_grad(ti)) {
                    Tensor& gt = tp.grad_buffer(ti);
                    for (std::size_t i = 0; i < g.size(); ++i) gt[i % block] += g[i];
                  }
                });
}

inline Var scale(Var x, double s) {
  Tape& t = detail::tape_of(x);
  Tensor y = x.value();
  for (double& v : y.storage()) v *= s;
  return t.push(std::move(y), {x.id}, [xi = x.id, s](Tape& tp, std::size_t self) {
    Tensor g = tp.grad_buffer(self);
    for (double& v : g.storage()) v *= s;
    detail::accumulate(tp, xi, g);
  });
}

inline Var mul(Var a, Var b) {
  detail::same_tape(a, b);
  Tape& t = detail::tape_of(a);
  if (a.shape() != b.shape()) throw Error("mul: shape mismatch");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  return t.push(std::move(y), {a.id, b.id}, [ai = a.id, bi = b.id](Tape& tp, std::size_t self) {
    const Tensor g = tp.grad_buffer(self);
    const Tensor& av = tp.value(ai);
    const Tensor& bv2 = tp.value(bi);
    if (tp.requires_grad(ai)) {
      Tensor& ga = tp.grad_buffer(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad_buffer(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

/// Replaces entries where `mask` is 0 by `fill`; no gradient flows there.
inline Var mask_fill(Var x, const std::vector<std::uint8_t>& keep, double fill) {
  Tape& t = detail::tape_of(x);
  if (keep.size() != x.value().size()) throw Error("mask_fill: mask size mismatch");
  Tensor y = x.value();
  for (std::size_t i = 0; i < y.size(); ++i)
    if (!keep[i]) y[i] = fill;
  return t.push(std::move(y), {x.id}, [xi = x.id, keep](Tape& tp, std::size_t self) {
    Tensor g = tp.grad_buffer(self);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!keep[i]) g[i] = 0.0;
    detail::accumulate(tp, xi, g);
  });
}

/// x[..., K] . w[K, N]
inline Var matmul(Var x, Var w) {
  detail::same_tape(x, w);
  Tape& t = detail::tape_of(x);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (wv.rank() != 2) throw Error("matmul: weight must be rank 2");
  const std::size_t k = detail::last_dim(xv);
  if (wv.dim(0) != k)
    throw Error("matmul: width mismatch " + shape_str(xv.shape()) + " x " + shape_str(wv.shape()));
  const std::size_t rows = xv.size() / k;
  const std::size_t n = wv.dim(1);
  Shape ys = xv.shape();
  ys.back() = n;
  Tensor y(ys);
  MapMat(y.data(), rows, n).noalias() = CMapMat(xv.data(), rows, k) * CMapMat(wv.data(), k, n);
  return t.push(std::move(y), {x.id, w.id},
                [xi = x.id, wi = w.id, rows, k, n](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.grad_buffer(self);
                  CMapMat gm(g.data(), rows, n);
                  if (tp.requires_grad(xi)) {
                    Tensor& gx = tp.grad_buffer(xi);
                    MapMat(gx.data(), rows, k).noalias() +=
                        gm * CMapMat(tp.value(wi).data(), k, n).transpose();
                  }
                  if (tp.requires_grad(wi)) {
                    Tensor& gw = tp.grad_buffer(wi);
                    MapMat(gw.data(), k, n).noalias() +=
                        CMapMat(tp.value(xi).data(), rows, k).transpose() * gm;
                  }
                });
}

/// x[..., K] . w[N, K]^T
inline Var matmul_nt(Var x, Var w) {
  detail::same_tape(x, w);
  Tape& t = detail::tape_of(x);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (wv.rank() != 2) throw Error("matmul_nt: weight must be rank 2");
  const std::size_t k = detail::last_dim(xv);
  if (wv.dim(1) != k)
    throw Error("matmul_nt: width mismatch " + shape_str(xv.shape()) + " x " +
                shape_str(wv.shape()) + "^T");
  const std::size_t rows = xv.size() / k;
  const std::size_t n = wv.dim(0);
  Shape ys = xv.shape();
  ys.back() = n;
  Tensor y(ys);
  MapMat(y.data(), rows, n).noalias() =
      CMapMat(xv.data(), rows, k) * CMapMat(wv.data(), n, k).transpose();
  return t.push(std::move(y), {x.id, w.id},
                [xi = x.id, wi = w.id, rows, k, n](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.grad_buffer(self);
                  CMapMat gm(g.data(), rows, n);
                  if (tp.requires_grad(xi)) {
                    Tensor& gx = tp.grad_buffer(xi);
                    MapMat(gx.data(), rows, k).noalias() += gm * CMapMat(tp.value(wi).data(), n, k);
                  }
                  if (tp.requires_grad(wi)) {
                    Tensor& gw = tp.grad_buffer(wi);
                    MapMat(gw.data(), n, k).noalias() +=
                        gm.transpose() * CMapMat(tp.value(xi).data(), rows, k);
                  }
                });
}

/// Row lookup: out[b] = table[idx[b]].
inline Var gather_rows(Var table, std::vector<std::int64_t> idx) {
  Tape& t = detail::tape_of(table);
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw Error("gather_rows: table must be rank 2");
  const std::size_t n = tv.dim(0);
  const std::size_t d = tv.dim(1);
  Tensor y(Shape{idx.size(), d});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    if (idx[b] < 0 || static_cast<std::size_t>(idx[b]) >= n)
      throw Error("index " + std::to_string(idx[b]) + " out of range for " +
                  std::to_string(n) + " rows");
    std::copy_n(tv.data() + idx[b] * d, d, y.data() + b * d);
  }
  return t.push(std::move(y), {table.id},
                [ti = table.id, idx = std::move(idx), d](Tape& tp, std::size_t self) {
                  if (!tp.requires_grad(ti)) return;
                  const Tensor& g = tp.grad_buffer(self);
                  Tensor& gt = tp.grad_buffer(ti);
                  for (std::size_t b = 0; b < idx.size(); ++b)
                    for (std::size_t j = 0; j < d; ++j) gt[idx[b] * d + j] += g[b * d + j];
                });
}

/// Softmax over the last axis with max subtraction.
inline Var softmax(Var x) {
  Tape& t = detail::tape_of(x);
  const Tensor& xv = x.value();
  const std::size_t n = detail::last_dim(xv);
  Tensor y(xv.shape());
  for (std::size_t r = 0; r < xv.size() / n; ++r) {
    const double* in = xv.data() + r * n;
    double* out = y.data() + r * n;
    const double m = *std::max_element(in, in + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (out[j] = std::exp(in[j] - m));
    for (std::size_t j = 0; j < n; ++j) out[j] /= s;
  }
  return t.push(std::move(y), {x.id}, [xi = x.id, n](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(xi)) return;
    const Tensor& g = tp.grad_buffer(self);
    const Tensor& p = tp.value(self);
    Tensor& gx = tp.grad_buffer(xi);
    for (std::size_t r = 0; r < p.size() / n; ++r) {
      const double* pr = p.data() + r * n;
      const double* gr = g.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += pr[j] * gr[j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += pr[j] * (gr[j] - dot);
    }
  });
}

/// Per-row negative log-likelihood: -log softmax(logits[b])[target[b]].
inline Var cross_entropy(Var logits, std::vector<std::int64_t> target) {
  Tape& t = detail::tape_of(logits);
  const Tensor& lv = logits.value();
  const std::size_t n = detail::last_dim(lv);
  const std::size_t rows = lv.size() / n;
  if (target.size() != rows) throw Error("cross_entropy: target count mismatch");
  Tensor y(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    if (target[r] < 0 || static_cast<std::size_t>(target[r]) >= n)
      throw Error("category index " + std::to_string(target[r]) + " out of range for " +
                  std::to_string(n) + " categories");
    const double* in = lv.data() + r * n;
    const double m = *std::max_element(in, in + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(in[j] - m);
    y[r] = (m + std::log(s)) - in[target[r]];
  }
  return t.push(std::move(y), {logits.id},
                [li = logits.id, target = std::move(target), n](Tape& tp, std::size_t self) {
                  if (!tp.requires_grad(li)) return;
                  const Tensor& g = tp.grad_buffer(self);
                  const Tensor& lv2 = tp.value(li);
                  Tensor& gl = tp.grad_buffer(li);
                  for (std::size_t r = 0; r < target.size(); ++r) {
                    const double* in = lv2.data() + r * n;
                    const double m = *std::max_element(in, in + n);
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += std::exp(in[j] - m);
                    for (std::size_t j = 0; j < n; ++j) {
                      const double p = std::exp(in[j] - m) / s;
                      gl[r * n + j] += g[r] * (p - (static_cast<std::int64_t>(j) == target[r]));
                    }
                  }
                });
}

/// Concatenates [B, L_i, d] tensors along axis 1.
inline Var concat_positions(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("concat_positions: nothing to concatenate");
  Tape& t = detail::tape_of(parts[0]);
  const std::size_t b = parts[0].value().dim(0);
  const std::size_t d = parts[0].value().shape().back();
  std::vector<std::size_t> lens;
  std::vector<std::size_t> ids;
  std::size_t total = 0;
  for (Var p : parts) {
    detail::same_tape(parts[0], p);
    const Tensor& v = p.value();
    if (v.rank() != 3 || v.dim(0) != b || v.dim(2) != d)
      throw Error("concat_positions: incompatible part " + shape_str(v.shape()));
    lens.push_back(v.dim(1));
    ids.push_back(p.id);
    total += v.dim(1);
  }
  Tensor y(Shape{b, total, d});
  for (std::size_t bi = 0; bi < b; ++bi) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const Tensor& v = parts[i].value();
      std::copy_n(v.data() + bi * lens[i] * d, lens[i] * d, y.data() + (bi * total + off) * d);
      off += lens[i];
    }
  }
  return t.push(std::move(y), ids, [ids, lens, b, d, total](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_buffer(self);
    std::size_t off = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (tp.requires_grad(ids[i])) {
        Tensor& gi = tp.grad_buffer(ids[i]);
        for (std::size_t bi = 0; bi < b; ++bi)
          for (std::size_t j = 0; j < lens[i] * d; ++j)
            gi[bi * lens[i] * d + j] += g[(bi * total + off) * d + j];
      }
      off += lens[i];
    }
  });
}

/// Stacks [B, d] tensors into [B, n, d].
inline Var stack_positions(const std::vector<Var>& rows) {
  std::vector<Var> parts;
  parts.reserve(rows.size());
  for (Var r : rows) {
    const Tensor& v = r.value();
    if (v.rank() != 2) throw Error("stack_positions: expected rank-2 parts");
    parts.push_back(reshape(r, Shape{v.dim(0), 1, v.dim(1)}));
  }
  return concat_positions(parts);
}

/// x[B, L, d] -> x[B, start:start+len, d]
inline Var slice_positions(Var x, std::size_t start, std::size_t len) {
  Tape& t = detail::tape_of(x);
  const Tensor& xv = x.value();
  if (xv.rank() != 3 || start + len > xv.dim(1)) throw Error("slice_positions: out of range");
  const std::size_t b = xv.dim(0), l = xv.dim(1), d = xv.dim(2);
  Tensor y(Shape{b, len, d});
  for (std::size_t bi = 0; bi < b; ++bi)
    std::copy_n(xv.data() + (bi * l + start) * d, len * d, y.data() + bi * len * d);
  return t.push(std::move(y), {x.id}, [xi = x.id, b, l, d, start, len](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(xi)) return;
    const Tensor& g = tp.grad_buffer(self);
    Tensor& gx = tp.grad_buffer(xi);
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t j = 0; j < len * d; ++j) gx[(bi * l + start) * d + j] += g[bi * len * d + j];
  });
}

/// out[b, p] = x[b, idx[b * P + p]] for x[B, L, d]; the result is [B, P, d].
inline Var gather_positions(Var x, std::vector<std::size_t> idx, std::size_t positions) {
  Tape& t = detail::tape_of(x);
  const Tensor& xv = x.value();
  if (xv.rank() != 3) throw Error("gather_positions: expected rank 3");
  const std::size_t b = xv.dim(0), l = xv.dim(1), d = xv.dim(2);
  if (idx.size() != b * positions) throw Error("gather_positions: index count mismatch");
  Tensor y(Shape{b, positions, d});
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t p = 0; p < positions; ++p) {
      const std::size_t src = idx[bi * positions + p];
      if (src >= l) throw Error("gather_positions: position out of range");
      std::copy_n(xv.data() + (bi * l + src) * d, d, y.data() + (bi * positions + p) * d);
    }
  return t.push(std::move(y), {x.id},
                [xi = x.id, idx = std::move(idx), b, l, d, positions](Tape& tp, std::size_t self) {
                  if (!tp.requires_grad(xi)) return;
                  const Tensor& g = tp.grad_buffer(self);
                  Tensor& gx = tp.grad_buffer(xi);
                  for (std::size_t bi = 0; bi < b; ++bi)
                    for (std::size_t p = 0; p < positions; ++p) {
                      const std::size_t src = idx[bi * positions + p];
                      for (std::size_t j = 0; j < d; ++j)
                        gx[(bi * l + src) * d + j] += g[(bi * positions + p) * d + j];
                    }
                });
}

/// Picks one position per batch row: x[B, L, d] -> [B, d].
inline Var select_positions(Var x, const std::vector<std::size_t>& pos) {
  const std::size_t b = x.value().dim(0);
  const std::size_t d = x.value().dim(2);
  return reshape(gather_positions(x, pos, 1), Shape{b, d});
}

/// Left-to-right sum of each row of x[B, n] into [B].
inline Var row_sum(Var x) {
  Tape& t = detail::tape_of(x);
  const Tensor& xv = x.value();
  if (xv.rank() != 2) throw Error("row_sum: expected rank 2");
  const std::size_t b = xv.dim(0), n = xv.dim(1);
  Tensor y(Shape{b});
  for (std::size_t bi = 0; bi < b; ++bi) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += xv[bi * n + j];
    y[bi] = s;
  }
  return t.push(std::move(y), {x.id}, [xi = x.id, b, n](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(xi)) return;
    const Tensor& g = tp.grad_buffer(self);
    Tensor& gx = tp.grad_buffer(xi);
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t j = 0; j < n; ++j) gx[bi * n + j] += g[bi];
  });
}

inline Var sum(Var x) {
  Tape& t = detail::tape_of(x);
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return t.push(Tensor::scalar(s), {x.id}, [xi = x.id](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(xi)) return;
    const double g = tp.grad_buffer(self)[0];
    for (double& v : tp.grad_buffer(xi).storage()) v += g;
  });
}

inline Var mean(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw Error("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

/// Per-head scores q_h . k_h^T for q, k of shape [B, L, d] split into
/// `heads` contiguous column groups. Result is [B, H, L, L].
inline Var attention_scores(Var q, Var k, std::size_t heads) {
  detail::same_tape(q, k);
  Tape& t = detail::tape_of(q);
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  if (qv.rank() != 3 || qv.shape() != kv.shape()) throw Error("attention_scores: bad shapes");
  const std::size_t b = qv.dim(0), l = qv.dim(1), d = qv.dim(2);
  if (heads == 0 || d % heads) throw Error("attention_scores: width not divisible by heads");
  const std::size_t dh = d / heads;
  Tensor y(Shape{b, heads, l, l});
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < l; ++i) {
        const double* qr = qv.data() + (bi * l + i) * d + h * dh;
        double* out = y.data() + ((bi * heads + h) * l + i) * l;
        for (std::size_t j = 0; j < l; ++j) {
          const double* kr = kv.data() + (bi * l + j) * d + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qr[c] * kr[c];
          out[j] = s;
        }
      }
  return t.push(std::move(y), {q.id, k.id},
                [qi = q.id, ki = k.id, b, l, d, heads, dh](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.grad_buffer(self);
                  const Tensor& qv2 = tp.value(qi);
                  const Tensor& kv2 = tp.value(ki);
                  const bool gq = tp.requires_grad(qi), gk = tp.requires_grad(ki);
                  Tensor* dq = gq ? &tp.grad_buffer(qi) : nullptr;
                  Tensor* dk = gk ? &tp.grad_buffer(ki) : nullptr;
                  for (std::size_t bi = 0; bi < b; ++bi)
                    for (std::size_t h = 0; h < heads; ++h)
                      for (std::size_t i = 0; i < l; ++i) {
                        const double* gr = g.data() + ((bi * heads + h) * l + i) * l;
                        const std::size_t qo = (bi * l + i) * d + h * dh;
                        for (std::size_t j = 0; j < l; ++j) {
                          if (gr[j] == 0.0) continue;
                          const std::size_t ko = (bi * l + j) * d + h * dh;
                          for (std::size_t c = 0; c < dh; ++c) {
                            if (dq) (*dq)[qo + c] += gr[j] * kv2[ko + c];
                            if (dk) (*dk)[ko + c] += gr[j] * qv2[qo + c];
                          }
                        }
                      }
                });
}

/// Mixes values with attention weights: p[B, H, L, L] x v[B, L, d] -> [B, L, d].
inline Var attention_mix(Var p, Var v, std::size_t heads) {
  detail::same_tape(p, v);
  Tape& t = detail::tape_of(p);
  const Tensor& pv = p.value();
  const Tensor& vv = v.value();
  const std::size_t b = vv.dim(0), l = vv.dim(1), d = vv.dim(2);
  const std::size_t dh = d / heads;
  if (pv.shape() != Shape{b, heads, l, l}) throw Error("attention_mix: bad shapes");
  Tensor y(Shape{b, l, d});
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < l; ++i) {
        const double* pr = pv.data() + ((bi * heads + h) * l + i) * l;
        double* out = y.data() + (bi * l + i) * d + h * dh;
        for (std::size_t j = 0; j < l; ++j) {
          if (pr[j] == 0.0) continue;
          const double* vr = vv.data() + (bi * l + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) out[c] += pr[j] * vr[c];
        }
      }
  return t.push(std::move(y), {p.id, v.id},
                [pi = p.id, vi = v.id, b, l, d, heads, dh](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.grad_buffer(self);
                  const Tensor& pv2 = tp.value(pi);
                  const Tensor& vv2 = tp.value(vi);
                  Tensor* dp = tp.requires_grad(pi) ? &tp.grad_buffer(pi) : nullptr;
                  Tensor* dv = tp.requires_grad(vi) ? &tp.grad_buffer(vi) : nullptr;
                  for (std::size_t bi = 0; bi < b; ++bi)
                    for (std::size_t h = 0; h < heads; ++h)
                      for (std::size_t i = 0; i < l; ++i) {
                        const std::size_t po = ((bi * heads + h) * l + i) * l;
                        const double* gr = g.data() + (bi * l + i) * d + h * dh;
                        for (std::size_t j = 0; j < l; ++j) {
                          const std::size_t vo = (bi * l + j) * d + h * dh;
                          if (dp) {
                            double s = 0.0;
                            for (std::size_t c = 0; c < dh; ++c) s += gr[c] * vv2[vo + c];
                            (*dp)[po + j] += s;
                          }
                          if (dv && pv2[po + j] != 0.0)
                            for (std::size_t c = 0; c < dh; ++c)
                              (*dv)[vo + c] += pv2[po + j] * gr[c];
                        }
                      }
                });
}

}  // namespace ad
}  // namespace nestgen
