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

#include <gtest/gtest.h>

#include "nestgen/attention.hpp"
#include "nestgen/optimizer.hpp"
#include "test_support.hpp"

namespace nestgen {
namespace {

using testing::check_gradients;

TransformerConfig small_config(std::size_t width, std::size_t blocks, std::size_t heads) {
  TransformerConfig cfg;
  cfg.width = width;
  cfg.blocks = blocks;
  cfg.heads = heads;
  cfg.init_std = 0.3;
  return cfg;
}

Tensor attention_output(const ParamStore& store, const TransformerConfig& cfg, const Tensor& x) {
  Tape tape(false);
  ParamBinder binder(tape, store);
  return causal_transformer(binder, "h", cfg, tape.constant(x)).value();
}

TEST(CausalAttention, SingleStepWithZeroOutputProjectionIsIdentity) {
  const auto cfg = small_config(8, 2, 2);
  ParamStore store;
  Rng rng(1);
  register_transformer(store, "h", cfg, 4, rng);
  for (std::size_t b = 0; b < cfg.blocks; ++b) store.at("h/b" + std::to_string(b) + "/wo").fill(0.0);
  const Tensor x = random_normal(Shape{3, 1, 8}, 1.0, rng);
  EXPECT_EQ(attention_output(store, cfg, x), x);
}

TEST(CausalAttention, FuturePositionsDoNotAffectThePast) {
  const auto cfg = small_config(8, 2, 4);
  ParamStore store;
  Rng rng(2);
  register_transformer(store, "h", cfg, 6, rng);
  const Tensor x = random_normal(Shape{2, 6, 8}, 1.0, rng);
  const Tensor base = attention_output(store, cfg, x);
  for (std::size_t j = 1; j < 6; ++j) {
    Tensor y = x;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t c = 0; c < 8; ++c) y[(b * 6 + j) * 8 + c] += rng.normal();
    const Tensor out = attention_output(store, cfg, y);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t k = 0; k < j; ++k)
        for (std::size_t c = 0; c < 8; ++c)
          ASSERT_EQ(out[(b * 6 + k) * 8 + c], base[(b * 6 + k) * 8 + c])
              << "position " << k << " changed after perturbing " << j;
  }
}

TEST(CausalAttention, PaddedKeysAreIgnored) {
  const auto cfg = small_config(8, 1, 2);
  ParamStore store;
  Rng rng(3);
  register_transformer(store, "h", cfg, 5, rng);
  const Tensor x = random_normal(Shape{1, 5, 8}, 1.0, rng);
  Tensor y = x;
  for (std::size_t c = 0; c < 8; ++c) y[4 * 8 + c] = 99.0;
  Tape tape(false);
  ParamBinder binder(tape, store);
  const Tensor a = causal_transformer(binder, "h", cfg, tape.constant(x), {3}).value();
  const Tensor b = causal_transformer(binder, "h", cfg, tape.constant(y), {3}).value();
  // Row 4 is a padded query; it still only sees the three valid keys.
  for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(a[3 * 8 + c], b[3 * 8 + c]);
}

TEST(CausalAttention, GradientMatchesFiniteDifferences) {
  const auto cfg = small_config(8, 1, 2);
  ParamStore store;
  Rng rng(4);
  register_transformer(store, "h", cfg, 4, rng);
  for (auto& [path, t] : store)
    for (double& v : t.storage()) v = rng.normal(0.0, 0.3);  // non-zero biases too
  store.add("x", random_normal(Shape{1, 4, 8}, 1.0, rng));
  auto f = [&](ParamBinder& p) {
    return ad::sum(causal_transformer(p, "h", cfg, p.get("x")));
  };
  const auto res = check_gradients(store, f, rng);
  EXPECT_LT(res.max_rel_err, 1e-4) << res.worst;
  EXPECT_EQ(res.checked, store.count());
}

TEST(CausalAttention, RejectsBadInput) {
  const auto cfg = small_config(8, 1, 2);
  ParamStore store;
  Rng rng(5);
  register_transformer(store, "h", cfg, 4, rng);
  Tape tape;
  ParamBinder binder(tape, store);
  EXPECT_THROW(causal_transformer(binder, "h", cfg, tape.constant(Tensor(Shape{1, 3, 6}))), Error);
  EXPECT_THROW(causal_transformer(binder, "h", cfg, tape.constant(Tensor(Shape{1, 0, 8}))), Error);
  TransformerConfig bad = cfg;
  bad.heads = 3;
  EXPECT_THROW(bad.validate(), Error);
}

TEST(CausalAttention, Deterministic) {
  const auto cfg = small_config(16, 2, 4);
  ParamStore a, b;
  Rng ra(7), rb(7);
  register_transformer(a, "h", cfg, 5, ra);
  register_transformer(b, "h", cfg, 5, rb);
  EXPECT_EQ(a, b);
  Rng rx(8);
  const Tensor x = random_normal(Shape{3, 5, 16}, 1.0, rx);
  EXPECT_EQ(attention_output(a, cfg, x), attention_output(b, cfg, x));
}

TEST(Backward, IdentityHasUnitGradient) {
  Tape tape;
  Var p = tape.leaf(Tensor::scalar(3.0));
  tape.backward(p);
  EXPECT_EQ(tape.grad(p).item(), 1.0);
}

TEST(Backward, SumOfSoftmaxHasZeroGradient) {
  Tape tape;
  Rng rng(9);
  Var z = tape.leaf(random_normal(Shape{2, 5}, 2.0, rng));
  tape.backward(ad::sum(ad::softmax(z)));
  for (double g : tape.grad(z).values()) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(Backward, UntouchedParametersGetZeroGradient) {
  ParamStore store;
  store.add("used", Tensor(Shape{2}, 1.0));
  store.add("unused", Tensor(Shape{3}, 1.0));
  Tape tape;
  ParamBinder binder(tape, store);
  tape.backward(ad::sum(binder.get("used")));
  const auto g = binder.gradients();
  EXPECT_EQ(g.at("unused"), Tensor(Shape{3}));
  EXPECT_EQ(g.at("used"), Tensor(Shape{2}, 1.0));
}

TEST(Backward, CrossEntropyOfAttentionMatchesFiniteDifferences) {
  const auto cfg = small_config(8, 2, 2);
  ParamStore store;
  Rng rng(10);
  register_transformer(store, "h", cfg, 2, rng);
  store.add("W", random_normal(Shape{3, 8}, 0.5, rng));
  auto f = [&](ParamBinder& p) {
    Var tokens = ad::reshape(ad::gather_rows(p.get("W"), {2, 0, 1, 1}), Shape{2, 2, 8});
    Var h = causal_transformer(p, "h", cfg, tokens);
    Var logits = ad::matmul_nt(ad::reshape(h, Shape{4, 8}), p.get("W"));
    return ad::mean(ad::cross_entropy(logits, {0, 1, 2, 0}));
  };
  const auto res = check_gradients(store, f, rng);
  EXPECT_LT(res.max_rel_err, 1e-4) << res.worst;
}

TEST(Backward, RejectsNonScalarSeed) {
  Tape tape;
  Var v = tape.leaf(Tensor(Shape{2}));
  EXPECT_THROW(tape.backward(v), Error);
}

TEST(Backward, EveryPrimitiveMatchesFiniteDifferences) {
  ParamStore store;
  Rng rng(11);
  store.add("a", random_normal(Shape{2, 3, 4}, 1.0, rng));
  store.add("b", random_normal(Shape{2, 3, 4}, 1.0, rng));
  store.add("w", random_normal(Shape{4, 4}, 1.0, rng));
  store.add("bias", random_normal(Shape{4}, 1.0, rng));
  store.add("pos", random_normal(Shape{3, 4}, 1.0, rng));
  auto f = [&](ParamBinder& p) {
    Var a = ad::add_rows(p.get("a"), p.get("pos"));
    Var m = ad::mul(a, ad::add_bias(ad::matmul(p.get("b"), p.get("w")), p.get("bias")));
    Var g = ad::gather_positions(m, {2, 0, 1, 1, 1, 0}, 3);
    Var c = ad::concat_positions({ad::slice_positions(g, 1, 2), p.get("b")});
    Var s = ad::select_positions(c, {4, 0});
    Var keep = ad::mask_fill(ad::softmax(c), std::vector<std::uint8_t>(40, 1), 0.0);
    return ad::add(ad::sum(ad::row_sum(ad::scale(s, 0.7))), ad::mean(ad::mul(keep, c)));
  };
  const auto res = check_gradients(store, f, rng);
  EXPECT_LT(res.max_rel_err, 1e-4) << res.worst;
}

TEST(Optimizer, ZeroGradientsLeaveSgdParametersUnchanged) {
  ParamStore store;
  Rng rng(12);
  store.add("p", random_normal(Shape{3}, 1.0, rng));
  const ParamStore before = store;
  OptimizerState st;
  optimizer_step(store, {{"p", Tensor(Shape{3})}}, st, {OptimizerKind::kSgd, 0.5});
  EXPECT_EQ(store, before);
}

TEST(Optimizer, SgdStepIsLrTimesGradient) {
  ParamStore store;
  store.add("p", Tensor::scalar(0.0));
  OptimizerState st;
  optimizer_step(store, {{"p", Tensor::scalar(1.0)}}, st, {OptimizerKind::kSgd, 0.1});
  EXPECT_DOUBLE_EQ(store.at("p").item(), -0.1);
}

TEST(Optimizer, AdamMinimizesQuadratic) {
  ParamStore store;
  store.add("p", Tensor::scalar(1.0));
  OptimizerState st;
  OptimizerConfig cfg;
  cfg.lr = 0.1;
  for (int i = 0; i < 200; ++i) {
    const double p = store.at("p").item();
    optimizer_step(store, {{"p", Tensor::scalar(2.0 * p)}}, st, cfg);
  }
  EXPECT_LT(std::abs(store.at("p").item()), 1e-2);
  EXPECT_EQ(st.step, 200u);
}

TEST(Optimizer, RejectsShapeMismatchAndNonFiniteGradients) {
  ParamStore store;
  store.add("enc/wq", Tensor(Shape{2}));
  OptimizerState st;
  EXPECT_THROW(optimizer_step(store, {{"enc/wq", Tensor(Shape{3})}}, st, {}), Error);
  try {
    optimizer_step(store, {{"enc/wq", Tensor(Shape{2}, NAN)}}, st, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("enc/wq"), std::string::npos);
  }
}

TEST(Tensor, RejectsNonFiniteForwardValues) {
  Tape tape;
  Var x = tape.leaf(Tensor(Shape{1}, 1e308));
  EXPECT_THROW(ad::scale(x, 10.0), Error);
}

}  // namespace
}  // namespace nestgen
