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

#include <cmath>

#include "nestgen/trainer.hpp"
#include "properties.hpp"

namespace nestgen {
namespace {

using namespace nestgen::testing;

TransformerConfig small() {
  TransformerConfig cfg;
  cfg.width = 16;
  cfg.blocks = 1;
  cfg.heads = 2;
  cfg.init_std = 0.2;
  return cfg;
}

SchemaNode pair_schema() {
  return SchemaNode::structure("pair", {SchemaNode::categorical("a", 2),
                                        SchemaNode::categorical("b", 2)});
}

/// 1000 rows with joint frequencies 0.4 / 0.1 / 0.1 / 0.4.
std::vector<Value> correlated_pairs() {
  std::vector<Value> rows;
  const int counts[2][2] = {{400, 100}, {100, 400}};
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b)
      for (int i = 0; i < counts[a][b]; ++i)
        rows.push_back(Value::of({Value::category(a), Value::category(b)}));
  return rows;
}

TEST(Fit, SingleCategoryRootHasZeroLossAndNoDrift) {
  Model m(SchemaNode::categorical("x", 1), small());
  const ParamStore before = m.params();
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 2;
  const FitResult r = fit(m, m.batch_of(std::vector<Value>(5, Value::category(0))), cfg);
  for (double l : r.losses) EXPECT_EQ(l, 0.0);
  EXPECT_EQ(m.params(), before);
}

TEST(Fit, HistoryHasOneLossPerBatch) {
  Model m(pair_schema(), small());
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 7;
  const FitResult r = fit(m, m.batch_of(std::vector<Value>(
                                 20, Value::of({Value::category(0), Value::category(1)}))),
                          cfg);
  EXPECT_EQ(r.losses.size(), 3u * 3u);  // ceil(20 / 7) = 3
  EXPECT_EQ(r.epoch_means.size(), 3u);
  EXPECT_EQ(r.steps, 9u);
}

TEST(Fit, CorrelatedPairReachesTheJointEntropy) {
  // Oracle: entropy of the target joint, -sum p ln p = 1.1935 nats.
  double entropy = 0.0;
  for (double p : {0.4, 0.1, 0.1, 0.4}) entropy -= p * std::log(p);

  Model m(pair_schema(), small(), {}, 3);
  TrainConfig cfg;
  cfg.epochs = 400;
  cfg.batch_size = 1000;
  cfg.optimizer.lr = 0.01;
  const FitResult r = fit(m, m.batch_of(correlated_pairs()), cfg);
  EXPECT_NEAR(r.epoch_means.back(), entropy, 0.01);
  EXPECT_LT(r.epoch_means.back(), r.epoch_means.front());
  const auto law = enumerate_joint(m);
  EXPECT_LT(tvd(law, {0.4, 0.1, 0.1, 0.4}), 0.02);
}

TEST(Fit, SameSeedGivesBitwiseIdenticalHistories) {
  const SchemaNode s = SchemaNode::structure(
      "r", {SchemaNode::categorical("a", 3),
            SchemaNode::list("l", SchemaNode::categorical("c", 3), 3, true)});
  Rng data_rng(2);
  const auto values = random_values(s, data_rng, 30);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.shuffle_passes = 2;
  cfg.seed = 17;
  auto run = [&](std::uint64_t seed) {
    Model m(s, small(), {}, 1);
    TrainConfig c = cfg;
    c.seed = seed;
    return std::make_pair(fit(m, m.batch_of(values), c).losses, m.params());
  };
  const auto a = run(17);
  const auto b = run(17);
  const auto c = run(18);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_NE(a.first, c.first);
}

TEST(Fit, DisabledDpIgnoresItsSettings) {
  const auto values = correlated_pairs();
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 100;
  auto run = [&](const DpConfig& dp) {
    Model m(pair_schema(), small());
    return fit(m, m.batch_of(values), cfg, dp).losses;
  };
  DpConfig odd;
  odd.clip_norm = 7.0;
  odd.noise_multiplier = 3.0;
  EXPECT_EQ(run({}), run(odd));
}

TEST(Fit, RunLogRecordsEveryBatch) {
  Model m(pair_schema(), small());
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  DpConfig dp;
  dp.enabled = true;
  dp.clip_norm = 1e-3;
  dp.noise_multiplier = 1.08;
  std::vector<nlohmann::json> log;
  fit(m, m.batch_of(std::vector<Value>(6, Value::of({Value::category(1), Value::category(0)}))),
      cfg, dp, [&](const BatchRecord& r) { log.push_back(r.to_json()); });
  ASSERT_EQ(log.size(), 4u);
  EXPECT_EQ(log[3]["epoch"], 1);
  EXPECT_EQ(log[3]["batch"], 1);
  EXPECT_EQ(log[0]["dp"]["C"], 1e-3);
  EXPECT_EQ(log[0]["dp"]["sigma"], 1.08);
  EXPECT_EQ(log[3]["dp"]["steps"], 4);
  EXPECT_DOUBLE_EQ(log[0]["dp"]["batch_fraction"].get<double>(), 4.0 / 6.0);
  for (const auto& r : log) {
    EXPECT_TRUE(r.contains("loss"));
    EXPECT_TRUE(r.contains("grad_norm"));
  }

  Model plain(pair_schema(), small());
  fit(plain, plain.batch_of({Value::of({Value::category(1), Value::category(0)})}), cfg, {},
      [&](const BatchRecord& r) { EXPECT_TRUE(r.to_json()["dp"].is_null()); });
}

TEST(Fit, NonFiniteLossNamesTheBatch) {
  Model m(pair_schema(), small());
  // Category 1 of `a` gets an overflowing embedding; only the third instance
  // uses it.
  Tensor& w = m.params().at("pair/a/W");
  for (std::size_t j = 0; j < 16; ++j) w.storage()[16 + j] = 1e300;
  TrainConfig cfg;
  cfg.batch_size = 1;
  cfg.shuffle_data = false;
  const std::vector<Value> rows = {Value::of({Value::category(0), Value::category(0)}),
                                   Value::of({Value::category(0), Value::category(1)}),
                                   Value::of({Value::category(1), Value::category(0)})};
  try {
    fit(m, m.batch_of(rows), cfg);
    FAIL() << "training on an overflowing embedding succeeded";
  } catch (const TrainError& e) {
    EXPECT_EQ(e.batch, 2u);
    EXPECT_NE(std::string(e.what()).find("batch 2"), std::string::npos) << e.what();
  }
}

TEST(Fit, ValidatesConfiguration) {
  Model m(pair_schema(), small());
  const BatchTree b = m.batch_of({Value::of({Value::category(0), Value::category(0)})});
  TrainConfig cfg;
  cfg.batch_size = 0;
  EXPECT_THROW(fit(m, b, cfg), Error);
  cfg = {};
  cfg.epochs = 0;
  EXPECT_THROW(fit(m, b, cfg), Error);
  cfg = {};
  cfg.shuffle_passes = 0;
  EXPECT_THROW(fit(m, b, cfg), Error);
  cfg = {};
  cfg.shuffle_passes = 2;  // nothing in the schema is shuffled
  EXPECT_THROW(fit(m, b, cfg), Error);
  DpConfig dp;
  dp.enabled = true;
  dp.clip_norm = 0.0;
  EXPECT_THROW(fit(m, b, TrainConfig{}, dp), Error);
  dp.clip_norm = 1.0;
  dp.noise_multiplier = -1.0;
  EXPECT_THROW(fit(m, b, TrainConfig{}, dp), Error);
}

TEST(Fit, ShufflePassesAverageOverPermutations) {
  const SchemaNode s = SchemaNode::list("l", SchemaNode::categorical("c", 3), 4, true);
  Rng rng(4);
  const auto values = random_values(s, rng, 12);
  Model m(s, small(), {}, 2);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 12;
  cfg.shuffle_passes = 3;
  cfg.optimizer.lr = 0.01;
  const FitResult r = fit(m, m.batch_of(values), cfg);
  EXPECT_LT(r.epoch_means.back(), r.epoch_means.front());
}

// --- DP ---------------------------------------------------------------------

GradMap random_grad(Rng& rng, double scale) {
  GradMap g;
  g.emplace("p/a", random_normal({3, 4}, scale, rng));
  g.emplace("p/b", random_normal({5}, scale, rng));
  return g;
}

TEST(DpStep, SmallGradientsWithoutNoiseAreThePlainMean) {
  Rng rng(1);
  DpConfig dp;
  dp.clip_norm = 10.0;
  dp.noise_multiplier = 0.0;
  std::vector<GradMap> per;
  for (int i = 0; i < 4; ++i) per.push_back(random_grad(rng, 0.1));
  const GradMap out = dp_step(per, dp, rng);
  for (const auto& [path, t] : out)
    for (std::size_t i = 0; i < t.size(); ++i) {
      double mean = 0.0;
      for (const auto& g : per) mean += g.at(path)[i] / 4.0;
      EXPECT_DOUBLE_EQ(t[i], mean);
    }
}

TEST(DpStep, OverlongGradientIsClippedToC) {
  Rng rng(2);
  GradMap g = random_grad(rng, 1.0);
  const double c = 1e-3;
  const double n = grad_norm(g);
  for (auto& [_, t] : g)
    for (double& x : t.storage()) x *= 10.0 * c / n;
  DpConfig dp;
  dp.clip_norm = c;
  dp.noise_multiplier = 0.0;
  EXPECT_NEAR(grad_norm(dp_step({g}, dp, rng)), c, 1e-9);
}

TEST(DpStep, ClippingBoundHoldsForRandomGradients) {
  Rng rng(3);
  for (int i = 0; i < 10000; ++i) {
    const double c = std::exp(rng.uniform(-10.0, 3.0));
    GradMap g = random_grad(rng, std::exp(rng.uniform(-12.0, 6.0)));
    clip_gradient(g, c);
    ASSERT_LE(grad_norm(g), c + 1e-9);
  }
}

TEST(DpStep, NoiseStdMatchesSigmaCOverB) {
  DpConfig dp;
  dp.clip_norm = 1e-3;
  dp.noise_multiplier = 1.08;
  const std::size_t batch = 1024;
  Rng rng(4);
  std::vector<GradMap> zeros(batch);
  for (auto& g : zeros) g.emplace("p", Tensor(Shape{100}));
  double sum = 0.0, sum_sq = 0.0;
  std::size_t n = 0;
  for (int draw = 0; draw < 1000; ++draw) {
    const GradMap noisy = dp_step(zeros, dp, rng);
    for (double x : noisy.at("p").values()) {
      sum += x;
      sum_sq += x * x;
      ++n;
    }
  }
  const double mean = sum / static_cast<double>(n);
  const double stddev = std::sqrt(sum_sq / static_cast<double>(n) - mean * mean);
  const double expected = 1.08 * 1e-3 / 1024.0;
  EXPECT_NEAR(stddev / expected, 1.0, 0.05);
}

TEST(DpStep, RejectsInvalidSettings) {
  Rng rng(5);
  DpConfig dp;
  dp.clip_norm = -1.0;
  EXPECT_THROW(dp_step({random_grad(rng, 1.0)}, dp, rng), Error);
  dp.clip_norm = 1.0;
  EXPECT_THROW(dp_step({}, dp, rng), Error);
}

}  // namespace
}  // namespace nestgen
