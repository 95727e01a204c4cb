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

// nestgen: fit, sample, evaluate and inspect nested tabular generators.
//
//   nestgen fit --schema s.json --data d.jsonl --out model.json
//   nestgen sample --model model.json --count 1000 --out synth.jsonl
//   nestgen eval --schema s.json --real d.jsonl --synth synth.jsonl
//   nestgen inspect --model model.json
//
// Verbosity comes from NESTGEN_LOG (trace, debug, info, warn, error, off).

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "nestgen/cli.hpp"

namespace {

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("nestgen");
  logger->set_pattern("[%l] %v");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("NESTGEN_LOG")) {
    const auto level = spdlog::level::from_str(env);
    // from_str maps unknown names to off; only honour recognised ones.
    if (level != spdlog::level::off || std::string(env) == "off")
      spdlog::set_level(level);
    else
      spdlog::warn("ignoring unknown NESTGEN_LOG level \"{}\"", env);
  }
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  namespace cli = nestgen::cli;

  CLI::App app{"nestgen: synthetic nested tabular data from composite autoregressive codecs"};
  app.require_subcommand(1);

  cli::FitArgs fit;
  auto* fit_cmd = app.add_subcommand("fit", "Fit a model to a dataset");
  fit_cmd->add_option("--schema", fit.schema, "Schema file (JSON)")->required();
  fit_cmd->add_option("--data", fit.data, "Training records (.csv or .jsonl)")->required();
  fit_cmd->add_option("--format", fit.format, "Input format; default by extension")
      ->check(CLI::IsMember({"csv", "jsonl"}));
  fit_cmd->add_option("--child", fit.child, "Child table grouped into the root's list field");
  fit_cmd->add_option("--parent-key", fit.parent_key, "Key column of the parent table");
  fit_cmd->add_option("--child-key", fit.child_key, "Foreign-key column of the child table");
  fit_cmd->add_option("--list-field", fit.list_field, "List field the child rows fill");
  fit_cmd->add_option("--out", fit.out, "Model artifact to write")->capture_default_str();
  fit_cmd->add_option("--log", fit.log, "Run log (JSON lines); default <out>.log.jsonl");
  fit_cmd->add_option("--epochs", fit.epochs)->capture_default_str();
  fit_cmd->add_option("--batch-size", fit.batch_size)->capture_default_str();
  fit_cmd->add_option("--lr", fit.lr)->capture_default_str();
  fit_cmd->add_option("--optimizer", fit.optimizer)
      ->check(CLI::IsMember({"adam", "sgd"}))
      ->capture_default_str();
  fit_cmd->add_option("--width", fit.width, "Embedding width")->capture_default_str();
  fit_cmd->add_option("--blocks", fit.blocks, "Attention blocks per transformer")
      ->capture_default_str();
  fit_cmd->add_option("--heads", fit.heads, "Attention heads")->capture_default_str();
  fit_cmd->add_flag("--trainable-c0", fit.trainable_c0, "Learn the root conditioning vector");
  fit_cmd->add_flag("--positional", fit.positional, "Add learned position embeddings");
  fit_cmd->add_option("--seed", fit.seed)->capture_default_str();
  fit_cmd->add_flag("--dp", fit.dp, "Train with DP-SGD");
  fit_cmd->add_option("--clip", fit.clip, "DP per-example clip norm")->capture_default_str();
  fit_cmd->add_option("--noise", fit.noise, "DP noise multiplier")->capture_default_str();
  fit_cmd->add_option("--shuffle-passes", fit.shuffle_passes,
                      "Permutations per batch for shuffled nodes")
      ->capture_default_str();

  cli::SampleArgs sample;
  auto* sample_cmd = app.add_subcommand("sample", "Draw synthetic records from a model");
  sample_cmd->add_option("--model", sample.model, "Model artifact")->required();
  sample_cmd->add_option("--count", sample.count)->capture_default_str();
  sample_cmd->add_option("--out", sample.out, "Output file")->required();
  sample_cmd->add_option("--format", sample.format, "Output format; default by extension")
      ->check(CLI::IsMember({"csv", "jsonl"}));
  sample_cmd->add_option("--seed", sample.seed)->capture_default_str();

  cli::EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Compare a synthetic dataset with the real one");
  eval_cmd->add_option("--schema", eval.schema, "Schema file (JSON)");
  eval_cmd->add_option("--model", eval.model, "Take the schema from a model artifact");
  eval_cmd->add_option("--real,--data", eval.real, "Real records")->required();
  eval_cmd->add_option("--synth", eval.synth, "Synthetic records")->required();
  eval_cmd->add_option("--out", eval.out, "JSON report to write");
  eval_cmd->add_option("--k", eval.k, "Marginal order")->capture_default_str();
  eval_cmd->add_option("--subsets", eval.subsets, "Column subsets for the marginal score")
      ->capture_default_str();
  eval_cmd->add_option("--seed", eval.seed)->capture_default_str();
  eval_cmd->add_option("--bins", eval.bins, "Quantile bins for numeric marginals")
      ->capture_default_str();
  eval_cmd->add_option("--rules", eval.rules, "Consistency rules (JSON)");
  eval_cmd->add_option("--metrics", eval.metrics,
                       "Metric families: columns, correlation, marginal, consistency")
      ->delimiter(',')
      ->capture_default_str();
  eval_cmd->add_option("--splits-dir", eval.splits_dir,
                       "Write real train/test splits and the synthetic records here");
  eval_cmd->add_option("--test-fraction", eval.test_fraction)->capture_default_str();

  cli::InspectArgs inspect;
  auto* inspect_cmd = app.add_subcommand("inspect", "Describe a model or a schema");
  inspect_cmd->add_option("--model", inspect.model, "Model artifact");
  inspect_cmd->add_option("--schema", inspect.schema, "Schema to size instead of a model");
  inspect_cmd->add_option("--width", inspect.width)->capture_default_str();
  inspect_cmd->add_option("--blocks", inspect.blocks)->capture_default_str();
  inspect_cmd->add_option("--heads", inspect.heads)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (command == "fit") {
      cli::cmd_fit(fit);
    } else if (command == "sample") {
      cli::cmd_sample(sample);
    } else if (command == "eval") {
      if (!eval.rules.empty() &&
          std::find(eval.metrics.begin(), eval.metrics.end(), "consistency") == eval.metrics.end())
        eval.metrics.push_back("consistency");
      cli::cmd_eval(eval);
    } else {
      cli::cmd_inspect(inspect);
    }
  } catch (const cli::CommandError& e) {
    spdlog::error("{}: {}", command, e.what());
    return 1;
  } catch (const std::exception& e) {
    spdlog::error("{}: {}", command, e.what());
    return 1;
  }
  return 0;
}
