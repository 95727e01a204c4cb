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

// The `nestgen` commands: fit, sample, eval and inspect. Each command takes
// a plain argument struct, so the binary's flag parsing stays thin.

#pragma once

#include <spdlog/spdlog.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nestgen/artifact.hpp"
#include "nestgen/data.hpp"
#include "nestgen/metrics.hpp"
#include "nestgen/schema.hpp"
#include "nestgen/trainer.hpp"

namespace nestgen::cli {

/// A failed command; `stage` names the step that failed (parse, ingest,
/// train, sample, eval, write).
class CommandError : public Error {
 public:
  CommandError(std::string stage, const std::string& what)
      : Error(stage + " failed: " + what), stage(std::move(stage)) {}
  std::string stage;
};

/// Runs `fn`, rethrowing any library error as a CommandError for `stage`.
template <typename F>
auto stage(const std::string& name, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const CommandError&) {
    throw;
  } catch (const std::exception& e) {
    throw CommandError(name, e.what());
  }
}

inline Format resolve_format(const std::string& flag, const std::string& path) {
  return flag.empty() ? format_of_path(path) : parse_format(flag);
}

inline SchemaNode load_schema(const std::string& path) {
  return stage("parse", [&] {
    const std::string text = read_text(path);
    try {
      return parse_schema(json::parse(text));
    } catch (const json::parse_error&) {
      throw SchemaError("schema file " + path + " is not valid JSON");
    }
  });
}

// --- fit --------------------------------------------------------------------

struct FitArgs {
  std::string schema;
  std::string data;
  std::string format;  ///< empty: by file extension
  std::string child;   ///< optional child table joined into the root's list
  std::string parent_key;
  std::string child_key;
  std::string list_field;  ///< empty: the root's only list field
  std::string out = "model.json";
  std::string log;  ///< empty: <out>.log.jsonl
  std::size_t epochs = 10;
  std::size_t batch_size = 512;
  double lr = 1e-3;
  std::string optimizer = "adam";
  std::size_t width = 64;
  std::size_t blocks = 2;
  std::size_t heads = 8;
  bool trainable_c0 = false;
  bool positional = false;
  std::uint64_t seed = 0;
  bool dp = false;
  double clip = 1e-3;
  double noise = 1.08;
  std::size_t shuffle_passes = 1;
};

inline std::string default_list_field(const SchemaNode& schema) {
  std::vector<std::string> lists;
  if (schema.kind == SchemaKind::kStruct)
    for (const auto& c : schema.children)
      if (c.kind == SchemaKind::kList) lists.push_back(c.name);
  if (lists.size() != 1)
    throw DataError("cannot tell which list the child table fills; pass --list-field");
  return lists.front();
}

/// Records from the data file, with the child table grouped into them.
inline std::vector<json> load_records(const FitArgs& a, const SchemaNode& schema) {
  std::vector<json> records = read_records(a.data, resolve_format(a.format, a.data));
  if (a.child.empty()) return records;
  if (a.parent_key.empty() || a.child_key.empty())
    throw DataError("--child needs --parent-key and --child-key");
  const std::string field = a.list_field.empty() ? default_list_field(schema) : a.list_field;
  JoinReport report;
  records = join_tables(std::move(records), read_records(a.child, format_of_path(a.child)),
                        a.parent_key, a.child_key, field, &report);
  spdlog::info("joined {} child rows into {} parents ({} orphans dropped)", report.children,
               report.parents, report.orphans);
  if (report.orphans > 0)
    spdlog::warn("{} child rows reference no parent and were dropped", report.orphans);
  return records;
}

inline json fit_config_json(const FitArgs& a) {
  return {{"epochs", a.epochs},
          {"batch_size", a.batch_size},
          {"lr", a.lr},
          {"optimizer", a.optimizer},
          {"width", a.width},
          {"blocks", a.blocks},
          {"heads", a.heads},
          {"trainable_c0", a.trainable_c0},
          {"positional", a.positional},
          {"shuffle_passes", a.shuffle_passes},
          {"format", a.format},
          {"child", a.child},
          {"parent_key", a.parent_key},
          {"child_key", a.child_key},
          {"list_field", a.list_field},
          {"dp", {{"enabled", a.dp}, {"clip", a.clip}, {"noise", a.noise}}}};
}

/// Fits a model and writes the artifact plus a JSON-lines run log: one
/// header line with the manifest, then one line per optimizer step.
inline RunManifest cmd_fit(const FitArgs& a) {
  const SchemaNode schema = load_schema(a.schema);
  TransformerConfig shape;
  shape.width = a.width;
  shape.blocks = a.blocks;
  shape.heads = a.heads;
  shape.trainable_c0 = a.trainable_c0;
  shape.positional = a.positional;
  TrainConfig train;
  train.epochs = a.epochs;
  train.batch_size = a.batch_size;
  train.optimizer.lr = a.lr;
  train.shuffle_passes = a.shuffle_passes;
  train.seed = a.seed;
  DpConfig dp;
  dp.enabled = a.dp;
  dp.clip_norm = a.clip;
  dp.noise_multiplier = a.noise;
  stage("parse", [&] {
    if (a.optimizer == "adam")
      train.optimizer.kind = OptimizerKind::kAdam;
    else if (a.optimizer == "sgd")
      train.optimizer.kind = OptimizerKind::kSgd;
    else
      throw Error("unknown optimizer " + a.optimizer + " (adam or sgd)");
    shape.validate();
    train.validate(schema);
    if (dp.enabled) dp.validate();
  });

  const Dataset data = stage("ingest", [&] {
    const Format format = resolve_format(a.format, a.data);
    if (format == Format::kCsv && !is_flat(schema) && a.child.empty())
      throw DataError("CSV input needs a flat schema; use JSON lines or --child for nested records");
    Dataset d = ingest(load_records(a, schema), schema);
    if (d.values.empty()) throw DataError("no usable records in " + a.data);
    return d;
  });
  spdlog::info("ingested {} of {} records ({} with nulls, {} overlength dropped)",
               data.report.kept, data.report.read, data.report.rejected_null,
               data.report.rejected_overlength);
  if (data.report.kept < data.report.read)
    spdlog::warn("dropped {} records", data.report.read - data.report.kept);

  RunManifest manifest;
  manifest.schema_path = a.schema;
  manifest.data_path = a.data;
  manifest.config = fit_config_json(a);
  manifest.seed = a.seed;
  manifest.model_path = a.out;
  std::map<std::string, std::string> inputs = {{"schema", a.schema}, {"data", a.data}};
  if (!a.child.empty()) inputs["child"] = a.child;
  stage("ingest", [&] { manifest.hash_inputs(inputs); });

  Model model(data.schema, shape, data.prep, a.seed);
  spdlog::info("model has {} parameters", model.parameter_count());

  const std::string log_path = a.log.empty() ? a.out + ".log.jsonl" : a.log;
  std::ofstream log(log_path, std::ios::binary);
  if (!log) throw CommandError("write", "cannot open run log " + log_path);
  log << json{{"event", "start"},
              {"manifest", manifest.to_json()},
              {"parameters", model.parameter_count()},
              {"records", data.report.kept}}
             .dump()
      << "\n";
  const FitResult result = stage("train", [&] {
    return fit(model, data.batch(), train, dp, [&](const BatchRecord& r) {
      json j = r.to_json();
      j["event"] = "batch";
      log << j.dump() << "\n";
      spdlog::debug("epoch {} batch {} loss {:.6f}", r.epoch, r.batch, r.loss);
    });
  });
  for (std::size_t e = 0; e < result.epoch_means.size(); ++e)
    spdlog::info("epoch {}: mean loss {:.6f}", e, result.epoch_means[e]);
  log << json{{"event", "end"},
              {"steps", result.steps},
              {"epoch_means", result.epoch_means}}
             .dump()
      << "\n";
  stage("write", [&] { save_model(a.out, model, manifest); });
  spdlog::info("wrote {}", a.out);
  return manifest;
}

// --- sample -----------------------------------------------------------------

struct SampleArgs {
  std::string model;
  std::size_t count = 1000;
  std::string out;
  std::string format;  ///< empty: by file extension
  std::uint64_t seed = 0;
};

inline void cmd_sample(const SampleArgs& a) {
  const LoadedModel loaded = stage("parse", [&] { return load_model(a.model); });
  const Model& m = *loaded.model;
  const Format format = stage("parse", [&] {
    const Format f = resolve_format(a.format, a.out);
    if (f == Format::kCsv && !is_flat(m.schema()))
      throw DataError("CSV output needs a flat schema; " + m.schema().name +
                      " is nested, use --format jsonl");
    return f;
  });
  Rng rng(a.seed);
  const std::vector<Value> values =
      stage("sample", [&] { return a.count == 0 ? std::vector<Value>{} : m.sample(rng, a.count); });
  stage("write", [&] { emit(a.out, m.schema(), values, m.preprocessing(), format); });
  spdlog::info("wrote {} records to {}", values.size(), a.out);
}

// --- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string schema;
  std::string model;  ///< alternative source of the schema
  std::string real;
  std::string synth;
  std::string out;  ///< JSON report; the text table goes to stdout
  std::size_t k = 4;
  std::size_t subsets = 50;
  std::uint64_t seed = 0;
  std::size_t bins = 5;
  std::string rules;
  std::vector<std::string> metrics = {"columns", "correlation", "marginal"};
  std::string splits_dir;
  double test_fraction = 0.2;
};

/// Writes a seeded train/test split of the real records and the synthetic
/// records, for external utility harnesses.
inline void write_splits(const EvalArgs& a, const std::vector<json>& real,
                         const std::vector<json>& synth) {
  if (!(a.test_fraction > 0.0 && a.test_fraction < 1.0))
    throw Error("--test-fraction must lie in (0, 1)");
  std::filesystem::create_directories(a.splits_dir);
  std::vector<std::size_t> order(real.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng(a.seed).split(7).shuffle(order.begin(), order.end());
  const auto n_test = static_cast<std::size_t>(
      std::llround(a.test_fraction * static_cast<double>(real.size())));
  std::string train, test, syn;
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < n_test ? test : train) += real[order[i]].dump() + "\n";
  for (const auto& r : synth) syn += r.dump() + "\n";
  const std::filesystem::path dir(a.splits_dir);
  write_text((dir / "real_train.jsonl").string(), train);
  write_text((dir / "real_test.jsonl").string(), test);
  write_text((dir / "synthetic.jsonl").string(), syn);
}

inline MetricsReport cmd_eval(const EvalArgs& a, std::ostream& text = std::cout) {
  const SchemaNode schema = [&] {
    if (!a.schema.empty()) return load_schema(a.schema);
    if (!a.model.empty()) return stage("parse", [&] { return load_model(a.model).model->schema(); });
    throw CommandError("parse", "eval needs --schema or --model");
  }();
  EvalOptions opts;
  opts.k = a.k;
  opts.subsets = a.subsets;
  opts.seed = a.seed;
  opts.bins = a.bins;
  opts.columns = opts.correlation = opts.marginal = false;
  bool consistency = false;
  stage("parse", [&] {
    for (const auto& m : a.metrics) {
      if (m == "columns")
        opts.columns = true;
      else if (m == "correlation")
        opts.correlation = true;
      else if (m == "marginal")
        opts.marginal = true;
      else if (m == "consistency")
        consistency = true;
      else
        throw Error("unknown metric family " + m +
                    " (columns, correlation, marginal, consistency)");
    }
    if (!a.rules.empty()) opts.rules = parse_rules(json::parse(read_text(a.rules)));
    if (consistency && opts.rules.empty()) throw Error("consistency needs --rules");
  });
  auto load = [&](const std::string& path, const char* what) {
    return stage("ingest", [&] {
      if (path.empty()) throw DataError(std::string("missing --") + what + " dataset");
      const Format f = format_of_path(path);
      if (f == Format::kCsv && !is_flat(schema))
        throw DataError("CSV input needs a flat schema; use JSON lines for nested records");
      return read_records(path, f);
    });
  };
  const std::vector<json> real = load(a.real, "real");
  const std::vector<json> synth = load(a.synth, "synth");
  const MetricsReport report = stage("eval", [&] { return evaluate(schema, real, synth, opts); });
  for (const auto& w : report.warnings) spdlog::warn("{}", w);
  if (!a.splits_dir.empty()) stage("write", [&] { write_splits(a, real, synth); });
  if (!a.out.empty()) stage("write", [&] { write_text(a.out, report.to_json().dump(2) + "\n"); });
  text << report.to_text();
  return report;
}

// --- inspect ----------------------------------------------------------------

struct InspectArgs {
  std::string model;
  std::string schema;  ///< inspect a schema at the given shape instead
  std::size_t width = 64;
  std::size_t blocks = 2;
  std::size_t heads = 8;
};

/// Schema, codec tree and parameter counts per codec.
inline std::string inspect_text(const Model& m, const RunManifest* manifest) {
  std::string out;
  out += "schema:\n" + serialize_schema(m.schema()).dump(2) + "\n";
  out += "codec tree: " + describe_codec(m.schema()) + "\n";
  const TransformerConfig& c = m.config();
  out += "transformer: width " + std::to_string(c.width) + ", blocks " +
         std::to_string(c.blocks) + ", heads " + std::to_string(c.heads) + "\n";
  // Parameters grouped by the codec path that owns them.
  std::map<std::string, std::size_t> per_codec;
  for (const auto& [path, t] : m.params()) {
    std::string owner = path.substr(0, path.rfind('/'));
    for (const char* part : {"/enc/", "/dec/", "/len"}) {
      const auto at = owner.find(part);
      if (at != std::string::npos) owner = owner.substr(0, at);
    }
    per_codec[owner] += t.size();
  }
  out += "parameters:\n";
  std::size_t w = 0;
  for (const auto& [path, _] : per_codec) w = std::max(w, path.size());
  char buf[512];
  for (const auto& [path, n] : per_codec) {
    std::snprintf(buf, sizeof buf, "  %-*s %10zu\n", static_cast<int>(w), path.c_str(), n);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "  %-*s %10zu\n", static_cast<int>(w), "total",
                m.parameter_count());
  out += buf;
  if (manifest) out += "manifest:\n" + manifest->to_json().dump(2) + "\n";
  return out;
}

inline void cmd_inspect(const InspectArgs& a, std::ostream& text = std::cout) {
  if (!a.model.empty()) {
    const LoadedModel loaded = stage("parse", [&] { return load_model(a.model); });
    text << inspect_text(*loaded.model, &loaded.manifest);
    return;
  }
  if (a.schema.empty()) throw CommandError("parse", "inspect needs --model or --schema");
  const SchemaNode schema = load_schema(a.schema);
  stage("parse", [&] {
    TransformerConfig c;
    c.width = a.width;
    c.blocks = a.blocks;
    c.heads = a.heads;
    // Undeclared category counts are unknown before ingestion; count them as 1.
    SchemaNode s = schema;
    std::function<void(SchemaNode&)> fill = [&](SchemaNode& n) {
      if (n.kind == SchemaKind::kCategorical && n.cardinality == 0) n.cardinality = 1;
      for (auto& ch : n.children) fill(ch);
    };
    fill(s);
    text << inspect_text(Model(s, c), nullptr);
  });
}

}  // namespace nestgen::cli
