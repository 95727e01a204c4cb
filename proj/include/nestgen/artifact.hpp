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

// Self-describing model bundle: schema, transformer shape, vocabularies,
// quantile tables, parameters and the manifest of the run that produced it.

#pragma once

#include <openssl/evp.h>

#include <cstdio>
#include <memory>
#include <string>

#include <json.hpp>

#include "nestgen/data.hpp"
#include "nestgen/model.hpp"

namespace nestgen {

inline constexpr const char* kArtifactFormat = "nestgen-model";
inline constexpr int kArtifactVersion = 1;

/// Hex SHA-1 of `bytes` framed as a git blob, i.e. what `git hash-object`
/// prints for a file with this content.
inline std::string git_blob_hash(const std::string& bytes) {
  const std::string framed = "blob " + std::to_string(bytes.size()) + '\0' + bytes;
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(framed.data(), framed.size(), digest, &len, EVP_sha1(), nullptr) != 1)
    throw Error("SHA-1 digest failed");
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

/// Provenance of a fitted model: enough to re-run the fit bitwise.
struct RunManifest {
  std::string schema_path;
  std::string data_path;
  json config = json::object();
  std::uint64_t seed = 0;
  std::string model_path;
  /// Per-input blob hashes and their combined hash.
  std::map<std::string, std::string> input_hashes;
  std::string input_hash;

  /// Records the blob hash of each named input file and the combined hash.
  void hash_inputs(const std::map<std::string, std::string>& files) {
    std::string listing;
    for (const auto& [name, path] : files) {
      input_hashes[name] = git_blob_hash(read_text(path));
      listing += name + " " + input_hashes[name] + "\n";
    }
    input_hash = git_blob_hash(listing);
  }

  json to_json() const {
    return {{"schema_path", schema_path}, {"data_path", data_path}, {"config", config},
            {"seed", seed},               {"model_path", model_path}, {"input_hashes", input_hashes},
            {"input_hash", input_hash}};
  }

  static RunManifest from_json(const json& j) {
    RunManifest m;
    m.schema_path = j.value("schema_path", "");
    m.data_path = j.value("data_path", "");
    m.config = j.value("config", json::object());
    m.seed = j.value("seed", std::uint64_t{0});
    m.model_path = j.value("model_path", "");
    m.input_hashes = j.value("input_hashes", std::map<std::string, std::string>{});
    m.input_hash = j.value("input_hash", "");
    return m;
  }

  friend bool operator==(const RunManifest&, const RunManifest&) = default;
};

inline json config_json(const TransformerConfig& c) {
  return {{"width", c.width},       {"blocks", c.blocks},         {"heads", c.heads},
          {"init_std", c.init_std}, {"positional", c.positional}, {"trainable_c0", c.trainable_c0}};
}

inline TransformerConfig config_from_json(const json& j) {
  TransformerConfig c;
  c.width = j.at("width").get<std::size_t>();
  c.blocks = j.at("blocks").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.init_std = j.at("init_std").get<double>();
  c.positional = j.at("positional").get<bool>();
  c.trainable_c0 = j.at("trainable_c0").get<bool>();
  return c;
}

/// JSON numbers are printed with round-trip precision, so every parameter
/// reloads to the identical double.
inline json artifact_json(const Model& m, const RunManifest& manifest) {
  json vocab = json::object(), quantiles = json::object(), params = json::object();
  for (const auto& [path, symbols] : m.preprocessing().vocab) vocab[path] = symbols;
  for (const auto& [path, t] : m.preprocessing().quantiles)
    quantiles[path] = {{"q", t.q}, {"integer", t.integer_mode}};
  for (const auto& [path, t] : m.params())
    params[path] = {{"shape", t.shape()}, {"data", t.storage()}};
  return {{"format", kArtifactFormat},
          {"version", kArtifactVersion},
          {"manifest", manifest.to_json()},
          {"schema", serialize_schema(m.schema())},
          {"config", config_json(m.config())},
          {"vocab", vocab},
          {"quantiles", quantiles},
          {"params", params}};
}

struct LoadedModel {
  std::unique_ptr<Model> model;
  RunManifest manifest;
};

inline LoadedModel model_from_json(const json& j) {
  if (j.value("format", "") != kArtifactFormat)
    throw DataError("not a nestgen model artifact");
  if (j.value("version", 0) != kArtifactVersion)
    throw DataError("unsupported model artifact version " + j.value("version", json()).dump());
  try {
    Preprocessing prep;
    for (const auto& [path, symbols] : j.at("vocab").items())
      prep.vocab[path] = symbols.get<std::vector<std::string>>();
    for (const auto& [path, t] : j.at("quantiles").items())
      prep.quantiles[path] = {t.at("q").get<std::vector<double>>(), t.at("integer").get<bool>()};
    LoadedModel out;
    out.model = std::make_unique<Model>(parse_schema(j.at("schema")),
                                        config_from_json(j.at("config")), std::move(prep));
    const json& params = j.at("params");
    if (params.size() != out.model->params().size())
      throw DataError("artifact parameters do not match its schema");
    for (auto& [path, t] : out.model->params()) {
      if (!params.contains(path)) throw DataError("artifact lacks parameter " + path);
      const json& p = params.at(path);
      if (p.at("shape").get<Shape>() != t.shape())
        throw DataError("artifact parameter " + path + " has the wrong shape");
      std::vector<double> data = p.at("data").get<std::vector<double>>();
      if (data.size() != t.size()) throw DataError("artifact parameter " + path + " is truncated");
      t.storage() = std::move(data);
    }
    out.manifest = RunManifest::from_json(j.at("manifest"));
    return out;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed model artifact: ") + e.what());
  }
}

inline void save_model(const std::string& path, const Model& m, const RunManifest& manifest) {
  write_text(path, artifact_json(m, manifest).dump() + "\n");
}

inline LoadedModel load_model(const std::string& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw DataError("model artifact " + path + " is not valid JSON");
  }
  return model_from_json(j);
}

}  // namespace nestgen
