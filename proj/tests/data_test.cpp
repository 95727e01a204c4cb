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

#include <algorithm>
#include <numeric>

#include "nestgen/artifact.hpp"
#include "nestgen/data.hpp"
#include "test_support.hpp"

namespace nestgen {
namespace {

std::string temp_path(const std::string& name) { return ::testing::TempDir() + name; }

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

bool contains(const std::string& haystack, const std::string& needle) {
  return haystack.find(needle) != std::string::npos;
}

SchemaNode flat_ab() {
  return SchemaNode::structure("t", {SchemaNode::categorical("a", 0),
                                     SchemaNode::categorical("b", 0)});
}

// --- CSV --------------------------------------------------------------------

TEST(Csv, ParsesQuotedFields) {
  const CsvTable t = parse_csv("x,y\r\n\"a,b\",\"say \"\"hi\"\"\"\r\n\"multi\nline\",2\n");
  EXPECT_EQ(t.header, (std::vector<std::string>{"x", "y"}));
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.rows[0], (std::vector<std::string>{"a,b", "say \"hi\""}));
  EXPECT_EQ(t.rows[1], (std::vector<std::string>{"multi\nline", "2"}));
}

TEST(Csv, TrailingNewlineIsOptional) {
  EXPECT_EQ(parse_csv("a\n1").rows, parse_csv("a\n1\n").rows);
}

TEST(Csv, RejectsRaggedAndBrokenRows) {
  EXPECT_TRUE(contains(error_of([] { parse_csv("a,b\n1\n"); }), "row 1"));
  EXPECT_TRUE(contains(error_of([] { parse_csv("a\n\"open\n"); }), "unterminated"));
  EXPECT_TRUE(contains(error_of([] { parse_csv("a\nx\"y\n"); }), "stray quote"));
  EXPECT_TRUE(contains(error_of([] { parse_csv("a\n\"x\"y\n"); }), "after closing quote"));
  EXPECT_THROW(parse_csv(""), DataError);
}

TEST(Csv, FormatThenParseIsIdentity) {
  Rng rng(3);
  const std::string alphabet = "ab, \"\n\r";
  for (int trial = 0; trial < 200; ++trial) {
    CsvTable t;
    const std::size_t cols = 1 + rng.index(3);
    for (std::size_t c = 0; c < cols; ++c) t.header.push_back("c" + std::to_string(c));
    for (std::size_t r = 0, n = rng.index(4); r < n; ++r) {
      std::vector<std::string> row;
      for (std::size_t c = 0; c < cols; ++c) {
        std::string cell;
        // Non-empty so a single-column row never reads as a blank line.
        do {
          cell.clear();
          for (std::size_t k = 0, len = rng.index(5); k < len; ++k)
            cell.push_back(alphabet[rng.index(alphabet.size())]);
        } while (cols == 1 && cell.empty());
        row.push_back(cell);
      }
      t.rows.push_back(row);
    }
    const CsvTable back = parse_csv(format_csv(t));
    EXPECT_EQ(back.header, t.header);
    EXPECT_EQ(back.rows, t.rows);
  }
}

// --- ingest -----------------------------------------------------------------

TEST(Ingest, FlatCsvBuildsSortedVocabularies) {
  const Dataset d = ingest(csv_records(parse_csv("a,b\n0,x\n1,y\n")), flat_ab());
  const BatchTree b = d.batch();
  EXPECT_EQ(b.count, 2u);
  EXPECT_EQ(b.children[0].index.size(), 2u);
  EXPECT_EQ(b.children[1].index.size(), 2u);
  EXPECT_EQ(d.prep.vocab.at("t/a"), (std::vector<std::string>{"0", "1"}));
  EXPECT_EQ(d.prep.vocab.at("t/b"), (std::vector<std::string>{"x", "y"}));
  EXPECT_EQ(d.schema.children[1].cardinality, 2u);
}

TEST(Ingest, VocabularyIgnoresFileOrder) {
  const auto a = ingest(csv_records(parse_csv("a,b\nq,1\nz,2\nm,3\n")), flat_ab());
  const auto b = ingest(csv_records(parse_csv("a,b\nm,3\nq,1\nz,2\n")), flat_ab());
  EXPECT_EQ(a.prep.vocab, b.prep.vocab);
  // Lexicographic over the text, so "10" sorts before "2".
  const auto c = ingest(csv_records(parse_csv("a,b\n2,x\n10,x\n")), flat_ab());
  EXPECT_EQ(c.prep.vocab.at("t/a"), (std::vector<std::string>{"10", "2"}));
}

TEST(Ingest, IsDeterministic) {
  const auto records = parse_jsonl(
      R"({"Age": 31.5, "Sex": "F", "transactions": [{"Place": "shop", "Price": 3.2}]}
{"Age": 40, "Sex": "M", "transactions": []})");
  const SchemaNode s = parse_schema(R"({"type":"record","name":"User","fields":[
      {"name":"Age","type":"float","bins":3},{"name":"Sex","type":"enum"},
      {"name":"transactions","type":"array","max_len":4,"items":{"type":"record",
       "name":"transaction","fields":[{"name":"Place","type":"enum"},
       {"name":"Price","type":"float","bins":2}]}}]})");
  const Dataset a = ingest(records, s), b = ingest(records, s);
  EXPECT_EQ(a.batch(), b.batch());
  EXPECT_EQ(a.prep, b.prep);
}

TEST(Ingest, EmptyListIsFullyMasked) {
  const SchemaNode s = SchemaNode::list("reviews", SchemaNode::categorical("r", 0), 4);
  const Dataset d = ingest(parse_jsonl(R"({"reviews": []}
{"reviews": ["a"]})"),
                           s);
  const BatchTree b = d.batch();
  EXPECT_EQ(b.lengths[0], 0u);
  const auto mask = b.mask();
  EXPECT_EQ(std::accumulate(mask.begin(), mask.begin() + 4, 0), 0);
}

TEST(Ingest, NetflixShapedLengthsMatchAFileCount) {
  const SchemaNode s = parse_schema(read_text(std::string(NESTGEN_FIXTURES) + "/netflix_schema.json"));
  const std::size_t lengths[] = {1, 2, 128};
  std::string text;
  Rng rng(5);
  for (std::size_t n : lengths) {
    json reviews = json::array();
    for (std::size_t i = 0; i < n; ++i)
      reviews.push_back({{"movie", {{"release_year", rng.index(94)}, {"title", rng.index(4500)}}},
                         {"year", rng.index(7)},
                         {"rating", rng.index(5)}});
    text += json{{"user_id", text.size()}, {"user", reviews}}.dump() + "\n";
  }
  const std::string path = temp_path("netflix.jsonl");
  write_text(path, text);

  // Independent oracle: count review objects per line of the file itself.
  std::vector<std::size_t> oracle;
  std::istringstream lines(read_text(path));
  for (std::string line; std::getline(lines, line);) {
    std::size_t count = 0;
    for (std::size_t at = line.find("\"rating\""); at != std::string::npos;
         at = line.find("\"rating\"", at + 1))
      ++count;
    oracle.push_back(count);
  }

  const Dataset d = ingest_file(path, s, Format::kJsonl);
  const BatchTree b = d.batch();
  ASSERT_EQ(b.count, 3u);
  const auto mask = b.mask();
  for (std::size_t u = 0; u < 3; ++u) {
    EXPECT_EQ(b.lengths[u], oracle[u]);
    EXPECT_EQ(std::accumulate(mask.begin() + u * 128, mask.begin() + (u + 1) * 128, 0),
              static_cast<int>(oracle[u]));
  }
  // Declared integer cardinalities keep their integer codes.
  EXPECT_EQ(d.prep.vocab.at("user/review/rating").size(), 5u);
  EXPECT_EQ(d.prep.vocab.at("user/review/rating")[3], "3");
  EXPECT_EQ(d.schema.item().children[0].children[1].cardinality, 4500u);
}

TEST(Ingest, RejectsNullAndOverlengthRowsWithCounts) {
  const SchemaNode s = SchemaNode::structure(
      "r", {SchemaNode::categorical("a", 0),
            SchemaNode::list("l", SchemaNode::categorical("c", 0), 2)});
  const Dataset d = ingest(parse_jsonl(R"({"a": "x", "l": ["p"]}
{"a": null, "l": []}
{"a": "y", "l": ["p", "q", "r"]}
{"a": "y", "l": [null]}
{"a": "z", "l": ["q", "q"]})"),
                           s);
  EXPECT_EQ(d.report.read, 5u);
  EXPECT_EQ(d.report.kept, 2u);
  EXPECT_EQ(d.report.rejected_null, 2u);
  EXPECT_EQ(d.report.rejected_overlength, 1u);
  EXPECT_EQ(d.prep.vocab.at("r/a"), (std::vector<std::string>{"x", "z"}));
}

TEST(Ingest, EmptyCsvCellIsNull) {
  const Dataset d = ingest(csv_records(parse_csv("a,b\n0,\n1,y\n")), flat_ab());
  EXPECT_EQ(d.report.rejected_null, 1u);
  EXPECT_EQ(d.values.size(), 1u);
}

TEST(Ingest, UnknownCategoryNamesTheColumn) {
  const Dataset fitted = ingest(csv_records(parse_csv("a,b\n0,x\n1,y\n")), flat_ab());
  const std::string err = error_of(
      [&] { ingest(csv_records(parse_csv("a,b\n0,z\n")), flat_ab(), fitted.prep); });
  EXPECT_TRUE(contains(err, "t/b")) << err;
  EXPECT_TRUE(contains(err, "\"z\"")) << err;
}

TEST(Ingest, MalformedRowsNameRecordAndColumn) {
  const SchemaNode s = SchemaNode::structure(
      "r", {SchemaNode::numerical("x", 4), SchemaNode::categorical("c", 0)});
  std::string err = error_of([&] { ingest(parse_jsonl(R"({"x": 1, "c": "a"}
{"x": "one", "c": "a"})"),
                                          s); });
  EXPECT_TRUE(contains(err, "record 2")) << err;
  EXPECT_TRUE(contains(err, "r/x")) << err;
  err = error_of([&] { ingest(parse_jsonl(R"({"x": 1})"), s); });
  EXPECT_TRUE(contains(err, "missing column \"c\"")) << err;
  err = error_of([&] { ingest(parse_jsonl(R"({"x": 1, "c": [1]})"), s); });
  EXPECT_TRUE(contains(err, "scalar")) << err;
  EXPECT_TRUE(contains(error_of([] { parse_jsonl("{}\n{oops\n"); }), "line 2"));
}

TEST(Ingest, DeclaredCardinalityIsACeiling) {
  const SchemaNode s = SchemaNode::structure("t", {SchemaNode::categorical("a", 2)});
  EXPECT_TRUE(contains(error_of([&] { ingest(parse_jsonl(R"({"a":"p"}
{"a":"q"}
{"a":"r"})"),
                                             s); }),
                       "declared cardinality"));
  const Dataset d = ingest(parse_jsonl(R"({"a":"p"})"), s);
  EXPECT_EQ(d.prep.vocab.at("t/a").size(), 2u);
}

TEST(Ingest, DeclaredSymbolsKeepTheirOrder) {
  const SchemaNode s = parse_schema(R"({"type":"record","name":"t","fields":[
      {"name":"a","type":"enum","symbols":["lo","mid","hi"]}]})");
  const Dataset d = ingest(parse_jsonl(R"({"a":"hi"})"), s);
  EXPECT_EQ(d.values[0].children[0].index, 2);
}

TEST(Ingest, NumbersAreBinnedWithFittedQuantiles) {
  const SchemaNode s = SchemaNode::structure("t", {SchemaNode::numerical("x", 3)});
  const Dataset d = ingest(csv_records(parse_csv("x\n10\n20\n30\n40\n")), s);
  EXPECT_EQ(d.prep.quantiles.at("t/x").q, (std::vector<double>{10, 25, 40}));
  std::vector<std::int64_t> bins;
  for (const auto& v : d.values) bins.push_back(v.children[0].index);
  EXPECT_EQ(bins, (std::vector<std::int64_t>{0, 1, 1, 2}));
}

TEST(Ingest, CsvNeedsAFlatSchema) {
  const std::string path = temp_path("nested.csv");
  write_text(path, "a\n1\n");
  const SchemaNode s = SchemaNode::list("l", SchemaNode::categorical("c", 0), 2);
  EXPECT_TRUE(contains(error_of([&] { ingest_file(path, s, Format::kCsv); }), "flat"));
}

TEST(Ingest, PaddedSlotsDoNotChangeTheLoss) {
  const SchemaNode s = SchemaNode::list("l", SchemaNode::categorical("c", 0), 4);
  const Dataset d = ingest(parse_jsonl(R"({"l":["a","b"]}
{"l":[]}
{"l":["b","b","a","a"]})"),
                           s);
  TransformerConfig cfg;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.init_std = 0.3;
  const Model m(d.schema, cfg, d.prep, 2);
  BatchTree b = d.batch();
  const double clean = m.evaluate(b);
  for (std::size_t u = 0; u < b.count; ++u)
    for (std::size_t p = b.lengths[u]; p < b.max_len; ++p) b.item().index[u * 4 + p] = 1;
  EXPECT_EQ(m.evaluate(b), clean);
}

// --- join -------------------------------------------------------------------

TEST(Join, GroupsChildrenUnderParents) {
  const auto users = csv_records(parse_csv("id,Age,Sex\n1,30,F\n2,41,M\n"));
  const auto tx = csv_records(parse_csv("user,Place,Price\n2,shop,3\n1,cafe,4\n2,bar,5\n9,x,1\n"));
  JoinReport report;
  const auto joined = join_tables(users, tx, "id", "user", "transactions", &report);
  EXPECT_EQ(report.parents, 2u);
  EXPECT_EQ(report.children, 3u);
  EXPECT_EQ(report.orphans, 1u);
  ASSERT_EQ(joined[1]["transactions"].size(), 2u);
  EXPECT_EQ(joined[1]["transactions"][0]["Place"], "shop");
  EXPECT_EQ(joined[1]["transactions"][1]["Place"], "bar");
  EXPECT_FALSE(joined[1]["transactions"][0].contains("user"));

  const SchemaNode s = parse_schema(R"({"type":"record","name":"User","fields":[
      {"name":"Age","type":"float","bins":2},{"name":"Sex","type":"enum"},
      {"name":"transactions","type":"array","max_len":4,"items":{"type":"record",
       "name":"transaction","fields":[{"name":"Place","type":"enum"},
       {"name":"Price","type":"float","bins":2}]}}]})");
  const Dataset d = ingest(joined, s);
  EXPECT_EQ(d.batch().children[2].lengths, (std::vector<std::size_t>{1, 2}));
}

TEST(Join, RejectsDuplicateParentKeys) {
  const auto users = csv_records(parse_csv("id\n1\n1\n"));
  EXPECT_TRUE(contains(error_of([&] { join_tables(users, {}, "id", "user", "l"); }), "duplicate"));
}

// --- emit -------------------------------------------------------------------

TEST(Emit, FlatCsvRoundTripsCategoriesExactly) {
  const SchemaNode s = SchemaNode::structure(
      "t", {SchemaNode::categorical("a", 0), SchemaNode::numerical("x", 4),
            SchemaNode::categorical("b", 0)});
  const std::string text = "a,x,b\nred,1.5,\"c,1\"\nblue,2.25,c2\nred,9,c2\n";
  const Dataset d = ingest(csv_records(parse_csv(text)), s);
  const CsvTable back = parse_csv(format_dataset(d.schema, d.values, d.prep, Format::kCsv));
  const CsvTable orig = parse_csv(text);
  EXPECT_EQ(back.header, orig.header);
  for (std::size_t r = 0; r < orig.rows.size(); ++r) {
    EXPECT_EQ(back.rows[r][0], orig.rows[r][0]);
    EXPECT_EQ(back.rows[r][2], orig.rows[r][2]);
    EXPECT_EQ(std::stod(back.rows[r][1]), std::stod(orig.rows[r][1]));
  }
  // Re-ingesting the emitted file gives the same bins.
  const Dataset again = ingest(csv_records(back), s, d.prep);
  EXPECT_EQ(again.values, d.values);
}

TEST(Emit, EmptyCsvHasItsHeader) {
  const SchemaNode s = SchemaNode::structure("t", {SchemaNode::categorical("a", 1),
                                                   SchemaNode::numerical("b")});
  EXPECT_EQ(format_dataset(s, {}, {}, Format::kCsv), "a,b\r\n");
  EXPECT_EQ(format_dataset(s, {}, {}, Format::kJsonl), "");
}

TEST(Emit, EmptyNestedListIsAnEmptyArray) {
  const SchemaNode s = SchemaNode::structure(
      "u", {SchemaNode::list("reviews", SchemaNode::categorical("r", 2), 3)});
  Preprocessing prep;
  prep.vocab["u/reviews/r"] = {"a", "b"};
  EXPECT_EQ(format_dataset(s, {Value::of({Value::of({})})}, prep, Format::kJsonl),
            "{\"reviews\":[]}\n");
  EXPECT_TRUE(contains(error_of([&] { format_dataset(s, {}, prep, Format::kCsv); }), "flat"));
}

TEST(Emit, NonStructRootIsWrappedAndReadsBack) {
  const SchemaNode s = parse_schema(read_text(std::string(NESTGEN_FIXTURES) + "/netflix_schema.json"));
  const auto records = parse_jsonl(R"({"user":[{"movie":{"release_year":3,"title":17},"year":1,"rating":4}]})");
  const Dataset d = ingest(records, s);
  const std::string out = format_dataset(d.schema, d.values, d.prep, Format::kJsonl);
  EXPECT_EQ(parse_jsonl(out), records);
}

// --- artifacts --------------------------------------------------------------

TEST(Artifact, GitBlobHash) {
  EXPECT_EQ(git_blob_hash("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
  EXPECT_EQ(git_blob_hash(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}

TEST(Artifact, SaveLoadIsBitwise) {
  const auto records = parse_jsonl(
      R"({"Age": 31.5, "Sex": "F", "transactions": [{"Place": "shop", "Price": 3.2}]}
{"Age": 40.125, "Sex": "M", "transactions": [{"Place": "cafe", "Price": 1e-7}]})");
  const SchemaNode s = parse_schema(R"({"type":"record","name":"User","fields":[
      {"name":"Age","type":"float","bins":3},{"name":"Sex","type":"enum"},
      {"name":"transactions","type":"array","max_len":4,"shuffled":true,"items":{"type":"record",
       "name":"transaction","fields":[{"name":"Place","type":"enum"},
       {"name":"Price","type":"float","bins":2}]}}]})");
  const Dataset d = ingest(records, s);
  TransformerConfig cfg;
  cfg.width = 16;
  cfg.heads = 4;
  cfg.init_std = 0.37;
  cfg.trainable_c0 = true;
  Model m(d.schema, cfg, d.prep, 11);
  // Perturb every parameter off its initialization grid.
  Rng rng(1);
  for (auto& [_, t] : m.params())
    for (double& x : t.storage()) x += rng.normal() * 1e-3 / 3.0;

  RunManifest manifest;
  manifest.seed = 42;
  manifest.config = {{"epochs", 3}};
  const std::string path = temp_path("model.json");
  save_model(path, m, manifest);
  const LoadedModel back = load_model(path);
  EXPECT_EQ(back.model->params(), m.params());
  EXPECT_EQ(back.model->schema(), m.schema());
  EXPECT_EQ(back.model->preprocessing(), m.preprocessing());
  EXPECT_EQ(back.manifest, manifest);
  for (const auto& [p, t] : m.params()) {
    const auto& u = back.model->params().at(p);
    EXPECT_EQ(std::memcmp(t.storage().data(), u.storage().data(), t.size() * sizeof(double)), 0);
  }
  Rng a(3), b(3);
  EXPECT_EQ(m.sample(a, 20), back.model->sample(b, 20));
}

TEST(Artifact, RejectsForeignFiles) {
  const std::string path = temp_path("not_model.json");
  write_text(path, R"({"format":"other"})");
  EXPECT_TRUE(contains(error_of([&] { load_model(path); }), "not a nestgen model"));
  write_text(path, "garbage");
  EXPECT_TRUE(contains(error_of([&] { load_model(path); }), "not valid JSON"));
  EXPECT_THROW(load_model(temp_path("missing.json")), DataError);
}

TEST(Artifact, ManifestHashesInputs) {
  const std::string a = temp_path("in_a.txt"), b = temp_path("in_b.txt");
  write_text(a, "hello\n");
  write_text(b, "");
  RunManifest m;
  m.hash_inputs({{"schema", a}, {"data", b}});
  EXPECT_EQ(m.input_hashes.at("schema"), "ce013625030ba8dba906f756967f9e9ca394464a");
  EXPECT_EQ(m.input_hash,
            git_blob_hash("data e69de29bb2d1d6434b8b29ae775ad8c2e48c5391\n"
                          "schema ce013625030ba8dba906f756967f9e9ca394464a\n"));
}

}  // namespace
}  // namespace nestgen
