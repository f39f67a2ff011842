// Copyright (c) 2026 The ctxbias Authors
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

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "ctxbias.hpp"

namespace ctxbias {
namespace {

namespace fs = std::filesystem;

struct RunResult {
  int code = -1;
  std::string output;
};

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("ctxbias_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  RunResult Run(const std::string& args) {
    fs::path log = dir_ / "cmd.log";
    std::string cmd = std::string(CTXBIAS_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.output = ReadFile(log);
    return r;
  }

  fs::path Write(const std::string& name, const std::string& text) {
    fs::path p = dir_ / name;
    WriteFile(p, text);
    return p;
  }

  std::string P(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

const char* kTinyConfig = R"({
  "gen": {"n_train": 24, "n_test": 6, "inventory_size": [30, 30, 30]},
  "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "max_seq_len": 256},
  "train": {"epochs": 1, "batch_size": 8, "warmup_steps": 1}
})";

TEST_F(CliTest, GenDataIsDeterministic) {
  auto cfg = Write("cfg.json", kTinyConfig);
  ASSERT_EQ(Run("gen-data --config " + cfg.string() + " --seed 5 --out " + P("a")).code, 0);
  ASSERT_EQ(Run("gen-data --config " + cfg.string() + " --seed 5 --out " + P("b")).code, 0);
  ASSERT_EQ(Run("gen-data --config " + cfg.string() + " --seed 6 --out " + P("c")).code, 0);
  EXPECT_EQ(ReadFile(P("a/train.jsonl")), ReadFile(P("b/train.jsonl")));
  EXPECT_EQ(ReadFile(P("a/test.jsonl")), ReadFile(P("b/test.jsonl")));
  EXPECT_NE(ReadFile(P("a/train.jsonl")), ReadFile(P("c/train.jsonl")));
  auto resolved = nlohmann::json::parse(ReadFile(P("a/resolved_config.json")));
  EXPECT_EQ(resolved["seed"], 5);
  EXPECT_EQ(resolved["gen"]["seed"], 5);
  EXPECT_EQ(resolved["train"]["seed"], 5);
  EXPECT_EQ(resolved["gen"]["n_train"], 24);
  std::istringstream in(ReadFile(P("a/train.jsonl")));
  EXPECT_EQ(CorpusFromJsonl(in).size(), 24u);
}

TEST_F(CliTest, UnknownConfigKeyIsUsageError) {
  auto cfg = Write("cfg.json", R"({"train": {"epochs": 1, "learning_rat": 0.1}})");
  auto r = Run("gen-data --config " + cfg.string() + " --out " + P("o"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("learning_rat"), std::string::npos) << r.output;
  auto top = Write("top.json", R"({"sed": 3})");
  r = Run("gen-data --config " + top.string() + " --out " + P("o"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("sed"), std::string::npos) << r.output;
}

TEST_F(CliTest, UsageAndDataErrors) {
  EXPECT_EQ(Run("").code, 1);
  EXPECT_EQ(Run("frobnicate").code, 1);
  EXPECT_EQ(Run("train --out " + P("o")).code, 1);
  EXPECT_EQ(Run("gen-data --config " + Write("bad.json", "{nope").string() + " --out " + P("o")).code, 1);
  EXPECT_EQ(Run("gen-data --config " + P("missing.json") + " --out " + P("o")).code, 2);
  auto r = Run("train --corpus " + P("missing.jsonl") + " --out " + P("o"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("missing.jsonl"), std::string::npos) << r.output;
  auto bad = Write("bad.jsonl", "{\"schema_version\": 1}\n");
  EXPECT_EQ(Run("train --corpus " + bad.string() + " --out " + P("o")).code, 2);
  auto invalid = Write("inv.json", R"({"train": {"batch_size": 0}})");
  EXPECT_EQ(Run("gen-data --config " + invalid.string() + " --out " + P("o")).code, 1);
}

TEST_F(CliTest, TrainResumeEvalSweepAttention) {
  auto cfg = Write("cfg.json", kTinyConfig).string();
  ASSERT_EQ(Run("gen-data --config " + cfg + " --out " + P("d")).code, 0);
  auto r = Run("train --config " + cfg + " --corpus " + P("d/train.jsonl") + " --out " + P("m"));
  ASSERT_EQ(r.code, 0) << r.output;
  ASSERT_TRUE(fs::exists(P("m/model.ckpt")));
  {
    std::istringstream log(ReadFile(P("m/train_log.jsonl")));
    std::string line;
    ASSERT_TRUE(std::getline(log, line));
    auto j = nlohmann::json::parse(line);
    for (const char* k : {"epoch", "step", "l_token", "l_class", "total", "class_f1"}) {
      EXPECT_TRUE(j.contains(k)) << k;
    }
    EXPECT_EQ(j["epoch"], 1);
    EXPECT_EQ(j["step"], 3);
  }

  r = Run("train --config " + cfg + " --corpus " + P("d/train.jsonl") + " --resume " +
          P("m/model.ckpt") + " --out " + P("m2"));
  ASSERT_EQ(r.code, 0) << r.output;
  auto resumed = nlohmann::json::parse(ReadFile(P("m2/train_log.jsonl")));
  EXPECT_EQ(resumed["epoch"], 2);
  EXPECT_EQ(resumed["step"], 6);
  EXPECT_EQ(LoadCheckpoint(P("m2/model.ckpt")).state.step, 6);

  r = Run("eval --config " + cfg + " --checkpoint " + P("m/model.ckpt") + " --corpus " +
          P("d/test.jsonl") + " --modes plain,dynamic --out " + P("e"));
  ASSERT_EQ(r.code, 0) << r.output;
  auto report = nlohmann::json::parse(ReadFile(P("e/report.json")));
  EXPECT_EQ(report["modes"].size(), 2u);
  EXPECT_TRUE(report["modes"]["dynamic"].contains("relative_improvement"));
  EXPECT_TRUE(report["modes"]["dynamic"].contains("wer"));
  EXPECT_TRUE(fs::exists(P("e/utterances.jsonl")));
  EXPECT_EQ(Run("eval --checkpoint " + P("m/model.ckpt") + " --corpus " + P("d/test.jsonl") +
                " --modes plain,loud --out " + P("e2"))
                .code,
            1);

  r = Run("sweep --config " + cfg + " --checkpoint " + P("m/model.ckpt") + " --corpus " +
          P("d/test.jsonl") + " --pool " + P("d/train.jsonl") + " --lengths 3,9 --out " + P("s"));
  ASSERT_EQ(r.code, 0) << r.output;
  std::istringstream csv(ReadFile(P("s/sweep.csv")));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "list_length,mode,wer");
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 4);

  r = Run("export-attention --checkpoint " + P("m/model.ckpt") +
          " --sentence 'call me' --biasing-list '{\"PER\": [\"amy\"]}' --out " + P("a"));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(P("a/attention_layer0_head0.csv")));
  EXPECT_TRUE(fs::exists(P("a/attention_layer0_head1.csv")));
  EXPECT_EQ(Run("export-attention --checkpoint " + P("m/model.ckpt") +
                " --sentence 'call me' --layers 4 --out " + P("a2"))
                .code,
            1);
  EXPECT_EQ(Run("eval --checkpoint " + Write("junk.ckpt", "junk").string() + " --corpus " +
                P("d/test.jsonl") + " --out " + P("e3"))
                .code,
            2);
}

TEST_F(CliTest, IngestAttachesListsAndHypotheses) {
  auto in = Write("in.jsonl",
                  R"({"text": "call anna", "entities": [{"start": 5, "end": 9, "class": "PER"}]})"
                  "\n"
                  R"({"text": "call bert", "entities": [{"start": 5, "end": 9, "class": "PER"}]})"
                  "\n"
                  R"({"text": "call cleo", "entities": [{"start": 5, "end": 9, "class": "PER"}]})"
                  "\n");
  auto r = Run("ingest --input " + in.string() + " --classes PER --out " + P("i"));
  ASSERT_EQ(r.code, 0) << r.output;
  auto corpus = LoadCorpus(P("i/corpus.jsonl"));
  ASSERT_EQ(corpus.size(), 3u);
  for (const auto& u : corpus) {
    EXPECT_FALSE(u.nbest.hypotheses.empty());
    EXPECT_TRUE(u.biasing_list.Contains(EntityClass::kPer, u.EntityText(u.spans[0])));
  }
  auto bad = Write("bad.jsonl", R"({"text": "x", "entities": [{"start": 0, "end": 1, "class": "ZZZ"}]})");
  r = Run("ingest --input " + bad.string() + " --out " + P("i2"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("ZZZ"), std::string::npos);
}

}  // namespace
}  // namespace ctxbias
