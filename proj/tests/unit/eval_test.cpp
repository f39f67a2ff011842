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

#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "checks.hpp"
#include "ctxbias.hpp"

namespace ctxbias {
namespace {

struct Fixture {
  GeneratedCorpus data;
  Vocab vocab;
  MultiTaskLM<float> model;
};

const Fixture& Small() {
  static const Fixture f = [] {
    GenConfig g;
    g.n_train = 20;
    g.n_test = 12;
    g.inventory_size = {40, 40, 40};
    g.seed = 31;
    Fixture out;
    out.data = GenerateCorpus(g);
    out.vocab = BuildCorpusVocab(out.data.train);
    out.model = testing::SmallModel<float>(out.vocab, 16, 2, 2, 32, 256, 5);
    testing::Jitter(out.model, 0.2, 6);
    return out;
  }();
  return f;
}

TEST(EvaluateTest, OracleBoundsEveryMode) {
  const auto& f = Small();
  auto r = Evaluate(f.model, f.vocab, f.data.test, f.data.train, EvalOptions{});
  EXPECT_EQ(r.n_utterances, f.data.test.size());
  ASSERT_EQ(r.modes.size(), 4u);
  EXPECT_LE(r.oracle.errors(), r.baseline.errors());
  for (const auto& m : r.modes) {
    EXPECT_LE(r.oracle.errors(), m.breakdown.errors()) << ModeName(m.mode);
    EXPECT_EQ(m.breakdown.ref_len, r.baseline.ref_len);
    EXPECT_DOUBLE_EQ(m.relative_improvement, r.RelativeImprovement(m.breakdown.wer()));
  }
  WerBreakdown first;
  for (const auto& u : f.data.test) first += Wer(u.nbest.reference, u.nbest.hypotheses[0].text);
  EXPECT_EQ(first.errors(), r.baseline.errors());
  EXPECT_LT(r.Mode(RescoreMode::kPlain).mean_prompt_length,
            r.Mode(RescoreMode::kStatic).mean_prompt_length);
}

TEST(EvaluateTest, NoModesReportsBaselineAndOracleOnly) {
  const auto& f = Small();
  EvalOptions o;
  o.modes = {};
  auto r = Evaluate(f.model, f.vocab, f.data.test, {}, o);
  EXPECT_TRUE(r.modes.empty());
  EXPECT_TRUE(r.ToJson()["modes"].empty());
  EXPECT_THROW(r.Mode(RescoreMode::kPlain), Error);
  EXPECT_GT(r.baseline.ref_len, 0);
}

TEST(EvaluateTest, ThreadCountDoesNotChangeResults) {
  const auto& f = Small();
  EvalOptions a, b;
  b.threads = 3;
  std::vector<UtteranceOutput> oa, ob;
  auto ra = Evaluate(f.model, f.vocab, f.data.test, f.data.train, a, &oa);
  auto rb = Evaluate(f.model, f.vocab, f.data.test, f.data.train, b, &ob);
  EXPECT_EQ(ra.ToJson().dump(), rb.ToJson().dump());
  std::ostringstream sa, sb;
  WriteUtteranceOutputs(sa, oa);
  WriteUtteranceOutputs(sb, ob);
  EXPECT_EQ(sa.str(), sb.str());
}

TEST(EvaluateTest, UtteranceOutputsMatchReport) {
  const auto& f = Small();
  EvalOptions o;
  o.modes = {RescoreMode::kStatic};
  std::vector<UtteranceOutput> out;
  auto r = Evaluate(f.model, f.vocab, f.data.test, {}, o, &out);
  ASSERT_EQ(out.size(), f.data.test.size());
  WerBreakdown sum;
  for (size_t i = 0; i < out.size(); ++i) {
    EXPECT_EQ(out[i].utterance_id, f.data.test[i].id);
    EXPECT_EQ(out[i].scored.size(), f.data.test[i].nbest.hypotheses.size());
    sum += Wer(f.data.test[i].nbest.reference, out[i].selected_text);
    auto j = out[i].ToJson();
    EXPECT_EQ(j["mode"], "static");
    EXPECT_EQ(j["scores"].size(), j["per_token_classes"].size());
  }
  EXPECT_EQ(sum.errors(), r.Mode(RescoreMode::kStatic).breakdown.errors());
}

TEST(EvaluateTest, EmptyCorpusRejected) {
  const auto& f = Small();
  EXPECT_THROW(Evaluate(f.model, f.vocab, {}, {}, EvalOptions{}), Error);
}

TEST(SampleFewShotTest, ExcludesSelfAndIsDeterministic) {
  const auto& f = Small();
  const auto& self = f.data.train[3];
  auto a = SampleFewShot(f.data.train, self, 3, 9, 0);
  auto b = SampleFewShot(f.data.train, self, 3, 9, 0);
  ASSERT_EQ(a.size(), 3u);
  for (size_t i = 0; i < a.size(); ++i) {
    EXPECT_NE(a[i].sentence, self.text);
    EXPECT_EQ(a[i].sentence, b[i].sentence);
  }
}

TEST(ResizeTest, BalancedQuota) {
  EXPECT_EQ(BalancedQuota(6), (std::array<size_t, 3>{2, 2, 2}));
  EXPECT_EQ(BalancedQuota(7), (std::array<size_t, 3>{3, 2, 2}));
  EXPECT_EQ(BalancedQuota(2), (std::array<size_t, 3>{1, 1, 0}));
}

TEST(ResizeTest, KeepsGroundTruthAndFillsQuota) {
  BiasingList base;
  base.Add(EntityClass::kPer, "x1");
  base.Add(EntityClass::kPer, "amy");
  base.Add(EntityClass::kLoc, "oslo");
  std::array<std::vector<std::string>, 3> d = {
      std::vector<std::string>{"amy", "p1", "p2", "p3"}, {"l1", "l2", "l3"}, {"o1", "o2", "o3"}};
  auto small = ResizeBiasingList(base, d, {"amy"}, 3);
  EXPECT_EQ(small.Entities(EntityClass::kPer), (std::vector<std::string>{"amy"}));
  EXPECT_EQ(small.Entities(EntityClass::kLoc), (std::vector<std::string>{"oslo"}));
  EXPECT_EQ(small.Entities(EntityClass::kOrg), (std::vector<std::string>{"o1"}));

  auto big = ResizeBiasingList(base, d, {"amy"}, 9);
  EXPECT_EQ(big.Entities(EntityClass::kPer), (std::vector<std::string>{"x1", "amy", "p1"}));
  EXPECT_EQ(big.Entities(EntityClass::kLoc), (std::vector<std::string>{"oslo", "l1", "l2"}));
  EXPECT_EQ(big.Size(), 9u);
}

TEST(ResizeTest, ExhaustedPoolNamesTheClass) {
  BiasingList base;
  std::array<std::vector<std::string>, 3> d = {std::vector<std::string>{"p1"}, {"l1"}, {}};
  try {
    ResizeBiasingList(base, d, {}, 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kData);
    EXPECT_NE(std::string(e.what()).find("ORG"), std::string::npos);
  }
}

TEST(SweepTest, NativeLengthMatchesStandardEvaluation) {
  const auto& f = Small();
  EvalOptions o;
  o.modes = {RescoreMode::kStatic, RescoreMode::kDynamic};
  auto r = Evaluate(f.model, f.vocab, f.data.test, {}, o);
  auto s = SweepListLength(f.model, f.vocab, f.data.test, {6}, o.modes, o, f.data.train);
  for (RescoreMode m : o.modes) {
    EXPECT_EQ(s.At(6, m).breakdown.errors(), r.Mode(m).breakdown.errors()) << ModeName(m);
    EXPECT_DOUBLE_EQ(s.At(6, m).mean_prompt_length, r.Mode(m).mean_prompt_length);
  }
}

TEST(SweepTest, PromptLengthGrowsWithListLength) {
  const auto& f = Small();
  EvalOptions o;
  auto s = SweepListLength(f.model, f.vocab, f.data.test, {3, 9, 15}, {RescoreMode::kStatic}, o,
                           f.data.train);
  EXPECT_LT(s.At(3, RescoreMode::kStatic).mean_prompt_length,
            s.At(9, RescoreMode::kStatic).mean_prompt_length);
  EXPECT_LT(s.At(9, RescoreMode::kStatic).mean_prompt_length,
            s.At(15, RescoreMode::kStatic).mean_prompt_length);
  std::istringstream csv(s.ToCsv());
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "list_length,mode,wer");
  std::getline(csv, line);
  EXPECT_EQ(ParseCsvLine(line)[0], "3");
  EXPECT_EQ(ParseCsvLine(line)[1], "static");
  EXPECT_GE(s.Spread(RescoreMode::kStatic), 0.0);
}

TEST(SweepTest, OversizedListsExhaustThePool) {
  const auto& f = Small();
  EXPECT_THROW(SweepListLength(f.model, f.vocab, f.data.test, {100000}, {RescoreMode::kStatic},
                               EvalOptions{}),
               Error);
}

TEST(CsvTest, QuoteRoundTrip) {
  for (std::string s : {"a", "", "x,y", "say \"hi\"", "<PER>", " "}) {
    auto fields = ParseCsvLine(CsvQuote(s) + "," + CsvQuote("z"));
    ASSERT_EQ(fields.size(), 2u);
    EXPECT_EQ(fields[0], s);
  }
}

TEST(AttentionTest, ExportedRowsAreDistributions) {
  const auto& f = Small();
  BiasingList list;
  list.Add(EntityClass::kLoc, f.data.test[0].biasing_list.Entities(EntityClass::kLoc)[0]);
  Prompt p = BuildPrompt(f.vocab, {}, list, "call me");
  auto dir = std::filesystem::temp_directory_path() / "ctxbias_attention_test";
  std::filesystem::remove_all(dir);
  auto files = ExportAttention(f.model, f.vocab, p, {0, 1}, dir);
  ASSERT_EQ(files.size(), 4u);
  for (const auto& x : files) {
    std::ifstream in(x.path);
    std::string line;
    std::getline(in, line);
    auto header = ParseCsvLine(line);
    ASSERT_EQ(header.size(), p.size() + 1);
    EXPECT_EQ(header[0], "");
    for (size_t i = 0; i < p.size(); ++i) EXPECT_EQ(header[i + 1], f.vocab.Surface(p.ids[i]));
    size_t rows = 0;
    while (std::getline(in, line)) {
      auto cells = ParseCsvLine(line);
      EXPECT_EQ(cells[0], header[rows + 1]);
      double sum = 0;
      for (size_t c = 1; c < cells.size(); ++c) {
        double v = std::stod(cells[c]);
        if (c - 1 > rows) {
          EXPECT_EQ(v, 0.0);
        }
        sum += v;
      }
      EXPECT_NEAR(sum, 1.0, 1e-6);
      ++rows;
    }
    EXPECT_EQ(rows, p.size());
  }
  std::filesystem::remove_all(dir);
}

TEST(AttentionTest, InvalidLayerIsUsageError) {
  const auto& f = Small();
  Prompt p = BuildPrompt(f.vocab, {}, {}, "call me");
  try {
    ExportAttention(f.model, f.vocab, p, {2}, std::filesystem::temp_directory_path());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kUsage);
  }
}

}  // namespace
}  // namespace ctxbias
