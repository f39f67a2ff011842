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

#include <cmath>
#include <cstring>
#include <string>

#include <gtest/gtest.h>

#include "checks.hpp"
#include "ctxbias.hpp"
#include "oracles.hpp"

namespace ctxbias {
namespace {

using testing::SmallModel;

Vocab TestVocab() { return BuildVocab({"abcdefghijklmnopqrstuvwxyz "}); }

TEST(ModelConfigTest, Validation) {
  ModelConfig c;
  c.vocab_size = 40;
  EXPECT_NO_THROW(c.Validate());
  c.n_heads = 3;
  EXPECT_THROW(c.Validate(), Error);
  c = ModelConfig{};
  c.vocab_size = 40;
  c.gumbel_temperature = 0;
  EXPECT_THROW(c.Validate(), Error);
  EXPECT_DOUBLE_EQ(ModelConfig{}.task_weight_alpha, 0.7);
}

TEST(ModelConfigTest, JsonRejectsUnknownKeys) {
  try {
    ModelConfig::FromJson(nlohmann::json::parse(R"({"d_model": 64, "widht": 3})"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("widht"), std::string::npos);
    EXPECT_EQ(e.kind(), ErrorKind::kUsage);
  }
  ModelConfig c = ModelConfig::FromJson(nlohmann::json::parse(R"({"d_model": 64})"));
  EXPECT_EQ(c.d_model, 64);
  EXPECT_EQ(ModelConfig::FromJson(c.ToJson()).ToJson(), c.ToJson());
}

TEST(ForwardTest, SingleTokenShapes) {
  Vocab v = TestVocab();
  auto m = SmallModel<float>(v);
  auto out = m.Forward({Id(SpecialToken::kBos)});
  EXPECT_EQ(out.token_logits.rows(), 1);
  EXPECT_EQ(out.token_logits.cols(), v.size());
  EXPECT_EQ(out.class_logits.rows(), 1);
  EXPECT_EQ(out.class_logits.cols(), 4);
  EXPECT_EQ(out.backbone_hidden.cols(), 16);
}

TEST(ForwardTest, SoftmaxRowsNormalised) {
  Vocab v = TestVocab();
  auto m = SmallModel<float>(v);
  testing::Jitter(m, 0.2, 1);
  auto out = m.Forward(Encode("<s>hello there", v));
  for (Eigen::Index t = 0; t < out.token_logits.rows(); ++t) {
    RowVec<double> p = Softmax<double>(out.token_logits.row(t).cast<double>());
    EXPECT_NEAR(p.sum(), 1.0, 1e-6);
    RowVec<double> q = Softmax<double>(out.class_logits.row(t).cast<double>());
    EXPECT_NEAR(q.sum(), 1.0, 1e-6);
  }
}

TEST(ForwardTest, TooLongRejectedWithLengths) {
  Vocab v = TestVocab();
  auto m = SmallModel<float>(v, 16, 1, 2, 32, 8);
  try {
    m.Forward(TokenIds(9, v.CharId(U'a')));
    FAIL();
  } catch (const Error& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("9"), std::string::npos);
    EXPECT_NE(msg.find("8"), std::string::npos);
  }
}

TEST(ForwardTest, AttentionRetainedOnRequest) {
  Vocab v = TestVocab();
  auto m = SmallModel<float>(v);
  ForwardOptions<float> opt;
  opt.retain_attention = true;
  auto out = m.Forward(Encode("<s>abc", v), opt);
  ASSERT_EQ(out.attention.size(), 2u);
  ASSERT_EQ(out.attention[0].size(), 2u);
  EXPECT_EQ(out.attention[0][0].rows(), 4);
  EXPECT_TRUE(m.Forward(Encode("<s>abc", v)).attention.empty());
}

// Checksum of the logits of a seeded random model, frozen from a first run.
TEST(ForwardTest, GoldenLogitsChecksum) {
  Vocab v = TestVocab();
  auto m = SmallModel<double>(v, 16, 2, 2, 32, 64, 12345);
  auto out = m.Forward(Encode("<s><PER>amy</PER> Input: call amy", v));
  double token_sum = out.token_logits.sum();
  double token_abs = out.token_logits.cwiseAbs().sum();
  double class_sum = out.class_logits.sum();
  EXPECT_NEAR(token_sum, -1.0807907003206862, 1e-8);
  EXPECT_NEAR(token_abs, 40.859933678542255, 1e-8);
  EXPECT_NEAR(class_sum, -1.5838327353341912, 1e-8);
}

TEST(ForwardTest, CausalityUnderPerturbation) {
  auto r = testing::CheckCausality();
  EXPECT_TRUE(r.ok) << r.detail;
}

TEST(ForwardTest, GumbelInjectionNeedsRng) {
  Vocab v = TestVocab();
  auto m = SmallModel<float>(v);
  ForwardOptions<float> opt;
  opt.injection = Injection::kGumbelHard;
  EXPECT_THROW(m.Forward(Encode("<s>ab", v), opt), Error);
  Rng rng(3);
  opt.rng = &rng;
  EXPECT_NO_THROW(m.Forward(Encode("<s>ab", v), opt));
}

TEST(GumbelTest, Properties) {
  auto r = testing::CheckGumbel();
  EXPECT_TRUE(r.ok) << r.detail;
}

TEST(GumbelTest, StraightThroughUsesSoftGradient) {
  RowVec<double> logits(4), noise(4), soft, d_out(4);
  logits << 0.5, -1.0, 2.0, 0.1;
  noise << 0.2, 0.3, -0.1, 0.0;
  d_out << 1.0, -2.0, 0.5, 3.0;
  RowVec<double> hard = GumbelSoftmaxWithNoise<double>(logits, noise, 0.7, true, &soft);
  RowVec<double> relaxed = GumbelSoftmaxWithNoise<double>(logits, noise, 0.7, false);
  EXPECT_EQ(hard[2], 1.0);
  EXPECT_TRUE(soft.isApprox(relaxed, 1e-15));
  // Finite-difference derivative of d_out . softmax((logits + noise) / tau).
  RowVec<double> g = GumbelSoftmaxBackward<double>(soft, d_out, 0.7);
  for (int i = 0; i < 4; ++i) {
    RowVec<double> up = logits, down = logits;
    up[i] += 1e-6;
    down[i] -= 1e-6;
    double fd = (d_out.dot(GumbelSoftmaxWithNoise<double>(up, noise, 0.7, false)) -
                 d_out.dot(GumbelSoftmaxWithNoise<double>(down, noise, 0.7, false))) / 2e-6;
    EXPECT_NEAR(g[i], fd, 1e-7);
  }
}

TEST(LoraTest, ZeroInitIdentityAndCount) {
  auto r = testing::CheckLoraIdentity();
  EXPECT_TRUE(r.ok) << r.detail;
}

TEST(LoraTest, InvalidApplications) {
  Vocab v = TestVocab();
  auto m = SmallModel<float>(v);
  EXPECT_THROW(m.ApplyLora(0), Error);
  m.ApplyLora(2);
  EXPECT_THROW(m.ApplyLora(2), Error);
}

TEST(LoraTest, TrainingLeavesBaseWeightsUntouched) {
  GenConfig g;
  g.n_train = 40;
  g.n_test = 0;
  auto corpus = GenerateCorpus(g).train;
  Vocab vocab = BuildCorpusVocab(corpus);
  ModelConfig mc;
  mc.vocab_size = vocab.size();
  mc.d_model = 16;
  mc.n_heads = 2;
  mc.d_ff = 32;
  mc.max_seq_len = 512;
  Checkpoint base;
  base.model = MultiTaskLM<float>::Create(mc);
  base.vocab = vocab;
  const auto before = base.model.weights();

  ModelConfig with_adapters = mc;
  with_adapters.lora_rank = 4;
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 4;
  tc.holdout_fraction = 0;
  auto result = Train(corpus, vocab, with_adapters, tc, base);
  const auto& model = result.checkpoint.model;
  ASSERT_TRUE(model.HasAdapters());
  EXPECT_EQ(result.checkpoint.state.step, 10);

  std::vector<const Mat<float>*> old_tensors;
  VisitTensors(before, [&](const std::string&, const Mat<float>& t) { old_tensors.push_back(&t); });
  size_t i = 0;
  bool adapters_moved = false;
  VisitTensors(model.weights(), [&](const std::string& name, const Mat<float>& t) {
    if (IsAdapterTensor(name)) {
      adapters_moved = adapters_moved || t.cwiseAbs().maxCoeff() > 0;
      return;
    }
    const Mat<float>& o = *old_tensors[i++];
    ASSERT_EQ(t.size(), o.size()) << name;
    EXPECT_EQ(std::memcmp(t.data(), o.data(), sizeof(float) * t.size()), 0) << name;
  });
  EXPECT_TRUE(adapters_moved);
}

TEST(ParameterCountTest, MatchesClosedForm) {
  Vocab v = TestVocab();
  for (int rank : {0, 3}) {
    ModelConfig c;
    c.vocab_size = v.size();
    c.d_model = 24;
    c.n_layers = 3;
    c.n_heads = 4;
    c.d_ff = 40;
    c.max_seq_len = 50;
    c.lora_rank = rank;
    auto m = MultiTaskLM<float>::Create(c);
    EXPECT_EQ(m.ParameterCount(), MultiTaskLM<float>::ExpectedParameterCount(c));
  }
  ModelConfig c;
  c.vocab_size = 38;
  // Hand count for the default architecture.
  const size_t per_layer = 4 * 128 + 4 * 128 * 128 + 2 * 128 * 512 + 512 + 128;
  const size_t expected = 38 * 128 + 512 * 128 + 2 * per_layer + 2 * 128 + 128 * 4 + 4 +
                          4 * 128 + 128 * 38 + 38;
  EXPECT_EQ(MultiTaskLM<float>::ExpectedParameterCount(c), expected);
}

TEST(CastTest, RoundTripThroughDouble) {
  Vocab v = TestVocab();
  auto m = SmallModel<float>(v);
  m.ApplyLora(2);
  auto back = m.Cast<double>().Cast<float>();
  std::vector<const Mat<float>*> a;
  VisitTensors(m.weights(), [&](const std::string&, const Mat<float>& t) { a.push_back(&t); });
  size_t i = 0;
  VisitTensors(back.weights(), [&](const std::string&, const Mat<float>& t) { EXPECT_TRUE(t == *a[i++]); });
  EXPECT_EQ(i, a.size());
}

TEST(SentenceLogLikelihoodTest, SingleCharacterInput) {
  Vocab v = TestVocab();
  auto m = SmallModel<float>(v);
  Rescorer<float> r(m, v, ScoringOptions{false});
  Prompt p = BuildPrompt(v, {}, BiasingList{}, "a");
  EXPECT_EQ(r.TermLogProbs(p).size(), 1u);
  Rescorer<float> with_eos(m, v);
  EXPECT_EQ(with_eos.TermLogProbs(p).size(), 2u);
}

TEST(SentenceLogLikelihoodTest, IrrelevantEntityChangesScoreNotTermCount) {
  Vocab v = TestVocab();
  auto m = SmallModel<float>(v);
  testing::Jitter(m, 0.1, 4);
  Rescorer<float> r(m, v);
  BiasingList a, b;
  a.Add(EntityClass::kPer, "amy");
  b = a;
  b.Add(EntityClass::kLoc, "oslo");
  Prompt pa = BuildPrompt(v, {}, a, "call amy");
  Prompt pb = BuildPrompt(v, {}, b, "call amy");
  EXPECT_EQ(r.TermLogProbs(pa).size(), r.TermLogProbs(pb).size());
  EXPECT_NE(r.SentenceLogLikelihood(pa), r.SentenceLogLikelihood(pb));
}

TEST(SentenceLogLikelihoodTest, MatchesNaiveArithmetic) {
  Vocab v = TestVocab();
  ModelConfig c;
  c.vocab_size = v.size();
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_seq_len = 32;
  c.seed = 17;
  auto m = MultiTaskLM<double>::Create(c);
  testing::Jitter(m, 0.4, 18);
  BiasingList list;
  list.Add(EntityClass::kPer, "abe");
  Prompt p = BuildPrompt(v, {}, list, "abc");
  ASSERT_EQ(p.input.size(), 3u);
  for (bool eos : {false, true}) {
    Rescorer<double> r(m, v, ScoringOptions{eos});
    long double naive = testing::NaiveSentenceLogLikelihood(m, p, eos);
    EXPECT_NEAR(r.SentenceLogLikelihood(p), static_cast<double>(naive), 1e-10);
  }
}

}  // namespace
}  // namespace ctxbias
