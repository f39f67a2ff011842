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

#include <gtest/gtest.h>

#include "checks.hpp"
#include "ctxbias.hpp"

namespace ctxbias {
namespace {

ForwardOutput<double> FixedOutput() {
  ForwardOutput<double> out;
  out.token_logits = Mat<double>::Zero(3, 5);
  out.class_logits = Mat<double>::Zero(3, 4);
  out.class_logits(1, 3) = std::log(3.0);  // NONE gets probability 3/6
  return out;
}

TEST(MultitaskLossTest, HandComputedWeightedBatch) {
  auto out = FixedOutput();
  // Position 0 -> PER, 1 -> NONE, 2 -> LOC.
  std::vector<int> tt = {1, 2, 3};
  std::vector<int> ct = {0, 3, 1};
  auto loss = MultitaskLoss(out, tt, ct, 0.7);
  const double token = std::log(5.0);
  const double cls = (0.33 * std::log(4.0) + 0.01 * std::log(2.0) + 0.33 * std::log(4.0)) /
                     (0.33 + 0.01 + 0.33);
  EXPECT_NEAR(loss.token, token, 1e-12);
  EXPECT_NEAR(loss.cls, cls, 1e-12);
  EXPECT_NEAR(loss.total, 0.7 * token + 0.3 * cls, 1e-12);
  EXPECT_NEAR(loss.cls, 1.3759488808130258, 1e-12);
}

TEST(MultitaskLossTest, BoundaryIdentities) {
  auto r = testing::CheckLossBoundaries();
  EXPECT_TRUE(r.ok) << r.detail;
}

TEST(MultitaskLossTest, IgnoredPositionsContributeNothing) {
  auto out = FixedOutput();
  out.token_logits(2, 4) = 9.0;
  out.class_logits(2, 2) = -4.0;
  auto a = MultitaskLoss(out, {1, 2, kIgnoreTarget}, {0, 3, kIgnoreTarget}, 0.7);
  out.token_logits(2, 0) = 100.0;
  auto b = MultitaskLoss(out, {1, 2, kIgnoreTarget}, {0, 3, kIgnoreTarget}, 0.7);
  EXPECT_EQ(a.total, b.total);
  Mat<double> d_tok, d_cls;
  MultitaskLoss(out, {1, 2, kIgnoreTarget}, {0, 3, kIgnoreTarget}, 0.7, kDefaultClassWeights,
                &d_tok, &d_cls);
  EXPECT_EQ(d_tok.row(2).cwiseAbs().sum(), 0.0);
  EXPECT_EQ(d_cls.row(2).cwiseAbs().sum(), 0.0);
}

TEST(MultitaskLossTest, LengthMismatchRejected) {
  auto out = FixedOutput();
  EXPECT_THROW(MultitaskLoss(out, {1, 2}, {0, 3}, 0.7), Error);
  EXPECT_THROW(MultitaskLoss(out, {1, 2, 3}, {0, 3}, 0.7), Error);
}

TEST(MultitaskLossTest, BatchNormalizerSplitsAcrossSequences) {
  auto out = FixedOutput();
  std::vector<int> tt = {1, 2, 3}, ct = {0, 3, 1};
  LossNormalizer norm;
  norm.Add(tt, ct, kDefaultClassWeights);
  norm.Add(tt, ct, kDefaultClassWeights);
  auto half = AccumulateMultitaskLoss<double>(out, tt, ct, 0.7, kDefaultClassWeights, norm,
                                              nullptr, nullptr);
  auto whole = MultitaskLoss(out, tt, ct, 0.7);
  EXPECT_NEAR(2 * half.total, whole.total, 1e-12);
}

}  // namespace
}  // namespace ctxbias
