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

#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "ctxbias/model.hpp"

namespace ctxbias {

// Target value meaning "no loss at this position".
inline constexpr int kIgnoreTarget = -1;

using ClassWeights = std::array<double, kNumClasses>;

// Per-class weights for the class loss: entity classes 0.33, NONE 0.01.
inline constexpr ClassWeights kDefaultClassWeights = {0.33, 0.33, 0.33, 0.01};

struct LossBreakdown {
  double total = 0;
  double token = 0;
  double cls = 0;
};

// Denominators of the two means, so a batch can be treated as one long
// sequence: token loss divides by the scored-position count, class loss by
// the summed class weights of the scored positions.
struct LossNormalizer {
  double token_count = 0;
  double class_weight = 0;

  void Add(const std::vector<int>& token_targets, const std::vector<int>& class_targets,
           const ClassWeights& weights) {
    for (int t : token_targets) token_count += t != kIgnoreTarget;
    for (int c : class_targets) {
      if (c != kIgnoreTarget) class_weight += weights.at(c);
    }
  }
};

// Adds this sequence's share of alpha * L_token + (1 - alpha) * L_class and
// writes the gradients of that share w.r.t. both logit matrices.
template <typename S>
LossBreakdown AccumulateMultitaskLoss(const ForwardOutput<S>& out,
                                      const std::vector<int>& token_targets,
                                      const std::vector<int>& class_targets, double alpha,
                                      const ClassWeights& class_weights,
                                      const LossNormalizer& norm, Mat<S>* d_token_logits,
                                      Mat<S>* d_class_logits) {
  const Eigen::Index T = out.token_logits.rows();
  if (static_cast<Eigen::Index>(token_targets.size()) != T ||
      static_cast<Eigen::Index>(class_targets.size()) != T) {
    ThrowData("loss: target length mismatch (" + std::to_string(token_targets.size()) + ", " +
              std::to_string(class_targets.size()) + ") vs " + std::to_string(T) +
              " positions");
  }
  LossBreakdown loss;
  if (d_token_logits) d_token_logits->setZero(T, out.token_logits.cols());
  if (d_class_logits) d_class_logits->setZero(T, out.class_logits.cols());

  for (Eigen::Index t = 0; t < T; ++t) {
    int target = token_targets[t];
    if (target == kIgnoreTarget || norm.token_count <= 0) continue;
    loss.token -= LogSoftmaxAt(out.token_logits, t, target) / norm.token_count;
    if (d_token_logits) {
      RowVec<S> p = Softmax<S>(out.token_logits.row(t));
      p[target] -= S(1);
      d_token_logits->row(t) = p * static_cast<S>(alpha / norm.token_count);
    }
  }
  for (Eigen::Index t = 0; t < T; ++t) {
    int target = class_targets[t];
    if (target == kIgnoreTarget || norm.class_weight <= 0) continue;
    double w = class_weights.at(target) / norm.class_weight;
    loss.cls -= w * LogSoftmaxAt(out.class_logits, t, target);
    if (d_class_logits) {
      RowVec<S> p = Softmax<S>(out.class_logits.row(t));
      p[target] -= S(1);
      d_class_logits->row(t) = p * static_cast<S>((1.0 - alpha) * w);
    }
  }
  loss.total = alpha * loss.token + (1.0 - alpha) * loss.cls;
  return loss;
}

// Multi-task loss of one sequence. Targets are the NEXT token and the NEXT
// token's class at each position; kIgnoreTarget masks a position.
template <typename S>
LossBreakdown MultitaskLoss(const ForwardOutput<S>& out, const std::vector<int>& token_targets,
                            const std::vector<int>& class_targets, double alpha,
                            const ClassWeights& class_weights = kDefaultClassWeights,
                            Mat<S>* d_token_logits = nullptr, Mat<S>* d_class_logits = nullptr) {
  if (token_targets.size() != class_targets.size()) {
    ThrowData("loss: token and class target lengths differ");
  }
  LossNormalizer norm;
  norm.Add(token_targets, class_targets, class_weights);
  return AccumulateMultitaskLoss(out, token_targets, class_targets, alpha, class_weights, norm,
                                 d_token_logits, d_class_logits);
}

}  // namespace ctxbias
