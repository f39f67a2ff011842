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

#include <cmath>
#include <string>

#include "ctxbias/model.hpp"

namespace ctxbias {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Adam with decoupled weight decay. Decay applies to projection matrices
// only; gains, biases and embedding tables are not decayed.
template <typename S>
class AdamW {
 public:
  AdamW(const Weights<S>& like, AdamWOptions options)
      : options_(options), m_(ZerosLike(like)), v_(ZerosLike(like)) {}

  void Step(Weights<S>& params, const Weights<S>& grads, double lr, bool has_adapters) {
    ++t_;
    const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
    std::vector<const Mat<S>*> g_list;
    std::vector<Mat<S>*> m_list, v_list;
    VisitTensors(grads, [&](const std::string&, const Mat<S>& g) { g_list.push_back(&g); });
    VisitTensors(m_, [&](const std::string&, Mat<S>& m) { m_list.push_back(&m); });
    VisitTensors(v_, [&](const std::string&, Mat<S>& v) { v_list.push_back(&v); });
    size_t i = 0;
    VisitTensors(params, [&](const std::string& name, Mat<S>& p) {
      const size_t k = i++;
      if (!IsTrainableTensor(name, has_adapters)) return;
      const auto& g = g_list[k]->array();
      auto m = m_list[k]->array();
      auto v = v_list[k]->array();
      m = m * static_cast<S>(options_.beta1) + g * static_cast<S>(1 - options_.beta1);
      v = v * static_cast<S>(options_.beta2) + g.square() * static_cast<S>(1 - options_.beta2);
      if (Decays(name)) p.array() *= static_cast<S>(1.0 - lr * options_.weight_decay);
      p.array() -= static_cast<S>(lr) * (m / static_cast<S>(bc1)) /
                   ((v / static_cast<S>(bc2)).sqrt() + static_cast<S>(options_.eps));
    });
  }

  long steps() const { return t_; }

 private:
  static bool Decays(const std::string& name) {
    auto ends_with = [&](const char* s) {
      std::string suffix(s);
      return name.size() >= suffix.size() &&
             name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    return ends_with("wq") || ends_with("wk") || ends_with("wv") || ends_with("wo") ||
           ends_with("w1") || ends_with("w2") || name == "class_w" || name == "token_w";
  }

  AdamWOptions options_;
  Weights<S> m_, v_;
  long t_ = 0;
};

// Global L2 norm over trainable gradients; scales them down to max_norm.
template <typename S>
double ClipGradNorm(Weights<S>& grads, double max_norm, bool has_adapters) {
  double sq = 0;
  VisitTensors(grads, [&](const std::string& name, const Mat<S>& g) {
    if (IsTrainableTensor(name, has_adapters)) sq += g.template cast<double>().squaredNorm();
  });
  double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const S scale = static_cast<S>(max_norm / (norm + 1e-12));
    VisitTensors(grads, [&](const std::string&, Mat<S>& g) { g *= scale; });
  }
  return norm;
}

}  // namespace ctxbias
