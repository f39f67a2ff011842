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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "ctxbias/entity.hpp"
#include "ctxbias/error.hpp"
#include "ctxbias/random.hpp"
#include "ctxbias/tokenizer.hpp"

namespace ctxbias {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;
template <typename S>
using ColVec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

namespace detail {

inline void RejectUnknownKeys(const nlohmann::json& j, std::initializer_list<const char*> known,
                              const std::string& where) {
  if (!j.is_object()) ThrowUsage(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) ThrowUsage("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void ReadKey(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    ThrowUsage(std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace detail

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 128;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 512;
  int max_seq_len = 512;
  int n_classes = kNumClasses;
  double gumbel_temperature = 1.0;
  // Straight-through (hard) Gumbel in training; false trains on soft samples.
  bool gumbel_hard = true;
  double task_weight_alpha = 0.7;
  int lora_rank = 0;
  double dropout = 0.0;
  uint64_t seed = 0;

  void Validate() const {
    auto fail = [](const std::string& m) { ThrowUsage("invalid model config: " + m); };
    if (vocab_size <= kNumSpecialTokens) fail("vocab_size must exceed the special tokens");
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0) fail("sizes must be positive");
    if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
    if (max_seq_len <= 0) fail("max_seq_len must be positive");
    if (n_classes != kNumClasses) fail("n_classes must be 4");
    if (!(gumbel_temperature > 0)) fail("gumbel_temperature must be positive");
    if (task_weight_alpha < 0 || task_weight_alpha > 1) fail("task_weight_alpha must be in [0,1]");
    if (lora_rank < 0) fail("lora_rank must be >= 0");
    if (dropout < 0 || dropout >= 1) fail("dropout must be in [0,1)");
  }

  nlohmann::ordered_json ToJson() const {
    return {{"vocab_size", vocab_size},
            {"d_model", d_model},
            {"n_layers", n_layers},
            {"n_heads", n_heads},
            {"d_ff", d_ff},
            {"max_seq_len", max_seq_len},
            {"n_classes", n_classes},
            {"gumbel_temperature", gumbel_temperature},
            {"gumbel_hard", gumbel_hard},
            {"task_weight_alpha", task_weight_alpha},
            {"lora_rank", lora_rank},
            {"dropout", dropout},
            {"seed", seed}};
  }

  static ModelConfig FromJson(const nlohmann::json& j) {
    detail::RejectUnknownKeys(j,
                              {"vocab_size", "d_model", "n_layers", "n_heads", "d_ff",
                               "max_seq_len", "n_classes", "gumbel_temperature", "gumbel_hard",
                               "task_weight_alpha", "lora_rank", "dropout", "seed"},
                              "model config");
    ModelConfig c;
    detail::ReadKey(j, "vocab_size", c.vocab_size);
    detail::ReadKey(j, "d_model", c.d_model);
    detail::ReadKey(j, "n_layers", c.n_layers);
    detail::ReadKey(j, "n_heads", c.n_heads);
    detail::ReadKey(j, "d_ff", c.d_ff);
    detail::ReadKey(j, "max_seq_len", c.max_seq_len);
    detail::ReadKey(j, "n_classes", c.n_classes);
    detail::ReadKey(j, "gumbel_temperature", c.gumbel_temperature);
    detail::ReadKey(j, "gumbel_hard", c.gumbel_hard);
    detail::ReadKey(j, "task_weight_alpha", c.task_weight_alpha);
    detail::ReadKey(j, "lora_rank", c.lora_rank);
    detail::ReadKey(j, "dropout", c.dropout);
    detail::ReadKey(j, "seed", c.seed);
    return c;
  }
};

template <typename S>
struct LayerWeights {
  Mat<S> ln1_gain, ln1_bias;
  Mat<S> wq, wk, wv, wo;
  Mat<S> ln2_gain, ln2_bias;
  Mat<S> w1, b1, w2, b2;
  // Low-rank adapters on the query and value projections; empty when absent.
  // Adapted projection: x * W + (x * A) * B.
  Mat<S> lora_q_a, lora_q_b, lora_v_a, lora_v_b;
};

template <typename S>
struct Weights {
  Mat<S> token_embedding;
  Mat<S> position_embedding;
  std::vector<LayerWeights<S>> layers;
  Mat<S> final_gain, final_bias;
  Mat<S> class_w, class_b;
  Mat<S> class_embedding;
  Mat<S> token_w, token_b;
};

// Calls f(name, tensor) for every parameter tensor in a fixed order.
// Adapter tensors are visited only when present.
template <typename W, typename F>
void VisitTensors(W& w, F&& f) {
  f(std::string("token_embedding"), w.token_embedding);
  f(std::string("position_embedding"), w.position_embedding);
  for (size_t l = 0; l < w.layers.size(); ++l) {
    auto& L = w.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    f(p + "ln1_gain", L.ln1_gain);
    f(p + "ln1_bias", L.ln1_bias);
    f(p + "wq", L.wq);
    f(p + "wk", L.wk);
    f(p + "wv", L.wv);
    f(p + "wo", L.wo);
    f(p + "ln2_gain", L.ln2_gain);
    f(p + "ln2_bias", L.ln2_bias);
    f(p + "w1", L.w1);
    f(p + "b1", L.b1);
    f(p + "w2", L.w2);
    f(p + "b2", L.b2);
    if (L.lora_q_a.size() > 0) {
      f(p + "lora_q_a", L.lora_q_a);
      f(p + "lora_q_b", L.lora_q_b);
      f(p + "lora_v_a", L.lora_v_a);
      f(p + "lora_v_b", L.lora_v_b);
    }
  }
  f(std::string("final_gain"), w.final_gain);
  f(std::string("final_bias"), w.final_bias);
  f(std::string("class_w"), w.class_w);
  f(std::string("class_b"), w.class_b);
  f(std::string("class_embedding"), w.class_embedding);
  f(std::string("token_w"), w.token_w);
  f(std::string("token_b"), w.token_b);
}

template <typename S>
Weights<S> ZerosLike(const Weights<S>& w) {
  Weights<S> z = w;
  VisitTensors(z, [](const std::string&, Mat<S>& t) { t.setZero(); });
  return z;
}

inline bool IsAdapterTensor(const std::string& name) {
  return name.find("lora_") != std::string::npos;
}

// With adapters attached, only the adapters train.
inline bool IsTrainableTensor(const std::string& name, bool has_adapters) {
  return !has_adapters || IsAdapterTensor(name);
}

enum class Injection { kArgmax, kGumbelSoft, kGumbelHard };

template <typename S>
struct ForwardOptions {
  bool retain_attention = false;
  Injection injection = Injection::kArgmax;
  // T x n_classes noise added before the Gumbel softmax. When null and a
  // Gumbel mode is requested, noise is drawn from rng.
  const Mat<S>* gumbel_noise = nullptr;
  Rng* rng = nullptr;
  // Enables dropout (needs rng).
  bool training = false;
};

template <typename S>
struct ForwardOutput {
  Mat<S> token_logits;     // T x V
  Mat<S> class_logits;     // T x n_classes
  Mat<S> backbone_hidden;  // T x d_model
  // [layer][head], each T x T; filled only with retain_attention.
  std::vector<std::vector<Mat<S>>> attention;
};

template <typename S>
struct LayerNormCache {
  Mat<S> xhat;
  ColVec<S> rstd;
};

template <typename S>
struct LayerCache {
  LayerNormCache<S> ln1, ln2;
  Mat<S> a, q, k, v, q_low, v_low;
  std::vector<Mat<S>> probs;
  Mat<S> context;
  Mat<S> attn_mask, ffn_mask;
  Mat<S> m, u, g;
};

template <typename S>
struct ForwardCache {
  TokenIds ids;
  std::vector<LayerCache<S>> layers;
  LayerNormCache<S> final_ln;
  Mat<S> hidden;
  Mat<S> injection;   // class weights added through the class-embedding table
  Mat<S> class_soft;  // soft Gumbel sample, empty for argmax injection
  Mat<S> fused;
  Injection mode = Injection::kArgmax;
  S temperature = S(1);
};

// ---------------------------------------------------------------------------
// Building blocks.

template <typename S>
RowVec<S> Softmax(const RowVec<S>& x) {
  RowVec<S> e = (x.array() - x.maxCoeff()).exp();
  return e / e.sum();
}

template <typename S>
int ArgmaxLowest(const RowVec<S>& x) {
  int best = 0;
  for (int i = 1; i < x.size(); ++i) {
    if (x[i] > x[best]) best = i;
  }
  return best;
}

// Gumbel softmax with caller-supplied noise. `soft` receives the relaxed
// sample; the return value is the one-hot of its argmax in hard mode.
template <typename S>
RowVec<S> GumbelSoftmaxWithNoise(const RowVec<S>& logits, const RowVec<S>& noise,
                                 double temperature, bool hard, RowVec<S>* soft = nullptr) {
  if (!(temperature > 0)) ThrowUsage("gumbel temperature must be positive");
  RowVec<S> y = Softmax<S>((logits + noise) / static_cast<S>(temperature));
  if (soft) *soft = y;
  if (!hard) return y;
  RowVec<S> one_hot = RowVec<S>::Zero(y.size());
  one_hot[ArgmaxLowest<S>(y)] = S(1);
  return one_hot;
}

template <typename S>
RowVec<S> SampleGumbelNoise(int n, Rng& rng) {
  RowVec<S> g(n);
  for (int i = 0; i < n; ++i) g[i] = static_cast<S>(rng.Gumbel());
  return g;
}

template <typename S>
RowVec<S> GumbelSoftmax(const RowVec<S>& logits, double temperature, bool hard, Rng& rng,
                        RowVec<S>* soft = nullptr) {
  if (!(temperature > 0)) ThrowUsage("gumbel temperature must be positive");
  return GumbelSoftmaxWithNoise<S>(logits, SampleGumbelNoise<S>(logits.size(), rng),
                                   temperature, hard, soft);
}

// Gradient w.r.t. logits of softmax((logits + noise) / temperature), given
// the sample and the upstream gradient. The straight-through estimator
// routes the hard sample's gradient through this.
template <typename S>
RowVec<S> GumbelSoftmaxBackward(const RowVec<S>& soft, const RowVec<S>& d_out,
                                double temperature) {
  S dot = (soft.array() * d_out.array()).sum();
  return (soft.array() * (d_out.array() - dot)).matrix() / static_cast<S>(temperature);
}

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;

template <typename S>
Mat<S> LayerNormForward(const Mat<S>& x, const Mat<S>& gain, const Mat<S>& bias,
                        LayerNormCache<S>* cache) {
  const Eigen::Index rows = x.rows(), cols = x.cols();
  Mat<S> xhat(rows, cols);
  ColVec<S> rstd(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    S mean = x.row(r).mean();
    auto centered = x.row(r).array() - mean;
    S var = centered.square().mean();
    rstd[r] = S(1) / std::sqrt(var + static_cast<S>(kLayerNormEps));
    xhat.row(r) = centered * rstd[r];
  }
  Mat<S> y = (xhat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

template <typename S>
Mat<S> LayerNormBackward(const Mat<S>& dy, const Mat<S>& gain, const LayerNormCache<S>& c,
                         Mat<S>& d_gain, Mat<S>& d_bias) {
  d_gain += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  d_bias += dy.colwise().sum();
  Mat<S> dxhat = dy.array().rowwise() * gain.row(0).array();
  Mat<S> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    S mean_d = dxhat.row(r).mean();
    S mean_dx = (dxhat.row(r).array() * c.xhat.row(r).array()).mean();
    dx.row(r) = c.rstd[r] * (dxhat.row(r).array() - mean_d - c.xhat.row(r).array() * mean_dx);
  }
  return dx;
}

template <typename S>
inline S GeluConst() {
  return static_cast<S>(0.7978845608028654);  // sqrt(2 / pi)
}

template <typename S>
Mat<S> Gelu(const Mat<S>& u) {
  const S c = GeluConst<S>();
  return u.unaryExpr([c](S x) {
    return S(0.5) * x * (S(1) + std::tanh(c * (x + S(0.044715) * x * x * x)));
  });
}

template <typename S>
Mat<S> GeluGrad(const Mat<S>& u) {
  const S c = GeluConst<S>();
  return u.unaryExpr([c](S x) {
    S th = std::tanh(c * (x + S(0.044715) * x * x * x));
    return S(0.5) * (S(1) + th) +
           S(0.5) * x * (S(1) - th * th) * c * (S(1) + S(3) * S(0.044715) * x * x);
  });
}

template <typename S>
Mat<S> DropoutMask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  Mat<S> mask(rows, cols);
  const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = rng.Uniform() < p ? S(0) : keep_scale;
  }
  return mask;
}

template <typename S>
void InitNormal(Mat<S>& m, Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  m.resize(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(rng.Normal(0, stddev));
}

}  // namespace detail

// ---------------------------------------------------------------------------

// Decoder-only transformer with a next-token head and a next-token entity
// class head. The class head reads the final backbone state; its (one-hot)
// choice selects a row of the class-embedding table, which is added to the
// backbone state before the token head.
template <typename S>
class MultiTaskLM {
 public:
  MultiTaskLM() = default;

  static MultiTaskLM Create(const ModelConfig& config) {
    config.Validate();
    MultiTaskLM m;
    m.config_ = config;
    Rng rng = Rng::Derive(config.seed, {0x11});
    const int d = config.d_model, V = config.vocab_size, F = config.d_ff;
    const int C = config.n_classes;
    const double std = 0.02;
    const double proj_std = 0.02 / std::sqrt(2.0 * config.n_layers);
    auto& w = m.weights_;
    detail::InitNormal(w.token_embedding, V, d, std, rng);
    detail::InitNormal(w.position_embedding, config.max_seq_len, d, std, rng);
    w.layers.resize(config.n_layers);
    for (auto& L : w.layers) {
      L.ln1_gain = Mat<S>::Ones(1, d);
      L.ln1_bias = Mat<S>::Zero(1, d);
      detail::InitNormal(L.wq, d, d, std, rng);
      detail::InitNormal(L.wk, d, d, std, rng);
      detail::InitNormal(L.wv, d, d, std, rng);
      detail::InitNormal(L.wo, d, d, proj_std, rng);
      L.ln2_gain = Mat<S>::Ones(1, d);
      L.ln2_bias = Mat<S>::Zero(1, d);
      detail::InitNormal(L.w1, d, F, std, rng);
      L.b1 = Mat<S>::Zero(1, F);
      detail::InitNormal(L.w2, F, d, proj_std, rng);
      L.b2 = Mat<S>::Zero(1, d);
    }
    w.final_gain = Mat<S>::Ones(1, d);
    w.final_bias = Mat<S>::Zero(1, d);
    detail::InitNormal(w.class_w, d, C, std, rng);
    w.class_b = Mat<S>::Zero(1, C);
    detail::InitNormal(w.class_embedding, C, d, std, rng);
    detail::InitNormal(w.token_w, d, V, std, rng);
    w.token_b = Mat<S>::Zero(1, V);
    if (config.lora_rank > 0) {
      m.config_.lora_rank = 0;
      m.ApplyLora(config.lora_rank);
    }
    return m;
  }

  const ModelConfig& config() const { return config_; }
  ModelConfig& mutable_config() { return config_; }
  const Weights<S>& weights() const { return weights_; }
  Weights<S>& mutable_weights() { return weights_; }

  bool HasAdapters() const {
    return !weights_.layers.empty() && weights_.layers[0].lora_q_a.size() > 0;
  }

  // Attaches rank-r adapters to every query and value projection. A starts
  // small-random and B at zero, so outputs are unchanged until training.
  void ApplyLora(int rank) {
    if (rank < 1) ThrowUsage("lora rank must be >= 1");
    if (HasAdapters()) ThrowUsage("low-rank adapters are already attached");
    Rng rng = Rng::Derive(config_.seed, {0x10a, static_cast<uint64_t>(rank)});
    const int d = config_.d_model;
    for (auto& L : weights_.layers) {
      detail::InitNormal(L.lora_q_a, d, rank, 0.02, rng);
      L.lora_q_b = Mat<S>::Zero(rank, d);
      detail::InitNormal(L.lora_v_a, d, rank, 0.02, rng);
      L.lora_v_b = Mat<S>::Zero(rank, d);
    }
    config_.lora_rank = rank;
  }

  size_t ParameterCount() const {
    size_t n = 0;
    VisitTensors(weights_, [&](const std::string&, const Mat<S>& t) { n += t.size(); });
    return n;
  }

  size_t TrainableParameterCount() const {
    size_t n = 0;
    const bool adapters = HasAdapters();
    VisitTensors(weights_, [&](const std::string& name, const Mat<S>& t) {
      if (IsTrainableTensor(name, adapters)) n += t.size();
    });
    return n;
  }

  size_t AdapterParameterCount() const {
    size_t n = 0;
    VisitTensors(weights_, [&](const std::string& name, const Mat<S>& t) {
      if (IsAdapterTensor(name)) n += t.size();
    });
    return n;
  }

  // Closed form of ParameterCount() for a config.
  static size_t ExpectedParameterCount(const ModelConfig& c) {
    const size_t d = c.d_model, V = c.vocab_size, F = c.d_ff, C = c.n_classes;
    size_t per_layer = 4 * d + 4 * d * d + d * F + F + F * d + d;
    if (c.lora_rank > 0) per_layer += 2 * c.lora_rank * (d + d);
    return V * d + c.max_seq_len * d + c.n_layers * per_layer + 2 * d + d * C + C + C * d +
           d * V + V;
  }

  ForwardOutput<S> Forward(const TokenIds& ids, const ForwardOptions<S>& opt = {},
                           ForwardCache<S>* cache = nullptr) const {
    const int T = static_cast<int>(ids.size());
    if (T == 0) ThrowData("forward: empty token sequence");
    if (T > config_.max_seq_len) {
      ThrowData("sequence length " + std::to_string(T) + " exceeds max_seq_len " +
                std::to_string(config_.max_seq_len));
    }
    const int d = config_.d_model, H = config_.n_heads, dh = d / H;
    const int C = config_.n_classes;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));
    const bool dropout = opt.training && config_.dropout > 0;
    if ((dropout || (opt.injection != Injection::kArgmax && !opt.gumbel_noise)) && !opt.rng) {
      ThrowUsage("forward: stochastic options need an rng");
    }
    const auto& w = weights_;
    ForwardOutput<S> out;
    if (cache) {
      cache->ids = ids;
      cache->layers.assign(w.layers.size(), LayerCache<S>{});
    }
    if (opt.retain_attention) out.attention.resize(w.layers.size());

    Mat<S> h(T, d);
    for (int t = 0; t < T; ++t) {
      if (ids[t] < 0 || ids[t] >= config_.vocab_size) {
        ThrowData("token id " + std::to_string(ids[t]) + " out of range");
      }
      h.row(t) = w.token_embedding.row(ids[t]) + w.position_embedding.row(t);
    }

    for (size_t l = 0; l < w.layers.size(); ++l) {
      const auto& L = w.layers[l];
      LayerCache<S>* lc = cache ? &cache->layers[l] : nullptr;
      Mat<S> a = detail::LayerNormForward(h, L.ln1_gain, L.ln1_bias, lc ? &lc->ln1 : nullptr);
      Mat<S> q = a * L.wq;
      Mat<S> k = a * L.wk;
      Mat<S> v = a * L.wv;
      Mat<S> q_low, v_low;
      if (L.lora_q_a.size() > 0) {
        q_low = a * L.lora_q_a;
        v_low = a * L.lora_v_a;
        q.noalias() += q_low * L.lora_q_b;
        v.noalias() += v_low * L.lora_v_b;
      }
      Mat<S> context(T, d);
      std::vector<Mat<S>> probs;
      for (int hd = 0; hd < H; ++hd) {
        Mat<S> p = q.middleCols(hd * dh, dh) * k.middleCols(hd * dh, dh).transpose() * scale;
        for (int i = 0; i < T; ++i) {
          S mx = p.row(i).head(i + 1).maxCoeff();
          S sum = 0;
          for (int j = 0; j <= i; ++j) {
            p(i, j) = std::exp(p(i, j) - mx);
            sum += p(i, j);
          }
          for (int j = 0; j <= i; ++j) p(i, j) /= sum;
          for (int j = i + 1; j < T; ++j) p(i, j) = S(0);
        }
        context.middleCols(hd * dh, dh).noalias() = p * v.middleCols(hd * dh, dh);
        if (lc || opt.retain_attention) probs.push_back(std::move(p));
      }
      Mat<S> attn = context * L.wo;
      Mat<S> attn_mask;
      if (dropout) {
        attn_mask = detail::DropoutMask<S>(T, d, config_.dropout, *opt.rng);
        attn.array() *= attn_mask.array();
      }
      h += attn;
      Mat<S> m = detail::LayerNormForward(h, L.ln2_gain, L.ln2_bias, lc ? &lc->ln2 : nullptr);
      Mat<S> u = (m * L.w1).rowwise() + L.b1.row(0);
      Mat<S> g = detail::Gelu(u);
      Mat<S> f = (g * L.w2).rowwise() + L.b2.row(0);
      Mat<S> ffn_mask;
      if (dropout) {
        ffn_mask = detail::DropoutMask<S>(T, d, config_.dropout, *opt.rng);
        f.array() *= ffn_mask.array();
      }
      h += f;
      if (opt.retain_attention) out.attention[l] = probs;
      if (lc) {
        lc->a = std::move(a);
        lc->q = std::move(q);
        lc->k = std::move(k);
        lc->v = std::move(v);
        lc->q_low = std::move(q_low);
        lc->v_low = std::move(v_low);
        lc->probs = std::move(probs);
        lc->context = std::move(context);
        lc->attn_mask = std::move(attn_mask);
        lc->ffn_mask = std::move(ffn_mask);
        lc->m = std::move(m);
        lc->u = std::move(u);
        lc->g = std::move(g);
      }
    }

    Mat<S> hidden = detail::LayerNormForward(h, w.final_gain, w.final_bias,
                                             cache ? &cache->final_ln : nullptr);
    out.class_logits = (hidden * w.class_w).rowwise() + w.class_b.row(0);

    Mat<S> injection = Mat<S>::Zero(T, C);
    Mat<S> class_soft;
    if (opt.injection == Injection::kArgmax) {
      for (int t = 0; t < T; ++t) {
        injection(t, ArgmaxLowest<S>(out.class_logits.row(t))) = S(1);
      }
    } else {
      class_soft.resize(T, C);
      const bool hard = opt.injection == Injection::kGumbelHard;
      for (int t = 0; t < T; ++t) {
        RowVec<S> noise = opt.gumbel_noise ? RowVec<S>(opt.gumbel_noise->row(t))
                                           : SampleGumbelNoise<S>(C, *opt.rng);
        RowVec<S> soft;
        injection.row(t) = GumbelSoftmaxWithNoise<S>(out.class_logits.row(t), noise,
                                                     config_.gumbel_temperature, hard, &soft);
        class_soft.row(t) = soft;
      }
    }
    Mat<S> fused = hidden + injection * w.class_embedding;
    out.token_logits = (fused * w.token_w).rowwise() + w.token_b.row(0);
    out.backbone_hidden = hidden;
    if (cache) {
      cache->hidden = std::move(hidden);
      cache->injection = std::move(injection);
      cache->class_soft = std::move(class_soft);
      cache->fused = std::move(fused);
      cache->mode = opt.injection;
      cache->temperature = static_cast<S>(config_.gumbel_temperature);
    }
    return out;
  }

  // Accumulates parameter gradients into `grads` given loss gradients with
  // respect to both logit matrices.
  void Backward(const ForwardCache<S>& cache, const Mat<S>& d_token_logits,
                const Mat<S>& d_class_logits, Weights<S>& grads) const {
    const auto& w = weights_;
    const int T = static_cast<int>(cache.ids.size());
    const int d = config_.d_model, H = config_.n_heads, dh = d / H;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));

    grads.token_w.noalias() += cache.fused.transpose() * d_token_logits;
    grads.token_b += d_token_logits.colwise().sum();
    Mat<S> d_fused = d_token_logits * w.token_w.transpose();
    grads.class_embedding.noalias() += cache.injection.transpose() * d_fused;

    Mat<S> d_class = d_class_logits;
    if (cache.mode != Injection::kArgmax) {
      Mat<S> d_injection = d_fused * w.class_embedding.transpose();
      for (int t = 0; t < T; ++t) {
        d_class.row(t) += GumbelSoftmaxBackward<S>(cache.class_soft.row(t), d_injection.row(t),
                                                   cache.temperature);
      }
    }
    grads.class_w.noalias() += cache.hidden.transpose() * d_class;
    grads.class_b += d_class.colwise().sum();
    Mat<S> d_hidden = d_fused + d_class * w.class_w.transpose();

    Mat<S> dh_res = detail::LayerNormBackward(d_hidden, w.final_gain, cache.final_ln,
                                              grads.final_gain, grads.final_bias);

    for (int l = static_cast<int>(w.layers.size()) - 1; l >= 0; --l) {
      const auto& L = w.layers[l];
      auto& G = grads.layers[l];
      const auto& c = cache.layers[l];

      // Feed-forward sublayer.
      Mat<S> df = dh_res;
      if (c.ffn_mask.size() > 0) df.array() *= c.ffn_mask.array();
      G.w2.noalias() += c.g.transpose() * df;
      G.b2 += df.colwise().sum();
      Mat<S> du = (df * L.w2.transpose()).array() * detail::GeluGrad(c.u).array();
      G.w1.noalias() += c.m.transpose() * du;
      G.b1 += du.colwise().sum();
      Mat<S> dm = du * L.w1.transpose();
      dh_res += detail::LayerNormBackward(dm, L.ln2_gain, c.ln2, G.ln2_gain, G.ln2_bias);

      // Attention sublayer.
      Mat<S> dattn = dh_res;
      if (c.attn_mask.size() > 0) dattn.array() *= c.attn_mask.array();
      G.wo.noalias() += c.context.transpose() * dattn;
      Mat<S> dcontext = dattn * L.wo.transpose();
      Mat<S> dq(T, d), dk(T, d), dv(T, d);
      for (int hd = 0; hd < H; ++hd) {
        const Mat<S>& p = c.probs[hd];
        Mat<S> dctx = dcontext.middleCols(hd * dh, dh);
        dv.middleCols(hd * dh, dh).noalias() = p.transpose() * dctx;
        Mat<S> dp = dctx * c.v.middleCols(hd * dh, dh).transpose();
        ColVec<S> row_dot = (dp.array() * p.array()).rowwise().sum();
        Mat<S> ds = (p.array() * (dp.colwise() - row_dot).array()) * scale;
        dq.middleCols(hd * dh, dh).noalias() = ds * c.k.middleCols(hd * dh, dh);
        dk.middleCols(hd * dh, dh).noalias() = ds.transpose() * c.q.middleCols(hd * dh, dh);
      }
      G.wq.noalias() += c.a.transpose() * dq;
      G.wk.noalias() += c.a.transpose() * dk;
      G.wv.noalias() += c.a.transpose() * dv;
      Mat<S> da = dq * L.wq.transpose() + dk * L.wk.transpose() + dv * L.wv.transpose();
      if (L.lora_q_a.size() > 0) {
        G.lora_q_b.noalias() += c.q_low.transpose() * dq;
        Mat<S> dq_low = dq * L.lora_q_b.transpose();
        G.lora_q_a.noalias() += c.a.transpose() * dq_low;
        da.noalias() += dq_low * L.lora_q_a.transpose();
        G.lora_v_b.noalias() += c.v_low.transpose() * dv;
        Mat<S> dv_low = dv * L.lora_v_b.transpose();
        G.lora_v_a.noalias() += c.a.transpose() * dv_low;
        da.noalias() += dv_low * L.lora_v_a.transpose();
      }
      dh_res += detail::LayerNormBackward(da, L.ln1_gain, c.ln1, G.ln1_gain, G.ln1_bias);
    }

    for (int t = 0; t < T; ++t) {
      grads.token_embedding.row(cache.ids[t]) += dh_res.row(t);
      grads.position_embedding.row(t) += dh_res.row(t);
    }
  }

  template <typename T>
  MultiTaskLM<T> Cast() const {
    MultiTaskLM<T> out;
    out.mutable_config() = config_;
    Weights<T>& ow = out.mutable_weights();
    ow.layers.resize(weights_.layers.size());
    std::vector<Mat<T>*> targets;
    VisitTensors(ow, [&](const std::string&, Mat<T>& t) { targets.push_back(&t); });
    // Adapter slots are only visited when non-empty, so size them first.
    if (HasAdapters()) {
      for (auto& L : ow.layers) L.lora_q_a.resize(1, 1);
      targets.clear();
      VisitTensors(ow, [&](const std::string&, Mat<T>& t) { targets.push_back(&t); });
    }
    size_t i = 0;
    VisitTensors(weights_, [&](const std::string&, const Mat<S>& t) {
      *targets[i++] = t.template cast<T>();
    });
    return out;
  }

 private:
  ModelConfig config_;
  Weights<S> weights_;
};

// Row-wise log-softmax evaluated in double.
template <typename S>
double LogSoftmaxAt(const Mat<S>& logits, Eigen::Index row, Eigen::Index col) {
  const auto r = logits.row(row).template cast<double>();
  double mx = r.maxCoeff();
  double lse = mx + std::log((r.array() - mx).exp().sum());
  return r[col] - lse;
}

}  // namespace ctxbias
