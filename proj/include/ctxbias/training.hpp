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
#include <array>
#include <cmath>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "ctxbias/checkpoint.hpp"
#include "ctxbias/corpus.hpp"
#include "ctxbias/loss.hpp"
#include "ctxbias/metrics.hpp"
#include "ctxbias/model.hpp"
#include "ctxbias/optimizer.hpp"
#include "ctxbias/prompting.hpp"
#include "ctxbias/rescoring.hpp"

namespace ctxbias {

// ---------------------------------------------------------------------------
// Class targets.

// Parses inline annotations such as "go to [paris:LOC] with [bob:PER]".
inline AnnotatedUtterance ParseBracketAnnotation(const std::string& annotated) {
  AnnotatedUtterance u;
  auto cps = utf8::Decode(annotated);
  std::u32string text;
  size_t i = 0;
  while (i < cps.size()) {
    if (cps[i] != U'[') {
      text.push_back(cps[i++]);
      continue;
    }
    size_t close = cps.find(U']', i);
    size_t colon = cps.rfind(U':', close);
    if (close == std::u32string::npos || colon == std::u32string::npos || colon < i) {
      ThrowData("malformed annotation at position " + std::to_string(i));
    }
    std::u32string entity = cps.substr(i + 1, colon - i - 1);
    std::string label = utf8::Encode(cps.substr(colon + 1, close - colon - 1));
    size_t start = text.size();
    text += entity;
    u.spans.push_back({start, text.size(), ParseClassName(label)});
    i = close + 1;
  }
  u.text = utf8::Encode(text);
  ValidateSpans(u.spans, text.size());
  return u;
}

// Next-token class per character: target[t] is the class of character
// t + 1; the final position targets the end of sentence, i.e. NONE.
inline std::vector<EntityClass> DeriveClassTargets(const std::string& text,
                                                   const std::vector<EntitySpan>& spans) {
  auto classes = CharClasses(text, spans);
  std::vector<EntityClass> targets(classes.size(), EntityClass::kNone);
  for (size_t t = 0; t + 1 < classes.size(); ++t) targets[t] = classes[t + 1];
  return targets;
}

inline std::vector<EntityClass> DeriveClassTargets(const std::string& annotated) {
  AnnotatedUtterance u = ParseBracketAnnotation(annotated);
  return DeriveClassTargets(u.text, u.spans);
}

// Gold class for each scored term: one per input character plus NONE for
// the end-of-sentence term when it is scored.
inline std::vector<EntityClass> GoldTermClasses(const AnnotatedUtterance& u, bool with_eos) {
  auto classes = CharClasses(u.text, u.spans);
  if (with_eos) classes.push_back(EntityClass::kNone);
  return classes;
}

// ---------------------------------------------------------------------------

struct TrainExample {
  Prompt prompt;
  // token_targets[t] is the token at t + 1 (EOS after the last token).
  std::vector<int> token_targets;
  std::vector<int> class_targets;
  // 1 on positions whose next token lies in the input region (or is EOS).
  std::vector<uint8_t> loss_mask;

  std::vector<int> MaskedTokenTargets() const { return Masked(token_targets); }
  std::vector<int> MaskedClassTargets() const { return Masked(class_targets); }

 private:
  std::vector<int> Masked(const std::vector<int>& v) const {
    std::vector<int> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = loss_mask[i] ? v[i] : kIgnoreTarget;
    return out;
  }
};

inline TrainExample MakeTrainExample(const Vocab& vocab, const std::vector<FewShotExample>& shots,
                                     const BiasingList& list, const std::string& text,
                                     const std::vector<EntitySpan>& spans) {
  TrainExample ex;
  ex.prompt = BuildPrompt(vocab, shots, list, text);
  const auto char_classes = CharClasses(text, spans);
  const size_t T = ex.prompt.size();
  if (char_classes.size() != ex.prompt.input.size()) {
    ThrowData("input region does not align with characters of '" + text + "'");
  }
  ex.token_targets.resize(T);
  ex.class_targets.assign(T, ClassIndex(EntityClass::kNone));
  ex.loss_mask.assign(T, 0);
  for (size_t t = 0; t < T; ++t) {
    ex.token_targets[t] = t + 1 < T ? ex.prompt.ids[t + 1] : Id(SpecialToken::kEos);
    size_t next = t + 1;
    if (next >= ex.prompt.input.begin && next < ex.prompt.input.end) {
      ex.class_targets[t] = ClassIndex(char_classes[next - ex.prompt.input.begin]);
    }
    if (t + 1 >= ex.prompt.input.begin) ex.loss_mask[t] = 1;
  }
  return ex;
}

struct TrainConfig {
  int epochs = 60;
  int batch_size = 16;
  double learning_rate = 2e-3;
  // "constant" or "linear" (warmup, then linear decay to zero).
  std::string lr_schedule = "linear";
  int warmup_steps = 100;
  double grad_clip_norm = 1.0;
  double weight_decay = 0.01;
  ClassWeights class_weights = kDefaultClassWeights;
  double alpha = 0.7;
  bool biasing_in_training = true;
  int few_shot_k = 1;
  // Share of examples that get few_shot_k examples prepended.
  double few_shot_prob = 0.3;
  // Context shown per example per epoch: the full list, only the list of
  // one class present in the utterance, or nothing.
  double full_context_prob = 0.6;
  double class_context_prob = 0.35;
  // Lists holding none of the spoken entities.
  double distractor_list_prob = 0.25;
  // Per-class list sizes drawn from this range when a list is resampled.
  std::array<int, 2> list_size_range = {1, 10};
  double resample_list_prob = 0.0;
  double holdout_fraction = 0.05;
  uint64_t seed = 1234;

  void Validate() const {
    auto fail = [](const std::string& m) { ThrowUsage("invalid train config: " + m); };
    if (epochs < 0 || batch_size < 1) fail("epochs >= 0 and batch_size >= 1 required");
    if (!(learning_rate > 0)) fail("learning_rate must be positive");
    if (lr_schedule != "constant" && lr_schedule != "linear") {
      fail("lr_schedule must be 'constant' or 'linear'");
    }
    for (double w : class_weights) {
      if (w < 0) fail("class_weights must be non-negative");
    }
    if (alpha < 0 || alpha > 1) fail("alpha must be in [0,1]");
    if (few_shot_k < 0) fail("few_shot_k must be >= 0");
    for (double p : {few_shot_prob, full_context_prob, class_context_prob, distractor_list_prob,
                     resample_list_prob}) {
      if (p < 0 || p > 1) fail("probabilities must be in [0,1]");
    }
    if (full_context_prob + class_context_prob > 1 + 1e-12) fail("context probabilities exceed 1");
    if (list_size_range[0] < 1 || list_size_range[1] < list_size_range[0]) {
      fail("list_size_range must be 1 <= lo <= hi");
    }
    if (holdout_fraction < 0 || holdout_fraction >= 1) fail("holdout_fraction must be in [0,1)");
  }

  nlohmann::ordered_json ToJson() const {
    return {{"epochs", epochs},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"lr_schedule", lr_schedule},
            {"warmup_steps", warmup_steps},
            {"grad_clip_norm", grad_clip_norm},
            {"weight_decay", weight_decay},
            {"class_weights", class_weights},
            {"alpha", alpha},
            {"biasing_in_training", biasing_in_training},
            {"few_shot_k", few_shot_k},
            {"few_shot_prob", few_shot_prob},
            {"full_context_prob", full_context_prob},
            {"class_context_prob", class_context_prob},
            {"list_size_range", list_size_range},
            {"distractor_list_prob", distractor_list_prob},
            {"resample_list_prob", resample_list_prob},
            {"holdout_fraction", holdout_fraction},
            {"seed", seed}};
  }

  static TrainConfig FromJson(const nlohmann::json& j) {
    detail::RejectUnknownKeys(
        j,
        {"epochs", "batch_size", "learning_rate", "lr_schedule", "warmup_steps",
         "grad_clip_norm", "weight_decay", "class_weights", "alpha", "biasing_in_training",
         "few_shot_k", "few_shot_prob", "full_context_prob", "class_context_prob",
         "list_size_range", "distractor_list_prob", "resample_list_prob", "holdout_fraction", "seed"},
        "train config");
    TrainConfig c;
    detail::ReadKey(j, "epochs", c.epochs);
    detail::ReadKey(j, "batch_size", c.batch_size);
    detail::ReadKey(j, "learning_rate", c.learning_rate);
    detail::ReadKey(j, "lr_schedule", c.lr_schedule);
    detail::ReadKey(j, "warmup_steps", c.warmup_steps);
    detail::ReadKey(j, "grad_clip_norm", c.grad_clip_norm);
    detail::ReadKey(j, "weight_decay", c.weight_decay);
    detail::ReadKey(j, "class_weights", c.class_weights);
    detail::ReadKey(j, "alpha", c.alpha);
    detail::ReadKey(j, "biasing_in_training", c.biasing_in_training);
    detail::ReadKey(j, "few_shot_k", c.few_shot_k);
    detail::ReadKey(j, "few_shot_prob", c.few_shot_prob);
    detail::ReadKey(j, "full_context_prob", c.full_context_prob);
    detail::ReadKey(j, "class_context_prob", c.class_context_prob);
    detail::ReadKey(j, "list_size_range", c.list_size_range);
    detail::ReadKey(j, "distractor_list_prob", c.distractor_list_prob);
    detail::ReadKey(j, "resample_list_prob", c.resample_list_prob);
    detail::ReadKey(j, "holdout_fraction", c.holdout_fraction);
    detail::ReadKey(j, "seed", c.seed);
    return c;
  }
};

struct EpochLog {
  int epoch = 0;
  long step = 0;
  double l_token = 0;
  double l_class = 0;
  double total = 0;
  double class_f1 = 0;
  size_t skipped_overlong = 0;

  nlohmann::ordered_json ToJson() const {
    return {{"epoch", epoch}, {"step", step},   {"l_token", l_token},
            {"l_class", l_class}, {"total", total}, {"class_f1", class_f1}};
  }
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochLog> log;
  size_t skipped_overlong = 0;
};

// Characters the synthetic generator can emit; seeds the vocabulary so
// noisy hypotheses never hit unknown characters.
inline const std::string kGeneratorAlphabet = " abcdefghijklmnopqrstuvwxyz";

inline Vocab BuildCorpusVocab(const std::vector<AnnotatedUtterance>& corpus,
                              const std::string& extra = kGeneratorAlphabet) {
  std::vector<std::string> texts{extra};
  for (const auto& u : corpus) {
    texts.push_back(u.text);
    texts.push_back(BuildBiasingSegment(u.biasing_list));
    for (const auto& h : u.nbest.hypotheses) texts.push_back(h.text);
  }
  return BuildVocab(texts);
}

inline double ScheduledLearningRate(const TrainConfig& cfg, long step, long total_steps) {
  if (cfg.lr_schedule == "constant") return cfg.learning_rate;
  double warm = cfg.warmup_steps > 0
                    ? std::min(1.0, static_cast<double>(step + 1) / cfg.warmup_steps)
                    : 1.0;
  double decay = 1.0;
  if (total_steps > cfg.warmup_steps && step >= cfg.warmup_steps) {
    decay = std::max(0.0, static_cast<double>(total_steps - step) /
                              static_cast<double>(total_steps - cfg.warmup_steps));
  }
  return cfg.learning_rate * warm * decay;
}

// Held-out macro F1 of the class head on input-only prompts.
template <typename S>
double HeldOutClassF1(const MultiTaskLM<S>& model, const Vocab& vocab,
                      const std::vector<const AnnotatedUtterance*>& held_out) {
  if (held_out.empty()) return 0.0;
  Rescorer<S> rescorer(model, vocab);
  ClassF1Accumulator acc;
  for (const auto* u : held_out) {
    acc.Add(rescorer.PredictClasses(u->text), GoldTermClasses(*u, rescorer.options().score_eos));
  }
  return acc.Result().macro;
}

namespace detail {

// Per-class pools of every entity seen in the training lists.
inline std::array<std::vector<std::string>, 3> EntityPools(
    const std::vector<const AnnotatedUtterance*>& corpus) {
  std::array<std::set<std::string>, 3> sets;
  for (const auto* u : corpus) {
    for (EntityClass c : kEntityClasses) {
      for (const auto& e : u->biasing_list.Entities(c)) sets[ClassIndex(c)].insert(e);
    }
    for (const auto& s : u->spans) sets[ClassIndex(s.cls)].insert(u->EntityText(s));
  }
  std::array<std::vector<std::string>, 3> out;
  for (int c = 0; c < 3; ++c) out[c].assign(sets[c].begin(), sets[c].end());
  return out;
}

inline BiasingList ResampleList(const AnnotatedUtterance& u,
                                const std::array<std::vector<std::string>, 3>& pools,
                                const std::array<int, 2>& range, Rng& rng) {
  BiasingList list;
  for (EntityClass c : kEntityClasses) {
    std::vector<std::string> chosen;
    std::set<std::string> used;
    for (const auto& s : u.spans) {
      if (s.cls != c) continue;
      std::string e = u.EntityText(s);
      if (used.insert(e).second) chosen.push_back(e);
    }
    const auto& pool = pools[ClassIndex(c)];
    size_t target = static_cast<size_t>(range[0] + rng.Index(range[1] - range[0] + 1));
    target = std::min(std::max(target, chosen.size()), pool.size());
    while (chosen.size() < target) {
      const std::string& e = rng.Pick(pool);
      if (used.insert(e).second) chosen.push_back(e);
    }
    rng.Shuffle(chosen);
    for (const auto& e : chosen) list.Add(c, e);
  }
  return list;
}

// Same per-class sizes as the utterance list, but none of the spoken entities.
inline BiasingList DistractorList(const AnnotatedUtterance& u,
                                  const std::array<std::vector<std::string>, 3>& pools, Rng& rng) {
  std::set<std::string> spoken;
  for (const auto& s : u.spans) spoken.insert(u.EntityText(s));
  BiasingList list;
  for (EntityClass c : kEntityClasses) {
    const auto& pool = pools[ClassIndex(c)];
    size_t target = u.biasing_list.Entities(c).size();
    std::set<std::string> used = spoken;
    std::vector<std::string> chosen;
    for (size_t tries = 0; chosen.size() < target && tries < 64 * (target + 1); ++tries) {
      const std::string& e = rng.Pick(pool);
      if (used.insert(e).second) chosen.push_back(e);
    }
    for (const auto& e : chosen) list.Add(c, e);
  }
  return list;
}

}  // namespace detail

using EpochCallback = std::function<void(const EpochLog&)>;

// Multi-task training on reference transcripts. The tail holdout_fraction of
// the corpus is held out for class-head F1. Deterministic given the seed.
inline TrainResult Train(const std::vector<AnnotatedUtterance>& corpus, const Vocab& vocab,
                         ModelConfig mcfg, const TrainConfig& tcfg,
                         std::optional<Checkpoint> resume = std::nullopt,
                         const EpochCallback& on_epoch = nullptr) {
  tcfg.Validate();
  if (corpus.empty()) ThrowData("training corpus is empty");

  TrainResult result;
  Checkpoint& ckpt = result.checkpoint;
  if (resume) {
    ckpt = std::move(*resume);
    if (!(ckpt.vocab == vocab)) ThrowData("resume checkpoint vocabulary differs from corpus");
    // Fine-tuning flow: adapters requested on a checkpoint that has none.
    if (mcfg.lora_rank > 0 && !ckpt.model.HasAdapters()) ckpt.model.ApplyLora(mcfg.lora_rank);
  } else {
    mcfg.vocab_size = vocab.size();
    mcfg.task_weight_alpha = tcfg.alpha;
    ckpt.model = MultiTaskLM<float>::Create(mcfg);
    ckpt.vocab = vocab;
  }
  auto& model = ckpt.model;
  const ModelConfig& config = model.config();
  const bool adapters = model.HasAdapters();

  size_t n_hold = static_cast<size_t>(std::floor(tcfg.holdout_fraction * corpus.size()));
  if (n_hold >= corpus.size()) n_hold = 0;
  std::vector<const AnnotatedUtterance*> train_set, held_out;
  for (size_t i = 0; i < corpus.size(); ++i) {
    (i < corpus.size() - n_hold ? train_set : held_out).push_back(&corpus[i]);
  }
  const auto pools = detail::EntityPools(train_set);

  const long steps_per_epoch =
      (static_cast<long>(train_set.size()) + tcfg.batch_size - 1) / tcfg.batch_size;
  const long start_step = ckpt.state.step;
  const long total_steps = start_step + steps_per_epoch * tcfg.epochs;
  AdamW<float> optimizer(model.weights(), {0.9, 0.98, 1e-8, tcfg.weight_decay});
  Rng rng = Rng::Derive(tcfg.seed, {0x7a1, static_cast<uint64_t>(start_step)});
  const Injection injection = config.gumbel_hard ? Injection::kGumbelHard : Injection::kGumbelSoft;

  auto build_example = [&](const AnnotatedUtterance& u) {
    BiasingList list;
    std::vector<FewShotExample> shots;
    if (tcfg.biasing_in_training) {
      double r = rng.Uniform();
      BiasingList full = u.biasing_list;
      if (rng.Bernoulli(tcfg.distractor_list_prob)) {
        full = detail::DistractorList(u, pools, rng);
      } else if (rng.Bernoulli(tcfg.resample_list_prob)) {
        full = detail::ResampleList(u, pools, tcfg.list_size_range, rng);
      }
      if (r < tcfg.full_context_prob) {
        list = full;
      } else if (r < tcfg.full_context_prob + tcfg.class_context_prob && !u.spans.empty()) {
        list = SelectClassContext(full, rng.Pick(u.spans).cls);
      }
      if (tcfg.few_shot_k > 0 && rng.Bernoulli(tcfg.few_shot_prob) && train_set.size() > 1) {
        for (int k = 0; k < tcfg.few_shot_k; ++k) {
          const AnnotatedUtterance* other;
          do {
            other = rng.Pick(train_set);
          } while (other == &u);
          shots.push_back({other->biasing_list, other->text});
        }
      }
    }
    return MakeTrainExample(vocab, shots, list, u.text, u.spans);
  };

  Weights<float> grads = ZerosLike(model.weights());
  long step = start_step;
  bool any_fit = false;
  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    std::vector<size_t> order(train_set.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.Shuffle(order);
    EpochLog log;
    log.epoch = ckpt.state.epoch + 1;
    long batches = 0;
    for (size_t b = 0; b < order.size(); b += tcfg.batch_size) {
      std::vector<TrainExample> batch;
      for (size_t i = b; i < std::min(order.size(), b + tcfg.batch_size); ++i) {
        TrainExample ex = build_example(*train_set[order[i]]);
        if (static_cast<int>(ex.prompt.size()) > config.max_seq_len) {
          ++log.skipped_overlong;
          continue;
        }
        batch.push_back(std::move(ex));
      }
      if (batch.empty()) continue;
      any_fit = true;
      LossNormalizer norm;
      for (const auto& ex : batch) {
        norm.Add(ex.MaskedTokenTargets(), ex.MaskedClassTargets(), tcfg.class_weights);
      }
      VisitTensors(grads, [](const std::string&, Mat<float>& g) { g.setZero(); });
      LossBreakdown batch_loss;
      for (const auto& ex : batch) {
        ForwardOptions<float> opt;
        opt.injection = injection;
        opt.rng = &rng;
        opt.training = true;
        ForwardCache<float> cache;
        auto out = model.Forward(ex.prompt.ids, opt, &cache);
        Mat<float> d_tok, d_cls;
        auto part = AccumulateMultitaskLoss(out, ex.MaskedTokenTargets(), ex.MaskedClassTargets(),
                                            tcfg.alpha, tcfg.class_weights, norm, &d_tok, &d_cls);
        batch_loss.token += part.token;
        batch_loss.cls += part.cls;
        batch_loss.total += part.total;
        model.Backward(cache, d_tok, d_cls, grads);
      }
      ClipGradNorm(grads, tcfg.grad_clip_norm, adapters);
      optimizer.Step(model.mutable_weights(), grads,
                     ScheduledLearningRate(tcfg, step, total_steps), adapters);
      ++step;
      ++batches;
      log.l_token += batch_loss.token;
      log.l_class += batch_loss.cls;
      log.total += batch_loss.total;
    }
    if (batches > 0) {
      log.l_token /= batches;
      log.l_class /= batches;
      log.total /= batches;
    }
    log.step = step;
    log.class_f1 = HeldOutClassF1(model, vocab, held_out);
    ckpt.state.step = step;
    ckpt.state.epoch = log.epoch;
    result.skipped_overlong += log.skipped_overlong;
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  if (tcfg.epochs > 0 && !any_fit) ThrowData("every training example exceeds max_seq_len");
  return result;
}

}  // namespace ctxbias
