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
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ctxbias/corpus.hpp"
#include "ctxbias/model.hpp"
#include "ctxbias/prompting.hpp"
#include "ctxbias/tokenizer.hpp"

namespace ctxbias {

enum class RescoreMode { kPlain, kStatic, kFewShot, kDynamic };

inline std::string ModeName(RescoreMode m) {
  switch (m) {
    case RescoreMode::kPlain: return "plain";
    case RescoreMode::kStatic: return "static";
    case RescoreMode::kFewShot: return "few_shot";
    case RescoreMode::kDynamic: return "dynamic";
  }
  return "plain";
}

inline RescoreMode ParseMode(const std::string& name) {
  if (name == "plain") return RescoreMode::kPlain;
  if (name == "static") return RescoreMode::kStatic;
  if (name == "few_shot") return RescoreMode::kFewShot;
  if (name == "dynamic") return RescoreMode::kDynamic;
  ThrowUsage("unknown rescoring mode '" + name + "'");
}

struct ScoredHypothesis {
  Hypothesis hypothesis;
  double second_pass_ll = 0;
  double combined_score = 0;
  // Class used for each scored term (dynamic mode only).
  std::vector<EntityClass> per_token_classes;
  // Mean length of the prompts this score was computed over.
  double prompt_length = 0;
};

struct RescoreResult {
  size_t selected = 0;
  std::vector<ScoredHypothesis> scored;

  const ScoredHypothesis& Best() const { return scored.at(selected); }
};

struct ScoringOptions {
  // Also score the end-of-sentence token after the input region.
  bool score_eos = true;
};

// Highest combined score wins. Ties prefer the higher first-pass score, then
// the lexicographically smaller text, so the choice is invariant to the
// order in which hypotheses are stored.
inline size_t SelectBest(const std::vector<ScoredHypothesis>& scored) {
  if (scored.empty()) ThrowData("cannot select from an empty n-best list");
  size_t best = 0;
  for (size_t i = 1; i < scored.size(); ++i) {
    const auto& a = scored[i];
    const auto& b = scored[best];
    if (a.combined_score != b.combined_score) {
      if (a.combined_score > b.combined_score) best = i;
    } else if (a.hypothesis.first_pass_score != b.hypothesis.first_pass_score) {
      if (a.hypothesis.first_pass_score > b.hypothesis.first_pass_score) best = i;
    } else if (a.hypothesis.text < b.hypothesis.text) {
      best = i;
    }
  }
  return best;
}

// Scores every hypothesis with an arbitrary second-pass scorer and selects
// argmax of beta * first_pass + second_pass.
template <typename Scorer>
RescoreResult RescoreWith(const NBestList& nbest, double beta, Scorer&& scorer) {
  nbest.Validate();
  RescoreResult result;
  for (const auto& hyp : nbest.hypotheses) {
    ScoredHypothesis s = scorer(hyp);
    s.hypothesis = hyp;
    s.combined_score = beta * hyp.first_pass_score + s.second_pass_ll;
    result.scored.push_back(std::move(s));
  }
  result.selected = SelectBest(result.scored);
  return result;
}

// Second-pass scoring with a multi-task LM. Read-only over the model; one
// instance may be shared by concurrent callers.
template <typename S>
class Rescorer {
 public:
  Rescorer(const MultiTaskLM<S>& model, const Vocab& vocab, ScoringOptions options = {})
      : model_(model), vocab_(vocab), options_(options) {}

  const MultiTaskLM<S>& model() const { return model_; }
  const Vocab& vocab() const { return vocab_; }
  const ScoringOptions& options() const { return options_; }

  // Number of scored terms for an input of n tokens.
  size_t TermCount(size_t input_tokens) const { return input_tokens + (options_.score_eos ? 1 : 0); }

  // log P(term_i | everything before it) for every input token (and EOS).
  // Scaffold and biasing tokens only condition.
  std::vector<double> TermLogProbs(const Prompt& prompt,
                                   const ForwardOutput<S>* precomputed = nullptr) const {
    CheckFits(prompt);
    ForwardOutput<S> local;
    if (!precomputed) local = model_.Forward(prompt.ids);
    const ForwardOutput<S>& out = precomputed ? *precomputed : local;
    std::vector<double> terms;
    terms.reserve(TermCount(prompt.input.size()));
    for (size_t t = prompt.input.begin; t < prompt.input.end; ++t) {
      terms.push_back(LogSoftmaxAt(out.token_logits, t - 1, prompt.ids[t]));
    }
    if (options_.score_eos) {
      terms.push_back(LogSoftmaxAt(out.token_logits, prompt.input.end - 1, Id(SpecialToken::kEos)));
    }
    return terms;
  }

  double SentenceLogLikelihood(const Prompt& prompt) const {
    double sum = 0;
    for (double t : TermLogProbs(prompt)) sum += t;
    return sum;
  }

  Prompt MakePrompt(const std::vector<FewShotExample>& few_shot, const BiasingList& list,
                    const std::string& text) const {
    return BuildPrompt(vocab_, few_shot, list, text);
  }

  ScoredHypothesis ScoreStatic(const BiasingList& list, const std::vector<FewShotExample>& few_shot,
                               const Hypothesis& hyp) const {
    Prompt prompt = MakePrompt(few_shot, list, hyp.text);
    ScoredHypothesis s;
    s.hypothesis = hyp;
    s.second_pass_ll = SentenceLogLikelihood(prompt);
    s.combined_score = s.second_pass_ll;
    s.prompt_length = static_cast<double>(prompt.size());
    return s;
  }

  // Class for each scored term: argmax of the class head at the position
  // preceding the term, from a pass over the hypothesis alone.
  std::vector<EntityClass> PredictClasses(const std::string& text,
                                          ForwardOutput<S>* out_pass = nullptr,
                                          Prompt* out_prompt = nullptr) const {
    Prompt prompt = MakePrompt({}, BiasingList{}, text);
    CheckFits(prompt);
    ForwardOutput<S> out = model_.Forward(prompt.ids);
    std::vector<EntityClass> classes;
    for (size_t t = prompt.input.begin; t < prompt.input.end; ++t) {
      classes.push_back(ClassFromIndex(ArgmaxLowest<S>(out.class_logits.row(t - 1))));
    }
    if (options_.score_eos) {
      classes.push_back(
          ClassFromIndex(ArgmaxLowest<S>(out.class_logits.row(prompt.input.end - 1))));
    }
    if (out_pass) *out_pass = std::move(out);
    if (out_prompt) *out_prompt = std::move(prompt);
    return classes;
  }

  // Dynamic prompting: each term is scored under a prompt holding only the
  // biasing entries of the class predicted for it (no context for NONE).
  // One forward pass per distinct predicted class.
  ScoredHypothesis ScoreDynamic(const BiasingList& list, const Hypothesis& hyp) const {
    ForwardOutput<S> plain_pass;
    Prompt plain_prompt;
    std::vector<EntityClass> classes = PredictClasses(hyp.text, &plain_pass, &plain_prompt);

    std::map<int, std::vector<double>> terms_by_class;
    std::map<int, size_t> prompt_len_by_class;
    for (EntityClass c : classes) {
      int key = ClassIndex(c);
      if (terms_by_class.count(key)) continue;
      if (c == EntityClass::kNone) {
        // The class-prediction pass has exactly the no-context prompt.
        terms_by_class[key] = TermLogProbs(plain_prompt, &plain_pass);
        prompt_len_by_class[key] = plain_prompt.size();
      } else {
        Prompt prompt = MakePrompt({}, SelectClassContext(list, c), hyp.text);
        terms_by_class[key] = TermLogProbs(prompt);
        prompt_len_by_class[key] = prompt.size();
      }
    }
    ScoredHypothesis s;
    s.hypothesis = hyp;
    for (size_t i = 0; i < classes.size(); ++i) {
      s.second_pass_ll += terms_by_class.at(ClassIndex(classes[i]))[i];
    }
    s.combined_score = s.second_pass_ll;
    s.per_token_classes = std::move(classes);
    double len_sum = 0;
    for (const auto& [key, len] : prompt_len_by_class) len_sum += static_cast<double>(len);
    s.prompt_length = len_sum / static_cast<double>(prompt_len_by_class.size());
    return s;
  }

  ScoredHypothesis Score(RescoreMode mode, const BiasingList& list,
                         const std::vector<FewShotExample>& few_shot, const Hypothesis& hyp) const {
    switch (mode) {
      case RescoreMode::kPlain: return ScoreStatic(BiasingList{}, {}, hyp);
      case RescoreMode::kStatic: return ScoreStatic(list, {}, hyp);
      case RescoreMode::kFewShot: return ScoreStatic(list, few_shot, hyp);
      case RescoreMode::kDynamic: return ScoreDynamic(list, hyp);
    }
    return ScoreStatic(BiasingList{}, {}, hyp);
  }

  RescoreResult Rescore(const NBestList& nbest, const BiasingList& list, RescoreMode mode,
                        double beta = 0.0, const std::vector<FewShotExample>& few_shot = {}) const {
    try {
      return RescoreWith(nbest, beta, [&](const Hypothesis& h) {
        return Score(mode, list, few_shot, h);
      });
    } catch (const Error& e) {
      throw Error(e.kind(), "utterance " + nbest.utterance_id + ": " + e.what());
    }
  }

 private:
  void CheckFits(const Prompt& prompt) const {
    if (static_cast<int>(prompt.size()) > model_.config().max_seq_len) {
      ThrowData("prompt of " + std::to_string(prompt.size()) + " tokens exceeds max_seq_len " +
                std::to_string(model_.config().max_seq_len));
    }
  }

  const MultiTaskLM<S>& model_;
  const Vocab& vocab_;
  ScoringOptions options_;
};

}  // namespace ctxbias
