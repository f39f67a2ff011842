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
#include <cctype>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ctxbias/corpus.hpp"
#include "ctxbias/entity.hpp"
#include "ctxbias/error.hpp"

namespace ctxbias {

struct WerBreakdown {
  long substitutions = 0;
  long deletions = 0;
  long insertions = 0;
  long ref_len = 0;

  long errors() const { return substitutions + deletions + insertions; }
  double wer() const { return ref_len == 0 ? 0.0 : static_cast<double>(errors()) / ref_len; }

  WerBreakdown& operator+=(const WerBreakdown& o) {
    substitutions += o.substitutions;
    deletions += o.deletions;
    insertions += o.insertions;
    ref_len += o.ref_len;
    return *this;
  }
};

// Whitespace split with ASCII case folding.
inline std::vector<std::string> SplitWords(const std::string& text) {
  std::vector<std::string> words;
  std::istringstream is(text);
  std::string w;
  while (is >> w) {
    for (auto& c : w) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    words.push_back(w);
  }
  return words;
}

// Minimal-edit word alignment with unit costs. Backtrace prefers
// substitution (or match), then deletion, then insertion.
inline WerBreakdown Wer(const std::string& reference, const std::string& hypothesis) {
  const auto ref = SplitWords(reference);
  const auto hyp = SplitWords(hypothesis);
  if (ref.empty()) ThrowData("WER: empty reference");
  const size_t n = ref.size(), m = hyp.size();
  std::vector<std::vector<int>> dp(n + 1, std::vector<int>(m + 1));
  for (size_t i = 0; i <= n; ++i) dp[i][0] = static_cast<int>(i);
  for (size_t j = 0; j <= m; ++j) dp[0][j] = static_cast<int>(j);
  for (size_t i = 1; i <= n; ++i) {
    for (size_t j = 1; j <= m; ++j) {
      int diag = dp[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      dp[i][j] = std::min({diag, dp[i - 1][j] + 1, dp[i][j - 1] + 1});
    }
  }
  WerBreakdown out;
  out.ref_len = static_cast<long>(n);
  size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && dp[i][j] == dp[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      if (ref[i - 1] != hyp[j - 1]) ++out.substitutions;
      --i;
      --j;
    } else if (i > 0 && dp[i][j] == dp[i - 1][j] + 1) {
      ++out.deletions;
      --i;
    } else {
      ++out.insertions;
      --j;
    }
  }
  return out;
}

struct OracleResult {
  WerBreakdown breakdown;
  size_t index = 0;
};

// Lowest-WER hypothesis; ties go to the lower first-pass rank.
inline OracleResult OracleWer(const NBestList& nbest) {
  nbest.Validate();
  OracleResult best;
  for (size_t i = 0; i < nbest.hypotheses.size(); ++i) {
    WerBreakdown b = Wer(nbest.reference, nbest.hypotheses[i].text);
    if (i == 0 || b.errors() < best.breakdown.errors()) best = {b, i};
  }
  return best;
}

struct ClassScore {
  long true_positives = 0;
  long false_positives = 0;
  long false_negatives = 0;

  bool HasSupport() const { return true_positives + false_positives + false_negatives > 0; }
  double Precision() const {
    long d = true_positives + false_positives;
    return d == 0 ? 0.0 : static_cast<double>(true_positives) / d;
  }
  double Recall() const {
    long d = true_positives + false_negatives;
    return d == 0 ? 0.0 : static_cast<double>(true_positives) / d;
  }
  double F1() const {
    long d = 2 * true_positives + false_positives + false_negatives;
    return d == 0 ? 0.0 : 2.0 * true_positives / d;
  }
};

struct ClassF1 {
  std::array<ClassScore, kNumClasses> per_class;
  // Mean F1 over the entity classes that occur in gold or predictions;
  // 1 when neither side has any entity.
  double macro = 1.0;

  nlohmann::ordered_json ToJson() const {
    nlohmann::ordered_json j;
    for (int c = 0; c < kNumClasses; ++c) {
      const auto& s = per_class[c];
      j[std::string(ClassName(ClassFromIndex(c)))] = {
          {"precision", s.Precision()}, {"recall", s.Recall()}, {"f1", s.F1()}};
    }
    j["macro_f1"] = macro;
    return j;
  }
};

// Token-level F1 over aligned class sequences.
class ClassF1Accumulator {
 public:
  void Add(const std::vector<EntityClass>& predicted, const std::vector<EntityClass>& gold) {
    if (predicted.size() != gold.size()) {
      ThrowData("class F1: length mismatch " + std::to_string(predicted.size()) + " vs " +
                std::to_string(gold.size()));
    }
    for (size_t i = 0; i < gold.size(); ++i) {
      int p = ClassIndex(predicted[i]), g = ClassIndex(gold[i]);
      if (p == g) {
        ++result_.per_class[p].true_positives;
      } else {
        ++result_.per_class[p].false_positives;
        ++result_.per_class[g].false_negatives;
      }
    }
  }

  ClassF1 Result() const {
    ClassF1 out = result_;
    double sum = 0;
    int n = 0;
    for (EntityClass c : kEntityClasses) {
      const auto& s = out.per_class[ClassIndex(c)];
      if (!s.HasSupport()) continue;
      sum += s.F1();
      ++n;
    }
    out.macro = n == 0 ? 1.0 : sum / n;
    return out;
  }

 private:
  ClassF1 result_;
};

inline ClassF1 ComputeClassF1(const std::vector<std::vector<EntityClass>>& predicted,
                              const std::vector<std::vector<EntityClass>>& gold) {
  if (predicted.size() != gold.size()) ThrowData("class F1: sequence count mismatch");
  ClassF1Accumulator acc;
  for (size_t i = 0; i < gold.size(); ++i) acc.Add(predicted[i], gold[i]);
  return acc.Result();
}

}  // namespace ctxbias
