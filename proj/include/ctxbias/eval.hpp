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
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "ctxbias/corpus.hpp"
#include "ctxbias/metrics.hpp"
#include "ctxbias/model.hpp"
#include "ctxbias/prompting.hpp"
#include "ctxbias/random.hpp"
#include "ctxbias/rescoring.hpp"
#include "ctxbias/training.hpp"

namespace ctxbias {

struct EvalOptions {
  std::vector<RescoreMode> modes = {RescoreMode::kPlain, RescoreMode::kStatic,
                                    RescoreMode::kFewShot, RescoreMode::kDynamic};
  // Weight of the first-pass score in the combined score.
  double beta = 0.0;
  int few_shot_k = 1;
  ScoringOptions scoring;
  int threads = 1;
  uint64_t seed = 1234;
};

struct ModeReport {
  RescoreMode mode = RescoreMode::kPlain;
  WerBreakdown breakdown;
  double relative_improvement = 0;
  double mean_prompt_length = 0;
};

struct EvalReport {
  size_t n_utterances = 0;
  WerBreakdown baseline;
  WerBreakdown oracle;
  std::vector<ModeReport> modes;
  ClassF1 class_f1;

  const ModeReport& Mode(RescoreMode m) const {
    for (const auto& r : modes) {
      if (r.mode == m) return r;
    }
    ThrowUsage("mode '" + ModeName(m) + "' was not evaluated");
  }

  nlohmann::ordered_json ToJson() const {
    auto wer_json = [](const WerBreakdown& b) {
      return nlohmann::ordered_json{{"wer", b.wer()},
                                    {"substitutions", b.substitutions},
                                    {"deletions", b.deletions},
                                    {"insertions", b.insertions},
                                    {"ref_len", b.ref_len}};
    };
    nlohmann::ordered_json j;
    j["n_utterances"] = n_utterances;
    j["baseline"] = wer_json(baseline);
    j["oracle"] = wer_json(oracle);
    j["oracle"]["relative_improvement"] = RelativeImprovement(oracle.wer());
    nlohmann::ordered_json modes_json = nlohmann::ordered_json::object();
    for (const auto& m : modes) {
      auto mj = wer_json(m.breakdown);
      mj["relative_improvement"] = m.relative_improvement;
      mj["mean_prompt_length"] = m.mean_prompt_length;
      modes_json[ModeName(m.mode)] = mj;
    }
    j["modes"] = modes_json;
    j["class_f1"] = class_f1.ToJson();
    return j;
  }

  double RelativeImprovement(double wer) const {
    double base = baseline.wer();
    return base > 0 ? (base - wer) / base : 0.0;
  }
};

// One record per utterance and mode.
struct UtteranceOutput {
  std::string utterance_id;
  RescoreMode mode = RescoreMode::kPlain;
  std::string selected_text;
  std::vector<ScoredHypothesis> scored;

  nlohmann::ordered_json ToJson() const {
    nlohmann::ordered_json scores = nlohmann::ordered_json::array();
    for (const auto& s : scored) {
      scores.push_back({{"text", s.hypothesis.text},
                        {"first_pass", s.hypothesis.first_pass_score},
                        {"second_pass", s.second_pass_ll},
                        {"combined", s.combined_score}});
    }
    nlohmann::ordered_json classes = nlohmann::ordered_json::array();
    for (const auto& s : scored) {
      nlohmann::ordered_json row = nlohmann::ordered_json::array();
      for (EntityClass c : s.per_token_classes) row.push_back(ClassName(c));
      classes.push_back(row);
    }
    return {{"utterance_id", utterance_id},
            {"mode", ModeName(mode)},
            {"selected_text", selected_text},
            {"scores", scores},
            {"per_token_classes", classes}};
  }
};

// Runs fn(i) for i in [0, n) on up to `threads` workers. Results must be
// written to per-index slots so the outcome does not depend on scheduling.
template <typename Fn>
void ParallelFor(size_t n, int threads, Fn&& fn) {
  size_t workers = std::max<size_t>(1, std::min<size_t>(static_cast<size_t>(std::max(threads, 1)), n));
  if (workers <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// Few-shot examples for utterance `index`, drawn from `pool` without the
// utterance itself.
inline std::vector<FewShotExample> SampleFewShot(const std::vector<AnnotatedUtterance>& pool,
                                                 const AnnotatedUtterance& self, int k,
                                                 uint64_t seed, size_t index) {
  std::vector<FewShotExample> shots;
  std::vector<const AnnotatedUtterance*> candidates;
  for (const auto& u : pool) {
    if (u.text != self.text) candidates.push_back(&u);
  }
  if (k > 0 && candidates.empty()) ThrowData("few-shot pool has no usable examples");
  Rng rng = Rng::Derive(seed, {0xf5, index});
  for (int i = 0; i < k; ++i) {
    const AnnotatedUtterance* u = rng.Pick(candidates);
    shots.push_back({u->biasing_list, u->text});
  }
  return shots;
}

// Class-head macro F1 on the reference transcripts.
template <typename S>
ClassF1 EvaluateClassF1(const Rescorer<S>& rescorer, const std::vector<AnnotatedUtterance>& corpus,
                        int threads = 1) {
  std::vector<std::vector<EntityClass>> predicted(corpus.size());
  ParallelFor(corpus.size(), threads,
              [&](size_t i) { predicted[i] = rescorer.PredictClasses(corpus[i].text); });
  ClassF1Accumulator acc;
  for (size_t i = 0; i < corpus.size(); ++i) {
    acc.Add(predicted[i], GoldTermClasses(corpus[i], rescorer.options().score_eos));
  }
  return acc.Result();
}

// Baseline (first-pass 1-best), oracle and per-mode rescored WER over a
// test corpus. `few_shot_pool` supplies few-shot examples (usually the
// training corpus); when empty the test corpus itself is used.
template <typename S>
EvalReport Evaluate(const MultiTaskLM<S>& model, const Vocab& vocab,
                    const std::vector<AnnotatedUtterance>& test,
                    const std::vector<AnnotatedUtterance>& few_shot_pool, const EvalOptions& opts,
                    std::vector<UtteranceOutput>* outputs = nullptr) {
  if (test.empty()) ThrowData("evaluation corpus is empty");
  Rescorer<S> rescorer(model, vocab, opts.scoring);
  const auto& pool = few_shot_pool.empty() ? test : few_shot_pool;

  EvalReport report;
  report.n_utterances = test.size();
  for (const auto& u : test) {
    u.nbest.Validate();
    report.baseline += Wer(u.nbest.reference, u.nbest.hypotheses.front().text);
    report.oracle += OracleWer(u.nbest).breakdown;
  }

  for (RescoreMode mode : opts.modes) {
    std::vector<RescoreResult> results(test.size());
    ParallelFor(test.size(), opts.threads, [&](size_t i) {
      const auto& u = test[i];
      std::vector<FewShotExample> shots;
      if (mode == RescoreMode::kFewShot) shots = SampleFewShot(pool, u, opts.few_shot_k, opts.seed, i);
      results[i] = rescorer.Rescore(u.nbest, u.biasing_list, mode, opts.beta, shots);
    });
    ModeReport mr;
    mr.mode = mode;
    double len_sum = 0;
    size_t len_n = 0;
    for (size_t i = 0; i < test.size(); ++i) {
      mr.breakdown += Wer(test[i].nbest.reference, results[i].Best().hypothesis.text);
      for (const auto& s : results[i].scored) {
        len_sum += s.prompt_length;
        ++len_n;
      }
      if (outputs) {
        outputs->push_back({test[i].id, mode, results[i].Best().hypothesis.text,
                            std::move(results[i].scored)});
      }
    }
    mr.mean_prompt_length = len_n ? len_sum / static_cast<double>(len_n) : 0.0;
    mr.relative_improvement = report.RelativeImprovement(mr.breakdown.wer());
    report.modes.push_back(mr);
  }
  report.class_f1 = EvaluateClassF1(rescorer, test, opts.threads);
  return report;
}

inline void WriteUtteranceOutputs(std::ostream& os, const std::vector<UtteranceOutput>& outputs) {
  for (const auto& o : outputs) os << o.ToJson().dump() << '\n';
}

// ---------------------------------------------------------------------------
// Biasing-list length sweep.

struct SweepRow {
  size_t list_length = 0;
  RescoreMode mode = RescoreMode::kPlain;
  WerBreakdown breakdown;
  double mean_prompt_length = 0;
};

struct SweepResult {
  std::vector<SweepRow> rows;

  const SweepRow& At(size_t length, RescoreMode mode) const {
    for (const auto& r : rows) {
      if (r.list_length == length && r.mode == mode) return r;
    }
    ThrowUsage("no sweep row for length " + std::to_string(length) + " mode " + ModeName(mode));
  }

  // max - min WER of a mode across the swept lengths.
  double Spread(RescoreMode mode) const {
    double lo = 0, hi = 0;
    bool first = true;
    for (const auto& r : rows) {
      if (r.mode != mode) continue;
      double w = r.breakdown.wer();
      lo = first ? w : std::min(lo, w);
      hi = first ? w : std::max(hi, w);
      first = false;
    }
    return hi - lo;
  }

  std::string ToCsv() const {
    std::ostringstream os;
    os << "list_length,mode,wer\n";
    char buf[64];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof(buf), "%.6f", r.breakdown.wer());
      os << r.list_length << ',' << ModeName(r.mode) << ',' << buf << '\n';
    }
    return os.str();
  }

  nlohmann::ordered_json ToJson() const {
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& r : rows) {
      j.push_back({{"list_length", r.list_length},
                   {"mode", ModeName(r.mode)},
                   {"wer", r.breakdown.wer()},
                   {"mean_prompt_length", r.mean_prompt_length}});
    }
    return j;
  }
};

// Per-class quota for a balanced list of `total` entries.
inline std::array<size_t, 3> BalancedQuota(size_t total) {
  std::array<size_t, 3> q{};
  for (size_t c = 0; c < 3; ++c) q[c] = total / 3 + (c < total % 3 ? 1 : 0);
  return q;
}

// Resizes `base` to `total` entries split evenly over the three classes.
// Ground-truth entities are always kept; other entries are kept in order,
// then topped up from `distractors` (already shuffled, per class).
inline BiasingList ResizeBiasingList(const BiasingList& base,
                                     const std::array<std::vector<std::string>, 3>& distractors,
                                     const std::set<std::string>& ground_truth, size_t total) {
  auto quota = BalancedQuota(total);
  BiasingList out;
  for (EntityClass c : kEntityClasses) {
    size_t ci = static_cast<size_t>(ClassIndex(c));
    std::vector<std::string> keep;
    for (const auto& e : base.Entities(c)) {
      if (ground_truth.count(e)) keep.push_back(e);
    }
    for (const auto& e : base.Entities(c)) {
      if (!ground_truth.count(e) && keep.size() < quota[ci]) keep.push_back(e);
    }
    for (const auto& e : distractors[ci]) {
      if (keep.size() >= quota[ci]) break;
      if (!base.Contains(c, e) && !ground_truth.count(e)) keep.push_back(e);
    }
    if (keep.size() < quota[ci]) {
      ThrowData("distractor pool exhausted for class " + std::string(ClassName(c)) + ": need " +
                std::to_string(quota[ci]) + " entries, have " + std::to_string(keep.size()));
    }
    // Restore the original relative order of base entries, appended ones last.
    std::vector<std::string> ordered;
    for (const auto& e : base.Entities(c)) {
      if (std::find(keep.begin(), keep.end(), e) != keep.end()) ordered.push_back(e);
    }
    for (const auto& e : keep) {
      if (!base.Contains(c, e)) ordered.push_back(e);
    }
    for (const auto& e : ordered) out.Add(c, e);
  }
  return out;
}

template <typename S>
SweepResult SweepListLength(const MultiTaskLM<S>& model, const Vocab& vocab,
                            const std::vector<AnnotatedUtterance>& test,
                            const std::vector<size_t>& lengths, const std::vector<RescoreMode>& modes,
                            const EvalOptions& opts,
                            const std::vector<AnnotatedUtterance>& distractor_source = {}) {
  if (test.empty()) ThrowData("sweep corpus is empty");
  for (size_t L : lengths) {
    if (L < 1) ThrowUsage("list lengths must be >= 1");
  }
  std::vector<const AnnotatedUtterance*> source;
  for (const auto& u : test) source.push_back(&u);
  for (const auto& u : distractor_source) source.push_back(&u);
  const auto pools = detail::EntityPools(source);

  // One shuffled distractor order per utterance and class, shared by every
  // length so longer lists extend shorter ones.
  std::vector<std::array<std::vector<std::string>, 3>> orders(test.size());
  std::vector<std::set<std::string>> truths(test.size());
  for (size_t i = 0; i < test.size(); ++i) {
    for (const auto& s : test[i].spans) truths[i].insert(test[i].EntityText(s));
    Rng rng = Rng::Derive(opts.seed, {0x5eeb, i});
    for (size_t c = 0; c < 3; ++c) {
      orders[i][c] = pools[c];
      rng.Shuffle(orders[i][c]);
    }
  }

  Rescorer<S> rescorer(model, vocab, opts.scoring);
  SweepResult result;
  for (size_t L : lengths) {
    std::vector<BiasingList> lists(test.size());
    for (size_t i = 0; i < test.size(); ++i) {
      try {
        lists[i] = ResizeBiasingList(test[i].biasing_list, orders[i], truths[i], L);
      } catch (const Error& e) {
        throw Error(e.kind(), "utterance " + test[i].id + ": " + e.what());
      }
    }
    for (RescoreMode mode : modes) {
      std::vector<RescoreResult> results(test.size());
      ParallelFor(test.size(), opts.threads, [&](size_t i) {
        std::vector<FewShotExample> shots;
        if (mode == RescoreMode::kFewShot) {
          shots = SampleFewShot(distractor_source.empty() ? test : distractor_source, test[i],
                                opts.few_shot_k, opts.seed, i);
        }
        results[i] = rescorer.Rescore(test[i].nbest, lists[i], mode, opts.beta, shots);
      });
      SweepRow row;
      row.list_length = L;
      row.mode = mode;
      double len_sum = 0;
      size_t len_n = 0;
      for (size_t i = 0; i < test.size(); ++i) {
        row.breakdown += Wer(test[i].nbest.reference, results[i].Best().hypothesis.text);
        for (const auto& s : results[i].scored) {
          len_sum += s.prompt_length;
          ++len_n;
        }
      }
      row.mean_prompt_length = len_n ? len_sum / static_cast<double>(len_n) : 0.0;
      result.rows.push_back(row);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Attention export.

inline std::string CsvQuote(const std::string& s) {
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  out += '"';
  return out;
}

// Parses one CSV record with quoted fields.
inline std::vector<std::string> ParseCsvLine(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  fields.push_back(cur);
  return fields;
}

// A query-by-key matrix with row and column token labels.
template <typename S>
std::string AttentionToCsv(const Mat<S>& attn, const std::vector<std::string>& labels) {
  std::ostringstream os;
  os << "\"\"";
  for (const auto& l : labels) os << ',' << CsvQuote(l);
  os << '\n';
  char buf[32];
  for (Eigen::Index r = 0; r < attn.rows(); ++r) {
    os << CsvQuote(labels.at(static_cast<size_t>(r)));
    for (Eigen::Index c = 0; c < attn.cols(); ++c) {
      std::snprintf(buf, sizeof(buf), "%.8g", static_cast<double>(attn(r, c)));
      os << ',' << buf;
    }
    os << '\n';
  }
  return os.str();
}

struct AttentionExport {
  int layer = 0;
  int head = 0;
  std::filesystem::path path;
};

// Writes attention_layer{L}_head{H}.csv for each requested layer.
template <typename S>
std::vector<AttentionExport> ExportAttention(const MultiTaskLM<S>& model, const Vocab& vocab,
                                             const Prompt& prompt, const std::vector<int>& layers,
                                             const std::filesystem::path& out_dir) {
  const int n_layers = model.config().n_layers;
  for (int l : layers) {
    if (l < 0 || l >= n_layers) {
      ThrowUsage("layer index " + std::to_string(l) + " out of range [0, " +
                 std::to_string(n_layers) + ")");
    }
  }
  if (static_cast<int>(prompt.size()) > model.config().max_seq_len) {
    ThrowData("prompt exceeds max_seq_len");
  }
  ForwardOptions<S> opt;
  opt.retain_attention = true;
  auto out = model.Forward(prompt.ids, opt);
  std::vector<std::string> labels;
  for (TokenId id : prompt.ids) labels.push_back(vocab.Surface(id));

  std::filesystem::create_directories(out_dir);
  std::vector<AttentionExport> written;
  for (int l : layers) {
    for (int h = 0; h < model.config().n_heads; ++h) {
      char name[64];
      std::snprintf(name, sizeof(name), "attention_layer%d_head%d.csv", l, h);
      auto path = out_dir / name;
      std::ofstream f(path, std::ios::binary);
      if (!f) ThrowRuntime("cannot write " + path.string());
      f << AttentionToCsv(out.attention.at(l).at(h), labels);
      if (!f) ThrowRuntime("write failed for " + path.string());
      written.push_back({l, h, path});
    }
  }
  return written;
}

}  // namespace ctxbias
