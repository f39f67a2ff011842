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

#include <chrono>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "ctxbias/checkpoint.hpp"
#include "ctxbias/datagen.hpp"
#include "ctxbias/eval.hpp"
#include "ctxbias/model.hpp"
#include "ctxbias/training.hpp"

namespace ctxbias {

struct EvalSection {
  std::vector<RescoreMode> modes = {RescoreMode::kPlain, RescoreMode::kStatic,
                                    RescoreMode::kFewShot, RescoreMode::kDynamic};
  double beta = 0.0;
  int few_shot_k = 1;
  bool score_eos = true;
  std::vector<size_t> sweep_lengths = {6, 30, 60};
  std::vector<RescoreMode> sweep_modes = {RescoreMode::kStatic, RescoreMode::kDynamic};

  nlohmann::ordered_json ToJson() const {
    auto names = [](const std::vector<RescoreMode>& ms) {
      std::vector<std::string> out;
      for (auto m : ms) out.push_back(ModeName(m));
      return out;
    };
    return {{"modes", names(modes)},         {"beta", beta},
            {"few_shot_k", few_shot_k},      {"score_eos", score_eos},
            {"sweep_lengths", sweep_lengths}, {"sweep_modes", names(sweep_modes)}};
  }

  static EvalSection FromJson(const nlohmann::json& j) {
    detail::RejectUnknownKeys(
        j, {"modes", "beta", "few_shot_k", "score_eos", "sweep_lengths", "sweep_modes"},
        "eval config");
    EvalSection e;
    auto modes = [&](const char* key, std::vector<RescoreMode>& out) {
      if (!j.contains(key)) return;
      std::vector<std::string> names;
      detail::ReadKey(j, key, names);
      out.clear();
      for (const auto& n : names) out.push_back(ParseMode(n));
    };
    modes("modes", e.modes);
    modes("sweep_modes", e.sweep_modes);
    detail::ReadKey(j, "beta", e.beta);
    detail::ReadKey(j, "few_shot_k", e.few_shot_k);
    detail::ReadKey(j, "score_eos", e.score_eos);
    detail::ReadKey(j, "sweep_lengths", e.sweep_lengths);
    if (e.few_shot_k < 0) ThrowUsage("invalid eval config: few_shot_k must be >= 0");
    for (size_t L : e.sweep_lengths) {
      if (L < 1) ThrowUsage("invalid eval config: sweep_lengths must be >= 1");
    }
    return e;
  }
};

// The whole configuration of a run. `seed` and `threads` apply to every
// stage; the seed replaces the seeds of the nested sections.
struct RunConfig {
  uint64_t seed = 1234;
  int threads = 1;
  std::string output_dir = "runs/default";
  GenConfig gen;
  ModelConfig model;
  TrainConfig train;
  EvalSection eval;

  void Resolve() {
    gen.seed = seed;
    model.seed = seed;
    train.seed = seed;
    if (threads < 1) ThrowUsage("threads must be >= 1");
    gen.Validate();
    train.Validate();
  }

  EvalOptions MakeEvalOptions() const {
    EvalOptions o;
    o.modes = eval.modes;
    o.beta = eval.beta;
    o.few_shot_k = eval.few_shot_k;
    o.scoring.score_eos = eval.score_eos;
    o.threads = threads;
    o.seed = seed;
    return o;
  }

  nlohmann::ordered_json ToJson() const {
    return {{"seed", seed},
            {"threads", threads},
            {"output_dir", output_dir},
            {"gen", gen.ToJson()},
            {"model", model.ToJson()},
            {"train", train.ToJson()},
            {"eval", eval.ToJson()}};
  }

  static RunConfig FromJson(const nlohmann::json& j) {
    detail::RejectUnknownKeys(
        j, {"seed", "threads", "output_dir", "gen", "model", "train", "eval"}, "run config");
    RunConfig c;
    detail::ReadKey(j, "seed", c.seed);
    detail::ReadKey(j, "threads", c.threads);
    detail::ReadKey(j, "output_dir", c.output_dir);
    if (j.contains("gen")) c.gen = GenConfig::FromJson(j.at("gen"));
    if (j.contains("model")) c.model = ModelConfig::FromJson(j.at("model"));
    if (j.contains("train")) c.train = TrainConfig::FromJson(j.at("train"));
    if (j.contains("eval")) c.eval = EvalSection::FromJson(j.at("eval"));
    return c;
  }

  static RunConfig Load(const std::filesystem::path& path) {
    std::string text = ReadFile(path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      ThrowUsage(path.string() + ": " + e.what());
    }
    return FromJson(j);
  }
};

// Writes the resolved configuration next to a run's outputs.
inline void PersistConfig(const RunConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  WriteFile(dir / "resolved_config.json", cfg.ToJson().dump(2) + "\n");
}

inline void WriteCorpus(const std::filesystem::path& path,
                        const std::vector<AnnotatedUtterance>& corpus) {
  WriteFile(path, CorpusToJsonl(corpus));
}

// ---------------------------------------------------------------------------
// Full pipeline: generate GT and NGT corpora, train, evaluate both test
// sets and sweep the biasing-list length.

struct ExperimentResult {
  GeneratedCorpus gt;
  std::vector<AnnotatedUtterance> ngt_test;
  TrainResult train;
  EvalReport gt_report;
  EvalReport ngt_report;
  SweepResult sweep;
  // Wall time of Train; kept out of the report so reruns stay byte-identical.
  double train_seconds = 0;

  nlohmann::ordered_json ReportJson() const {
    nlohmann::ordered_json j;
    j["gt"] = gt_report.ToJson();
    j["ngt"] = ngt_report.ToJson();
    j["sweep"] = sweep.ToJson();
    nlohmann::ordered_json log = nlohmann::ordered_json::array();
    for (const auto& e : train.log) log.push_back(e.ToJson());
    j["train_log"] = log;
    j["checkpoint_fnv1a"] = HexDigest(Fnv1a64(SerializeCheckpoint(train.checkpoint)));
    return j;
  }
};

using ProgressFn = std::function<void(const std::string&)>;

inline ExperimentResult RunExperiment(RunConfig cfg, const ProgressFn& progress = nullptr) {
  cfg.Resolve();
  auto note = [&](const std::string& m) {
    if (progress) progress(m);
  };
  ExperimentResult r;
  GenConfig gen = cfg.gen;
  gen.ablation_mode = AblationMode::kGroundTruth;
  r.gt = GenerateCorpus(gen);
  GenConfig ngt = gen;
  ngt.ablation_mode = AblationMode::kNoGroundTruth;
  ngt.n_train = 0;
  r.ngt_test = GenerateCorpus(ngt).test;
  note("generated " + std::to_string(r.gt.train.size()) + " train / " +
       std::to_string(r.gt.test.size()) + " test utterances");

  Vocab vocab = BuildCorpusVocab(r.gt.train);
  const auto t0 = std::chrono::steady_clock::now();
  r.train = Train(r.gt.train, vocab, cfg.model, cfg.train, std::nullopt,
                  [&](const EpochLog& e) { note("epoch " + e.ToJson().dump()); });
  r.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto& model = r.train.checkpoint.model;

  EvalOptions opts = cfg.MakeEvalOptions();
  r.gt_report = Evaluate(model, vocab, r.gt.test, r.gt.train, opts);
  note("evaluated GT test set");
  r.ngt_report = Evaluate(model, vocab, r.ngt_test, r.gt.train, opts);
  note("evaluated NGT test set");
  if (!cfg.eval.sweep_lengths.empty()) {
    r.sweep = SweepListLength(model, vocab, r.gt.test, cfg.eval.sweep_lengths,
                              cfg.eval.sweep_modes, opts, r.gt.train);
    note("finished list-length sweep");
  }
  return r;
}

inline void WriteExperiment(const ExperimentResult& r, const RunConfig& cfg,
                            const std::filesystem::path& dir) {
  PersistConfig(cfg, dir);
  WriteCorpus(dir / "train.jsonl", r.gt.train);
  WriteCorpus(dir / "test.jsonl", r.gt.test);
  WriteCorpus(dir / "test_ngt.jsonl", r.ngt_test);
  SaveCheckpoint(dir / "model.ckpt", r.train.checkpoint);
  std::string log;
  for (const auto& e : r.train.log) log += e.ToJson().dump() + "\n";
  WriteFile(dir / "train_log.jsonl", log);
  WriteFile(dir / "report.json", r.ReportJson().dump(2) + "\n");
  WriteFile(dir / "sweep.csv", r.sweep.ToCsv());
}

}  // namespace ctxbias
