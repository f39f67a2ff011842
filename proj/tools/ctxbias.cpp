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

// Command-line front end: data generation, training, rescoring evaluation,
// list-length sweeps and attention export.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "ctxbias.hpp"

namespace fs = std::filesystem;
using namespace ctxbias;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<uint64_t> seed;
  std::optional<int> threads;
  std::string out;
};

void AddCommon(CLI::App* cmd, CommonFlags& f, bool out_required = true) {
  cmd->add_option("--config", f.config, "Run configuration (JSON)");
  cmd->add_option("--seed", f.seed, "Seed for every random stream");
  cmd->add_option("--threads", f.threads, "Worker threads for scoring");
  auto* out = cmd->add_option("--out", f.out, "Output directory");
  if (out_required) out->required();
}

RunConfig ResolveConfig(const CommonFlags& f) {
  RunConfig cfg = f.config.empty() ? RunConfig{} : RunConfig::Load(f.config);
  if (f.seed) cfg.seed = *f.seed;
  if (f.threads) cfg.threads = *f.threads;
  if (!f.out.empty()) cfg.output_dir = f.out;
  cfg.Resolve();
  return cfg;
}

std::vector<RescoreMode> ParseModes(const std::string& csv) {
  std::vector<RescoreMode> modes;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) modes.push_back(ParseMode(item));
  }
  return modes;
}

void Log(const std::string& msg) { std::cerr << "[ctxbias] " << msg << std::endl; }

BiasingList ParseBiasingArg(const std::string& arg) {
  if (arg.empty()) return {};
  std::string text = fs::exists(arg) ? ReadFile(arg) : arg;
  try {
    return BiasingList::FromJson(nlohmann::json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    ThrowUsage(std::string("biasing list is not valid JSON: ") + e.what());
  }
}

int GenData(const CommonFlags& f) {
  RunConfig cfg = ResolveConfig(f);
  auto corpus = GenerateCorpus(cfg.gen);
  fs::path out = cfg.output_dir;
  PersistConfig(cfg, out);
  WriteCorpus(out / "train.jsonl", corpus.train);
  WriteCorpus(out / "test.jsonl", corpus.test);
  Log("wrote " + std::to_string(corpus.train.size()) + " train and " +
      std::to_string(corpus.test.size()) + " test utterances to " + out.string());
  return 0;
}

int TrainCmd(const CommonFlags& f, const std::string& corpus_path, const std::string& resume) {
  RunConfig cfg = ResolveConfig(f);
  auto corpus = LoadCorpus(corpus_path);
  std::optional<Checkpoint> start;
  Vocab vocab;
  if (!resume.empty()) {
    start = LoadCheckpoint(resume);
    vocab = start->vocab;
    Log("resuming from step " + std::to_string(start->state.step));
  } else {
    vocab = BuildCorpusVocab(corpus);
  }
  fs::path out = cfg.output_dir;
  PersistConfig(cfg, out);
  std::string log_text;
  auto result = Train(corpus, vocab, cfg.model, cfg.train, std::move(start), [&](const EpochLog& e) {
    log_text += e.ToJson().dump() + "\n";
    Log("epoch " + e.ToJson().dump());
  });
  if (result.skipped_overlong > 0) {
    Log("skipped " + std::to_string(result.skipped_overlong) + " overlong examples");
  }
  SaveCheckpoint(out / "model.ckpt", result.checkpoint);
  WriteFile(out / "train_log.jsonl", log_text);
  Log("checkpoint written to " + (out / "model.ckpt").string());
  return 0;
}

int EvalCmd(const CommonFlags& f, const std::string& ckpt_path, const std::string& corpus_path,
            const std::optional<std::string>& modes, const std::string& pool_path) {
  RunConfig cfg = ResolveConfig(f);
  if (modes) cfg.eval.modes = ParseModes(*modes);
  Checkpoint ckpt = LoadCheckpoint(ckpt_path);
  auto test = LoadCorpus(corpus_path);
  std::vector<AnnotatedUtterance> pool;
  if (!pool_path.empty()) pool = LoadCorpus(pool_path);
  std::vector<UtteranceOutput> outputs;
  EvalReport report = Evaluate(ckpt.model, ckpt.vocab, test, pool, cfg.MakeEvalOptions(), &outputs);
  fs::path out = cfg.output_dir;
  PersistConfig(cfg, out);
  WriteFile(out / "report.json", report.ToJson().dump(2) + "\n");
  std::ostringstream os;
  WriteUtteranceOutputs(os, outputs);
  WriteFile(out / "utterances.jsonl", os.str());
  std::cout << report.ToJson().dump(2) << std::endl;
  return 0;
}

int SweepCmd(const CommonFlags& f, const std::string& ckpt_path, const std::string& corpus_path,
             const std::vector<size_t>& lengths, const std::optional<std::string>& modes,
             const std::string& pool_path) {
  RunConfig cfg = ResolveConfig(f);
  if (!lengths.empty()) cfg.eval.sweep_lengths = lengths;
  if (modes) cfg.eval.sweep_modes = ParseModes(*modes);
  Checkpoint ckpt = LoadCheckpoint(ckpt_path);
  auto test = LoadCorpus(corpus_path);
  std::vector<AnnotatedUtterance> pool;
  if (!pool_path.empty()) pool = LoadCorpus(pool_path);
  SweepResult sweep = SweepListLength(ckpt.model, ckpt.vocab, test, cfg.eval.sweep_lengths,
                                      cfg.eval.sweep_modes, cfg.MakeEvalOptions(), pool);
  fs::path out = cfg.output_dir;
  PersistConfig(cfg, out);
  WriteFile(out / "sweep.csv", sweep.ToCsv());
  WriteFile(out / "sweep.json", sweep.ToJson().dump(2) + "\n");
  std::cout << sweep.ToCsv();
  return 0;
}

int ExportAttentionCmd(const CommonFlags& f, const std::string& ckpt_path,
                       const std::string& sentence, const std::string& list_arg,
                       const std::vector<int>& layers) {
  RunConfig cfg = ResolveConfig(f);
  Checkpoint ckpt = LoadCheckpoint(ckpt_path);
  Prompt prompt = BuildPrompt(ckpt.vocab, {}, ParseBiasingArg(list_arg), sentence);
  std::vector<int> chosen = layers;
  if (chosen.empty()) {
    for (int l = 0; l < ckpt.model.config().n_layers; ++l) chosen.push_back(l);
  }
  fs::path out = cfg.output_dir;
  auto written = ExportAttention(ckpt.model, ckpt.vocab, prompt, chosen, out);
  PersistConfig(cfg, out);
  for (const auto& w : written) std::cout << w.path.string() << "\n";
  return 0;
}

int IngestCmd(const CommonFlags& f, const std::string& input, const std::string& classes) {
  RunConfig cfg = ResolveConfig(f);
  std::set<EntityClass> keep;
  std::stringstream ss(classes);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) keep.insert(ParseClassName(item));
  }
  auto corpus = IngestAnnotatedFile(input, keep);
  AttachSimulatedData(corpus, cfg.gen);
  fs::path out = cfg.output_dir;
  PersistConfig(cfg, out);
  WriteCorpus(out / "corpus.jsonl", corpus);
  Log("ingested " + std::to_string(corpus.size()) + " utterances");
  return 0;
}

int ExperimentCmd(const CommonFlags& f) {
  RunConfig cfg = ResolveConfig(f);
  auto result = RunExperiment(cfg, Log);
  WriteExperiment(result, cfg, cfg.output_dir);
  std::cout << result.ReportJson().dump(2) << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contextual biasing for second-pass ASR rescoring"};
  app.require_subcommand(1);

  CommonFlags gen_f, train_f, eval_f, sweep_f, attn_f, ingest_f, exp_f;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic train/test corpus");
  AddCommon(gen, gen_f);

  std::string train_corpus, resume;
  auto* train = app.add_subcommand("train", "Train the multi-task LM");
  AddCommon(train, train_f);
  train->add_option("--corpus", train_corpus, "Training corpus (JSONL)")->required();
  train->add_option("--resume", resume, "Checkpoint to continue from");

  std::string eval_ckpt, eval_corpus, eval_pool;
  std::optional<std::string> eval_modes;
  auto* eval = app.add_subcommand("eval", "Rescore a test corpus and report WER");
  AddCommon(eval, eval_f);
  eval->add_option("--checkpoint", eval_ckpt, "Model checkpoint")->required();
  eval->add_option("--corpus", eval_corpus, "Test corpus (JSONL)")->required();
  eval->add_option("--modes", eval_modes, "Comma-separated: plain,static,few_shot,dynamic");
  eval->add_option("--few-shot-pool", eval_pool, "Corpus supplying few-shot examples");

  std::string sweep_ckpt, sweep_corpus, sweep_pool;
  std::vector<size_t> sweep_lengths;
  std::optional<std::string> sweep_modes;
  auto* sweep = app.add_subcommand("sweep", "WER as a function of biasing-list length");
  AddCommon(sweep, sweep_f);
  sweep->add_option("--checkpoint", sweep_ckpt, "Model checkpoint")->required();
  sweep->add_option("--corpus", sweep_corpus, "Test corpus (JSONL)")->required();
  sweep->add_option("--lengths", sweep_lengths, "List lengths")->delimiter(',');
  sweep->add_option("--modes", sweep_modes, "Comma-separated modes");
  sweep->add_option("--pool", sweep_pool, "Extra corpus for distractors and few-shot examples");

  std::string attn_ckpt, attn_sentence, attn_list;
  std::vector<int> attn_layers;
  auto* attn = app.add_subcommand("export-attention", "Write attention matrices to CSV");
  AddCommon(attn, attn_f);
  attn->add_option("--checkpoint", attn_ckpt, "Model checkpoint")->required();
  attn->add_option("--sentence", attn_sentence, "Input sentence")->required();
  attn->add_option("--biasing-list", attn_list, "Biasing list as JSON text or file");
  attn->add_option("--layers", attn_layers, "Layer indices (default: all)")->delimiter(',');

  std::string ingest_input, ingest_classes = "PER,LOC,ORG";
  auto* ingest = app.add_subcommand("ingest", "Import an annotated corpus");
  AddCommon(ingest, ingest_f);
  ingest->add_option("--input", ingest_input, "Annotated JSONL")->required();
  ingest->add_option("--classes", ingest_classes, "Classes to keep");

  auto* exp = app.add_subcommand("experiment", "Generate, train, evaluate and sweep");
  AddCommon(exp, exp_f);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ErrorKind::kUsage);
  }

  try {
    if (*gen) return GenData(gen_f);
    if (*train) return TrainCmd(train_f, train_corpus, resume);
    if (*eval) return EvalCmd(eval_f, eval_ckpt, eval_corpus, eval_modes, eval_pool);
    if (*sweep) return SweepCmd(sweep_f, sweep_ckpt, sweep_corpus, sweep_lengths, sweep_modes, sweep_pool);
    if (*attn) return ExportAttentionCmd(attn_f, attn_ckpt, attn_sentence, attn_list, attn_layers);
    if (*ingest) return IngestCmd(ingest_f, ingest_input, ingest_classes);
    if (*exp) return ExperimentCmd(exp_f);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return static_cast<int>(ErrorKind::kRuntime);
  }
  return 0;
}
