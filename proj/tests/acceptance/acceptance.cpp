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

// Prints one PASS/FAIL line per acceptance criterion; exits nonzero if any fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "checks.hpp"
#include "ctxbias.hpp"

namespace {

using namespace ctxbias;
using ctxbias::testing::CheckResult;
using ctxbias::testing::Fmt;
namespace fs = std::filesystem;

double Seconds(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - since).count();
}

struct Line {
  int id;
  CheckResult result;
};

void Report(const Line& l) {
  std::printf("criterion %d: %s  %s\n", l.id, l.result.ok ? "PASS" : "FAIL", l.result.detail.c_str());
  std::fflush(stdout);
}

CheckResult Criterion1() {
  auto t0 = std::chrono::steady_clock::now();
  std::vector<std::pair<const char*, std::function<CheckResult()>>> checks = {
      {"tokenizer", [] { return testing::CheckTokenizerRoundTrip(1000); }},
      {"gumbel", testing::CheckGumbel},
      {"loss", testing::CheckLossBoundaries},
      {"lora", testing::CheckLoraIdentity},
      {"causality", testing::CheckCausality},
      {"wer", [] { return testing::CheckWerAgainstDp(200); }},
      {"oracle", testing::CheckOracleWer},
      {"plumbing", testing::CheckOraclePlumbing},
  };
  CheckResult out{true, ""};
  for (auto& [name, fn] : checks) {
    CheckResult r = fn();
    if (!r.ok) {
      out.ok = false;
      out.detail += std::string(name) + " failed (" + r.detail + "); ";
    }
  }
  double s = Seconds(t0);
  if (s >= 120) out.ok = false;
  out.detail += Fmt("%.0f checks in %.1fs", static_cast<double>(checks.size()), s);
  return out;
}

CheckResult Criterion2() {
  auto t0 = std::chrono::steady_clock::now();
  CheckResult r = testing::CheckGradients();
  double s = Seconds(t0);
  if (s >= 60) r.ok = false;
  r.detail += Fmt(" in %.1fs", s);
  return r;
}

CheckResult Criterion3() {
  CheckResult a = testing::CheckDynamicBruteForce(50);
  CheckResult b = testing::CheckDynamicEqualsStatic(50);
  return {a.ok && b.ok, "brute force: " + a.detail + "; single class: " + b.detail};
}

double Rel(double base, double x) { return base > 0 ? (base - x) / base : 0.0; }

CheckResult Criterion4(const ExperimentResult& r) {
  const auto& g = r.gt_report;
  CheckResult out{true, ""};
  for (const auto& m : g.modes) {
    if (!(g.oracle.wer() < m.breakdown.wer())) {
      out.ok = false;
      out.detail += "oracle not below " + ModeName(m.mode) + "; ";
    }
  }
  double plain = g.Mode(RescoreMode::kPlain).breakdown.wer();
  double stat = g.Mode(RescoreMode::kStatic).breakdown.wer();
  double dyn = g.Mode(RescoreMode::kDynamic).breakdown.wer();
  double f1 = g.class_f1.macro;
  out.ok = out.ok && Rel(plain, stat) >= 0.05 && dyn <= stat && f1 >= 0.9 && r.train_seconds <= 900;
  out.detail += Fmt("oracle %.4f plain %.4f static %.4f", g.oracle.wer(), plain, stat) +
                Fmt(" dynamic %.4f (static vs plain %.1f%%)", dyn, 100 * Rel(plain, stat)) +
                Fmt(" macro-F1 %.3f train %.0fs", f1, r.train_seconds);
  return out;
}

CheckResult Criterion5(const ExperimentResult& r) {
  const auto& g = r.gt_report;
  const auto& n = r.ngt_report;
  double plain = n.Mode(RescoreMode::kPlain).breakdown.wer();
  CheckResult out{true, Fmt("ngt plain %.4f", plain)};
  for (RescoreMode m : {RescoreMode::kStatic, RescoreMode::kFewShot, RescoreMode::kDynamic}) {
    double ngt = n.Mode(m).breakdown.wer();
    double gt = g.Mode(m).breakdown.wer();
    bool ok = ngt <= 1.02 * plain && Rel(ngt, gt) >= 0.05;
    out.ok = out.ok && ok;
    out.detail += " | " + ModeName(m) + Fmt(" ngt %.4f gt %.4f (%.1f%%)", ngt, gt, 100 * Rel(ngt, gt));
  }
  return out;
}

CheckResult Criterion6(const ExperimentResult& r) {
  const auto& s = r.sweep;
  double ss = s.Spread(RescoreMode::kStatic), ds = s.Spread(RescoreMode::kDynamic);
  double sl = s.At(60, RescoreMode::kStatic).mean_prompt_length;
  double dl = s.At(60, RescoreMode::kDynamic).mean_prompt_length;
  double ratio = sl > 0 ? dl / sl : 1.0;
  return {ds <= ss && ratio <= 0.45,
          Fmt("spread static %.4f dynamic %.4f", ss, ds) + Fmt(" prompt@60 %.1f%% of static", 100 * ratio)};
}

std::vector<std::string> ArtifactBytes(const fs::path& dir) {
  std::vector<std::string> out;
  for (const char* f : {"report.json", "sweep.csv", "train_log.jsonl", "model.ckpt"}) {
    out.push_back(ReadFile(dir / f));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::string work_dir = "acceptance_runs";
  uint64_t seed = 1234;
  app.add_option("--work-dir", work_dir, "Directory for experiment outputs");
  app.add_option("--seed", seed, "Experiment seed");
  CLI11_PARSE(app, argc, argv);

  try {
    std::vector<Line> lines;
    auto run = [&](int id, const std::function<CheckResult()>& fn) {
      lines.push_back({id, fn()});
      Report(lines.back());
    };
    run(1, Criterion1);
    run(2, Criterion2);
    run(3, Criterion3);

    RunConfig cfg;
    cfg.seed = seed;
    auto quiet = [](const std::string& m) { std::cerr << "[acceptance] " << m << std::endl; };
    fs::path first = fs::path(work_dir) / "run1", second = fs::path(work_dir) / "run2";
    cfg.output_dir = first.string();
    ExperimentResult a = RunExperiment(cfg, quiet);
    WriteExperiment(a, cfg, first);
    run(4, [&] { return Criterion4(a); });
    run(5, [&] { return Criterion5(a); });
    run(6, [&] { return Criterion6(a); });

    cfg.output_dir = second.string();
    ExperimentResult b = RunExperiment(cfg, quiet);
    WriteExperiment(b, cfg, second);
    run(7, [&] {
      bool same = ArtifactBytes(first) == ArtifactBytes(second) &&
                  a.ReportJson().dump() == b.ReportJson().dump();
      return CheckResult{same, same ? "report, sweep, log and checkpoint bytes identical"
                                    : "rerun artifacts differ"};
    });

    int failed = 0;
    for (const auto& l : lines) failed += !l.result.ok;
    std::printf("%d/%zu criteria passed\n", static_cast<int>(lines.size()) - failed, lines.size());
    return failed == 0 ? 0 : 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "acceptance aborted: %s\n", e.what());
    return 3;
  }
}
