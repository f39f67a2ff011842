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
#include <map>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "json.hpp"

#include "ctxbias/corpus.hpp"
#include "ctxbias/entity.hpp"
#include "ctxbias/error.hpp"
#include "ctxbias/metrics.hpp"
#include "ctxbias/model.hpp"
#include "ctxbias/prompting.hpp"
#include "ctxbias/random.hpp"

namespace ctxbias {

// Ground truth present in (GT) or absent from (NGT) the biasing list.
enum class AblationMode { kGroundTruth, kNoGroundTruth };

struct NoiseConfig {
  double entity_confusion_prob = 0.5;
  double word_edit_prob = 0.03;
  double char_edit_prob = 0.03;
  // First-pass score penalty per edit kind. Entity confusions are nearly
  // free, so a misspelt entity often outranks the reference.
  double entity_confusion_cost = 0.0;
  double word_edit_cost = 1.0;
  double char_edit_cost = 0.6;
  double score_noise_stddev = 0.5;
  double reference_inclusion_prob = 0.5;
};

struct GenConfig {
  int n_train = 2000;
  int n_test = 300;
  // Inventory sizes for PER, LOC, ORG.
  std::array<int, 3> inventory_size = {1000, 1000, 1000};
  std::string template_set = "cmd";
  int nbest_size = 5;
  NoiseConfig noise;
  AblationMode ablation_mode = AblationMode::kGroundTruth;
  // Entities per class in every biasing list.
  int biasing_list_size = 2;
  uint64_t seed = 1234;

  void Validate() const {
    auto fail = [](const std::string& m) { ThrowUsage("invalid generation config: " + m); };
    if (n_train < 0 || n_test < 0) fail("n_train and n_test must be >= 0");
    if (nbest_size < 1) fail("nbest_size must be >= 1");
    if (biasing_list_size < 1) fail("biasing_list_size must be >= 1");
    if (template_set != "cmd") fail("unknown template_set '" + template_set + "'");
    for (double p : {noise.entity_confusion_prob, noise.word_edit_prob, noise.char_edit_prob,
                     noise.reference_inclusion_prob}) {
      if (p < 0 || p > 1) fail("probabilities must be in [0,1]");
    }
    if (noise.score_noise_stddev < 0) fail("score_noise_stddev must be >= 0");
    for (int s : inventory_size) {
      if (s < biasing_list_size + 1) fail("inventory smaller than biasing_list_size + 1");
    }
  }

  nlohmann::ordered_json ToJson() const {
    return {{"n_train", n_train},
            {"n_test", n_test},
            {"inventory_size", inventory_size},
            {"template_set", template_set},
            {"nbest_size", nbest_size},
            {"noise",
             {{"entity_confusion_prob", noise.entity_confusion_prob},
              {"word_edit_prob", noise.word_edit_prob},
              {"char_edit_prob", noise.char_edit_prob},
              {"entity_confusion_cost", noise.entity_confusion_cost},
              {"word_edit_cost", noise.word_edit_cost},
              {"char_edit_cost", noise.char_edit_cost},
              {"score_noise_stddev", noise.score_noise_stddev},
              {"reference_inclusion_prob", noise.reference_inclusion_prob}}},
            {"ablation_mode", ablation_mode == AblationMode::kGroundTruth ? "GT" : "NGT"},
            {"biasing_list_size", biasing_list_size},
            {"seed", seed}};
  }

  static GenConfig FromJson(const nlohmann::json& j) {
    detail::RejectUnknownKeys(j,
                              {"n_train", "n_test", "inventory_size", "template_set",
                               "nbest_size", "noise", "ablation_mode", "biasing_list_size",
                               "seed"},
                              "gen config");
    GenConfig c;
    detail::ReadKey(j, "n_train", c.n_train);
    detail::ReadKey(j, "n_test", c.n_test);
    detail::ReadKey(j, "inventory_size", c.inventory_size);
    detail::ReadKey(j, "template_set", c.template_set);
    detail::ReadKey(j, "nbest_size", c.nbest_size);
    detail::ReadKey(j, "biasing_list_size", c.biasing_list_size);
    detail::ReadKey(j, "seed", c.seed);
    if (j.contains("ablation_mode")) {
      std::string mode = j.at("ablation_mode").get<std::string>();
      if (mode == "GT") {
        c.ablation_mode = AblationMode::kGroundTruth;
      } else if (mode == "NGT") {
        c.ablation_mode = AblationMode::kNoGroundTruth;
      } else {
        ThrowUsage("ablation_mode must be GT or NGT, got '" + mode + "'");
      }
    }
    if (j.contains("noise")) {
      const auto& n = j.at("noise");
      detail::RejectUnknownKeys(n,
                                {"entity_confusion_prob", "word_edit_prob", "char_edit_prob",
                                 "entity_confusion_cost", "word_edit_cost", "char_edit_cost",
                                 "score_noise_stddev", "reference_inclusion_prob"},
                                "gen.noise");
      detail::ReadKey(n, "entity_confusion_prob", c.noise.entity_confusion_prob);
      detail::ReadKey(n, "word_edit_prob", c.noise.word_edit_prob);
      detail::ReadKey(n, "char_edit_prob", c.noise.char_edit_prob);
      detail::ReadKey(n, "entity_confusion_cost", c.noise.entity_confusion_cost);
      detail::ReadKey(n, "word_edit_cost", c.noise.word_edit_cost);
      detail::ReadKey(n, "char_edit_cost", c.noise.char_edit_cost);
      detail::ReadKey(n, "score_noise_stddev", c.noise.score_noise_stddev);
      detail::ReadKey(n, "reference_inclusion_prob", c.noise.reference_inclusion_prob);
    }
    return c;
  }
};

// ---------------------------------------------------------------------------
// Templates and entity inventories.

struct UtteranceTemplate {
  const char* pattern;
  int weight;
};

// Calling, messaging and dictation templates. Slots: {PER} {LOC} {ORG}.
inline const std::vector<UtteranceTemplate>& CmdTemplates() {
  static const std::vector<UtteranceTemplate> templates = {
      {"call {PER}", 6},
      {"call {PER} on mobile", 3},
      {"send a message to {PER} about {ORG}", 4},
      {"text {PER} that i am running late", 3},
      {"navigate to {LOC}", 5},
      {"how long does it take to drive to {LOC}", 3},
      {"what is the weather like in {LOC} today", 3},
      {"set up a meeting with {PER} from {ORG}", 4},
      {"email {ORG} about the invoice", 3},
      {"remind me to call {PER} when i get to {LOC}", 3},
      {"open the {ORG} app", 2},
      {"i will be there in ten minutes", 2},
      {"thanks for the update see you soon", 2},
      {"can you pick up some milk on the way home", 2},
      {"running a little late today", 2},
  };
  return templates;
}

// Non-slot words of the templates; source of word-level substitutions.
inline std::vector<std::string> TemplateWords() {
  std::set<std::string> words;
  for (const auto& t : CmdTemplates()) {
    for (const auto& w : SplitWords(t.pattern)) {
      if (w.front() != '{') words.insert(w);
    }
  }
  return {words.begin(), words.end()};
}

namespace detail {

// Letters by frequency rank. Confusable pairs (b/p, d/t, g/k, m/n, s/z, ...)
// sit far apart so most spelling variants are less typical than the name.
inline const std::string kConsonants = "tmksflbrdnghjvpz";
inline const std::string kVowels = "aeiou";

inline const std::vector<double>& ConsonantWeights() {
  static const std::vector<double> w = [] {
    std::vector<double> out;
    for (size_t r = 0; r < kConsonants.size(); ++r) out.push_back(1.0 / static_cast<double>(r + 1));
    return out;
  }();
  return w;
}

inline std::string Syllable(Rng& rng) {
  static const std::vector<double> vowel_weights = {0.35, 0.25, 0.2, 0.12, 0.08};
  return std::string(1, kConsonants[rng.Weighted(ConsonantWeights())]) +
         kVowels[rng.Weighted(vowel_weights)];
}

inline std::string MakeName(EntityClass cls, Rng& rng) {
  static const std::vector<std::string> loc_suffix = {"burg", "ton", "dal", "vik", "ora", "mont"};
  static const std::vector<std::string> org_suffix = {"tek", "ix", "on", "co", "lab", "net"};
  std::string name;
  switch (cls) {
    case EntityClass::kPer: {
      int n = rng.Bernoulli(0.3) ? 3 : 2;
      for (int i = 0; i < n; ++i) name += Syllable(rng);
      if (n == 2 && rng.Bernoulli(0.4)) name += "nrsl"[rng.Index(4)];
      break;
    }
    case EntityClass::kLoc:
      name = Syllable(rng);
      if (rng.Bernoulli(0.5)) name += Syllable(rng);
      name += rng.Pick(loc_suffix);
      break;
    case EntityClass::kOrg:
      name = Syllable(rng) + Syllable(rng) + rng.Pick(org_suffix);
      break;
    default:
      ThrowData("no names for NONE");
  }
  return name;
}

inline bool IsVowel(char c) { return kVowels.find(c) != std::string::npos; }

inline char SimilarConsonant(char c, Rng& rng) {
  static const std::vector<std::string> groups = {"bp", "dt", "gk", "fv", "sz",
                                                  "mn", "lr", "jh", "kc"};
  std::vector<char> options;
  for (const auto& g : groups) {
    if (g.find(c) == std::string::npos) continue;
    for (char o : g) {
      if (o != c) options.push_back(o);
    }
  }
  if (options.empty()) return kConsonants[rng.Index(kConsonants.size())];
  return options[rng.Index(options.size())];
}

// One plausible single-character spelling variant (no spaces touched).
inline std::string SpellingVariant(const std::string& entity, Rng& rng) {
  std::vector<size_t> letters;
  for (size_t i = 0; i < entity.size(); ++i) {
    if (std::isalpha(static_cast<unsigned char>(entity[i]))) letters.push_back(i);
  }
  if (letters.empty()) return entity + "e";
  std::string v = entity;
  size_t pos = letters[rng.Index(letters.size())];
  double r = rng.Uniform();
  if (r < 0.6) {
    char c = v[pos];
    if (IsVowel(c)) {
      char o;
      do {
        o = kVowels[rng.Index(kVowels.size())];
      } while (o == c);
      v[pos] = o;
    } else {
      v[pos] = SimilarConsonant(c, rng);
    }
  } else if (r < 0.8 && letters.size() > 3) {
    v.erase(pos, 1);
  } else {
    v.insert(pos + 1, 1, IsVowel(v[pos]) ? 'e' : v[pos]);
  }
  return v;
}

}  // namespace detail

// Disjoint per-class name inventories, deterministic in the seed.
class EntityInventory {
 public:
  static EntityInventory Generate(const std::array<int, 3>& sizes, uint64_t seed) {
    EntityInventory inv;
    std::unordered_set<std::string> seen;
    for (EntityClass c : kEntityClasses) {
      Rng rng = Rng::Derive(seed, {0x1a7, static_cast<uint64_t>(ClassIndex(c))});
      auto& names = inv.names_[ClassIndex(c)];
      int attempts = 0;
      while (static_cast<int>(names.size()) < sizes[ClassIndex(c)]) {
        if (++attempts > 100 * sizes[ClassIndex(c)] + 1000) {
          ThrowUsage("cannot generate " + std::to_string(sizes[ClassIndex(c)]) +
                     " distinct names for class " + std::string(ClassName(c)));
        }
        std::string name = detail::MakeName(c, rng);
        if (seen.insert(name).second) names.push_back(name);
      }
    }
    inv.all_ = std::move(seen);
    return inv;
  }

  static EntityInventory FromLists(std::array<std::vector<std::string>, 3> names) {
    EntityInventory inv;
    for (int c = 0; c < 3; ++c) {
      std::set<std::string> uniq(names[c].begin(), names[c].end());
      inv.names_[c].assign(uniq.begin(), uniq.end());
      inv.all_.insert(uniq.begin(), uniq.end());
    }
    return inv;
  }

  const std::vector<std::string>& Names(EntityClass c) const { return names_.at(ClassIndex(c)); }
  bool Contains(const std::string& name) const { return all_.count(name) != 0; }

  // A spelling variant that is not itself an inventory entry. Falls back to
  // appending a letter if every sampled variant collides.
  std::string Confusion(const std::string& entity, Rng& rng) const {
    for (int i = 0; i < 32; ++i) {
      std::string v = detail::SpellingVariant(entity, rng);
      if (v != entity && !Contains(v)) return v;
    }
    return entity + "h";
  }

 private:
  std::array<std::vector<std::string>, 3> names_;
  std::unordered_set<std::string> all_;
};

// ---------------------------------------------------------------------------

namespace detail {

enum : uint64_t { kStreamText = 1, kStreamNBest = 2, kStreamList = 3 };

inline AnnotatedUtterance FillTemplate(const EntityInventory& inv, Rng& rng) {
  const auto& templates = CmdTemplates();
  int total = 0;
  for (const auto& t : templates) total += t.weight;
  int pick = static_cast<int>(rng.Index(static_cast<size_t>(total)));
  const UtteranceTemplate* chosen = &templates.back();
  for (const auto& t : templates) {
    if (pick < t.weight) {
      chosen = &t;
      break;
    }
    pick -= t.weight;
  }
  AnnotatedUtterance u;
  std::string pattern = chosen->pattern;
  size_t i = 0;
  while (i < pattern.size()) {
    if (pattern[i] == '{') {
      size_t close = pattern.find('}', i);
      EntityClass cls = ParseClassName(pattern.substr(i + 1, close - i - 1));
      std::string entity = rng.Pick(inv.Names(cls));
      size_t start = utf8::Length(u.text);
      u.text += entity;
      u.spans.push_back({start, start + utf8::Length(entity), cls});
      i = close + 1;
    } else {
      u.text += pattern[i++];
    }
  }
  return u;
}

struct WordSlot {
  std::string word;
  int entity = -1;  // index into spans, or -1
};

inline std::vector<WordSlot> WordSlots(const AnnotatedUtterance& u) {
  std::vector<WordSlot> slots;
  auto cps = utf8::Decode(u.text);
  size_t i = 0;
  while (i < cps.size()) {
    if (cps[i] == U' ') {
      ++i;
      continue;
    }
    int entity = -1;
    for (size_t s = 0; s < u.spans.size(); ++s) {
      if (u.spans[s].start == i) entity = static_cast<int>(s);
    }
    size_t end = entity >= 0 ? u.spans[entity].end : i;
    if (entity < 0) {
      while (end < cps.size() && cps[end] != U' ') ++end;
    }
    slots.push_back({utf8::Encode(std::u32string_view(cps).substr(i, end - i)), entity});
    i = end;
  }
  return slots;
}

inline std::string CharEdit(const std::string& word, Rng& rng) {
  std::string w = word;
  size_t pos = rng.Index(w.size());
  double r = rng.Uniform();
  if (r < 0.4 && w.size() > 1) {
    w.erase(pos, 1);
  } else if (r < 0.7) {
    w.insert(pos, 1, "abcdefghijklmnopqrstuvwxyz"[rng.Index(26)]);
  } else {
    char c;
    do {
      c = "abcdefghijklmnopqrstuvwxyz"[rng.Index(26)];
    } while (c == w[pos]);
    w[pos] = c;
  }
  return w;
}

}  // namespace detail

// Draws n-best hypotheses from a noise channel over the reference. Every
// hypothesis records one edit per corrupted word; the log always equals the
// word-level edit distance to the reference.
inline NBestList SimulateNBest(const AnnotatedUtterance& utt, const GenConfig& cfg,
                               const EntityInventory& inv, Rng& rng) {
  const NoiseConfig& nz = cfg.noise;
  NBestList nbest;
  nbest.utterance_id = utt.id;
  nbest.reference = utt.text;
  const auto slots = detail::WordSlots(utt);
  static const std::vector<std::string> filler = TemplateWords();
  const bool silent = nz.entity_confusion_prob == 0 && nz.word_edit_prob == 0 &&
                      nz.char_edit_prob == 0;

  auto clean = [&]() {
    Hypothesis h;
    h.text = utt.text;
    h.first_pass_score = rng.Normal(0, nz.score_noise_stddev);
    return h;
  };

  std::vector<Hypothesis> hyps;
  std::set<std::string> seen;
  if (silent) {
    for (int i = 0; i < cfg.nbest_size; ++i) hyps.push_back(clean());
  } else {
    if (rng.Bernoulli(nz.reference_inclusion_prob)) {
      hyps.push_back(clean());
      seen.insert(utt.text);
    }
    bool has_entity = !utt.spans.empty();
    int attempts = 0;
    while (static_cast<int>(hyps.size()) < cfg.nbest_size && attempts++ < 200 * cfg.nbest_size) {
      std::vector<std::string> words;
      std::vector<std::string> edits;
      std::vector<bool> deleted;
      double cost = 0;
      // Late attempts force an entity confusion so short lists still fill.
      const bool force = attempts > 20 * cfg.nbest_size && has_entity;
      for (size_t i = 0; i < slots.size(); ++i) {
        const auto& slot = slots[i];
        bool del = false;
        if (slot.entity >= 0) {
          if (force || rng.Bernoulli(nz.entity_confusion_prob)) {
            words.push_back(inv.Confusion(slot.word, rng));
            edits.push_back("ent@" + std::to_string(i));
            cost += nz.entity_confusion_cost;
          } else {
            words.push_back(slot.word);
          }
        } else {
          double r = rng.Uniform();
          if (r < nz.word_edit_prob) {
            if (rng.Bernoulli(0.5) && slots.size() > 1) {
              del = true;
              edits.push_back("del@" + std::to_string(i));
            } else {
              std::string w;
              do {
                w = rng.Pick(filler);
              } while (w == slot.word);
              words.push_back(w);
              edits.push_back("sub@" + std::to_string(i));
            }
            cost += nz.word_edit_cost;
          } else if (r < nz.word_edit_prob + nz.char_edit_prob) {
            words.push_back(detail::CharEdit(slot.word, rng));
            edits.push_back("char@" + std::to_string(i));
            cost += nz.char_edit_cost;
          } else {
            words.push_back(slot.word);
          }
        }
        deleted.push_back(del);
      }
      if (rng.Bernoulli(nz.word_edit_prob * 0.5)) {
        // Insert after a kept word whose successor is kept too.
        size_t gap = rng.Index(slots.size() + 1);
        bool left_ok = gap == 0 || !deleted[gap - 1];
        bool right_ok = gap == slots.size() || !deleted[gap];
        if (left_ok && right_ok) {
          size_t kept_before = 0;
          for (size_t i = 0; i < gap; ++i) kept_before += !deleted[i];
          words.insert(words.begin() + static_cast<long>(kept_before), rng.Pick(filler));
          edits.push_back("ins@" + std::to_string(gap));
          cost += nz.word_edit_cost;
        }
      }
      if (edits.empty() || words.empty()) continue;
      std::string text;
      for (size_t i = 0; i < words.size(); ++i) text += (i ? " " : "") + words[i];
      if (seen.count(text)) continue;
      if (Wer(utt.text, text).errors() != static_cast<long>(edits.size())) continue;
      Hypothesis h;
      h.text = text;
      h.edits = std::move(edits);
      h.first_pass_score = -cost + rng.Normal(0, nz.score_noise_stddev);
      seen.insert(text);
      hyps.push_back(std::move(h));
    }
    if (hyps.empty()) hyps.push_back(clean());
  }
  std::stable_sort(hyps.begin(), hyps.end(), [](const Hypothesis& a, const Hypothesis& b) {
    return a.first_pass_score > b.first_pass_score;
  });
  nbest.hypotheses = std::move(hyps);
  return nbest;
}

// Per-class lists of `per_class` entries. GT keeps the utterance's own
// entities and pads with random distractors; NGT holds distractors only.
inline BiasingList BuildBiasingList(const AnnotatedUtterance& utt, AblationMode mode,
                                    int per_class, const EntityInventory& inv, Rng& rng) {
  BiasingList list;
  for (EntityClass c : kEntityClasses) {
    std::set<std::string> truth;
    for (const auto& s : utt.spans) {
      if (s.cls == c) truth.insert(utt.EntityText(s));
    }
    std::vector<std::string> chosen;
    if (mode == AblationMode::kGroundTruth) chosen.assign(truth.begin(), truth.end());
    const auto& pool = inv.Names(c);
    // Classes absent from an ingested corpus get no entries.
    if (pool.empty() && truth.empty()) continue;
    size_t available = 0;
    for (const auto& n : pool) available += truth.count(n) == 0;
    size_t target = std::max(static_cast<size_t>(per_class), chosen.size());
    if (available < target - chosen.size()) {
      ThrowData("entity inventory for " + std::string(ClassName(c)) + " exhausted (" +
                std::to_string(available) + " distractors, need " +
                std::to_string(target - chosen.size()) + ")");
    }
    std::set<std::string> used(chosen.begin(), chosen.end());
    while (chosen.size() < target) {
      const std::string& cand = rng.Pick(pool);
      if (truth.count(cand) || used.count(cand)) continue;
      used.insert(cand);
      chosen.push_back(cand);
    }
    rng.Shuffle(chosen);
    for (const auto& e : chosen) list.Add(c, e);
  }
  return list;
}

struct GeneratedCorpus {
  std::vector<AnnotatedUtterance> train;
  std::vector<AnnotatedUtterance> test;
};

inline AnnotatedUtterance GenerateUtterance(const GenConfig& cfg, const EntityInventory& inv,
                                            uint64_t split, size_t index, AblationMode mode) {
  Rng text_rng = Rng::Derive(cfg.seed, {split, index, detail::kStreamText});
  AnnotatedUtterance u = detail::FillTemplate(inv, text_rng);
  char id[32];
  std::snprintf(id, sizeof(id), "%s-%05zu", split == 0 ? "train" : "test", index);
  u.id = id;
  Rng nbest_rng = Rng::Derive(cfg.seed, {split, index, detail::kStreamNBest});
  u.nbest = SimulateNBest(u, cfg, inv, nbest_rng);
  Rng list_rng = Rng::Derive(cfg.seed, {split, index, detail::kStreamList});
  u.biasing_list = BuildBiasingList(u, mode, cfg.biasing_list_size, inv, list_rng);
  return u;
}

// Training utterances always carry ground-truth lists; the ablation mode
// applies to the test split. Text and n-best streams are independent of the
// mode, so GT and NGT corpora share utterances and hypotheses.
inline GeneratedCorpus GenerateCorpus(const GenConfig& cfg) {
  cfg.Validate();
  EntityInventory inv = EntityInventory::Generate(cfg.inventory_size, cfg.seed);
  GeneratedCorpus out;
  for (int i = 0; i < cfg.n_train; ++i) {
    out.train.push_back(GenerateUtterance(cfg, inv, 0, i, AblationMode::kGroundTruth));
  }
  for (int i = 0; i < cfg.n_test; ++i) {
    out.test.push_back(GenerateUtterance(cfg, inv, 1, i, cfg.ablation_mode));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ingestion of externally annotated corpora.

// External label -> class. Labels mapped to NONE are known but dropped.
inline const std::map<std::string, EntityClass>& DefaultLabelMap() {
  static const std::map<std::string, EntityClass> map = {
      {"PER", EntityClass::kPer},      {"PERSON", EntityClass::kPer},
      {"LOC", EntityClass::kLoc},      {"LOCATION", EntityClass::kLoc},
      {"GPE", EntityClass::kLoc},      {"PLACE", EntityClass::kLoc},
      {"ORG", EntityClass::kOrg},      {"ORGANIZATION", EntityClass::kOrg},
      {"NORP", EntityClass::kNone},    {"LAW", EntityClass::kNone},
      {"DATE", EntityClass::kNone},    {"WHEN", EntityClass::kNone},
      {"TIME", EntityClass::kNone},    {"QUANT", EntityClass::kNone},
      {"CARDINAL", EntityClass::kNone}, {"ORDINAL", EntityClass::kNone},
      {"MONEY", EntityClass::kNone},   {"PERCENT", EntityClass::kNone},
      {"EVENT", EntityClass::kNone},   {"FAC", EntityClass::kNone},
      {"PRODUCT", EntityClass::kNone}, {"LANGUAGE", EntityClass::kNone},
      {"WORK_OF_ART", EntityClass::kNone}, {"MISC", EntityClass::kNone},
  };
  return map;
}

// Reads {text, entities: [{start, end, class}]} lines (code-point offsets).
// Entities whose mapped class is not in `keep` are dropped. Lists and
// n-best fields are left empty; see AttachSimulatedData.
inline std::vector<AnnotatedUtterance> IngestAnnotated(
    std::istream& in, const std::set<EntityClass>& keep,
    const std::map<std::string, EntityClass>& label_map = DefaultLabelMap(),
    const std::string& source = "input") {
  std::vector<AnnotatedUtterance> out;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto where = [&] { return source + ":" + std::to_string(line_no) + ": "; };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      ThrowData(where() + "unparseable line: " + e.what());
    }
    AnnotatedUtterance u;
    try {
      u.text = j.at("text").get<std::string>();
      u.id = j.contains("id") ? j.at("id").get<std::string>() : "ext-" + std::to_string(line_no);
      if (u.text.empty()) ThrowData("empty text");
      const size_t len = utf8::Length(u.text);
      if (j.contains("entities")) {
        for (const auto& e : j.at("entities")) {
          std::string label = e.at("class").get<std::string>();
          auto it = label_map.find(label);
          if (it == label_map.end()) ThrowData("unknown class label '" + label + "'");
          long start = e.at("start").get<long>(), end = e.at("end").get<long>();
          if (start < 0 || end <= start || static_cast<size_t>(end) > len) {
            ThrowData("entity span [" + std::to_string(start) + ", " + std::to_string(end) +
                      ") out of bounds for text of length " + std::to_string(len));
          }
          if (it->second == EntityClass::kNone || !keep.count(it->second)) continue;
          u.spans.push_back({static_cast<size_t>(start), static_cast<size_t>(end), it->second});
        }
      }
      ValidateSpans(u.spans, len);
    } catch (const nlohmann::json::exception& e) {
      ThrowData(where() + e.what());
    } catch (const Error& e) {
      ThrowData(where() + e.what());
    }
    u.nbest.utterance_id = u.id;
    u.nbest.reference = u.text;
    out.push_back(std::move(u));
  }
  return out;
}

inline std::vector<AnnotatedUtterance> IngestAnnotatedFile(const std::filesystem::path& path,
                                                           const std::set<EntityClass>& keep) {
  std::ifstream in(path);
  if (!in) ThrowData("cannot open " + path.string());
  return IngestAnnotated(in, keep, DefaultLabelMap(), path.string());
}

// Fills biasing lists (distractors from the corpus's own entities) and
// simulated n-best lists for ingested utterances.
inline void AttachSimulatedData(std::vector<AnnotatedUtterance>& corpus, const GenConfig& cfg) {
  std::array<std::vector<std::string>, 3> names;
  for (const auto& u : corpus) {
    for (const auto& s : u.spans) names[ClassIndex(s.cls)].push_back(u.EntityText(s));
  }
  EntityInventory inv = EntityInventory::FromLists(names);
  for (size_t i = 0; i < corpus.size(); ++i) {
    auto& u = corpus[i];
    Rng nbest_rng = Rng::Derive(cfg.seed, {2, i, detail::kStreamNBest});
    u.nbest = SimulateNBest(u, cfg, inv, nbest_rng);
    Rng list_rng = Rng::Derive(cfg.seed, {2, i, detail::kStreamList});
    u.biasing_list = BuildBiasingList(u, cfg.ablation_mode, cfg.biasing_list_size, inv, list_rng);
  }
}

}  // namespace ctxbias
