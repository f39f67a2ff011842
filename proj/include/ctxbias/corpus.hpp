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
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ctxbias/entity.hpp"
#include "ctxbias/error.hpp"
#include "ctxbias/prompting.hpp"
#include "ctxbias/tokenizer.hpp"

namespace ctxbias {

inline constexpr int kCorpusSchemaVersion = 1;

struct Hypothesis {
  std::string text;
  // Log domain, higher is better.
  double first_pass_score = 0;
  // Corruption log from the noise channel: one entry per word-level edit.
  std::vector<std::string> edits;
};

struct NBestList {
  std::string utterance_id;
  std::string reference;
  // Rank 0 is the first-pass best.
  std::vector<Hypothesis> hypotheses;

  void Validate() const {
    if (hypotheses.empty()) ThrowData("n-best list " + utterance_id + " is empty");
    for (size_t i = 0; i < hypotheses.size(); ++i) {
      if (hypotheses[i].text.empty()) {
        ThrowData("n-best list " + utterance_id + " has an empty hypothesis");
      }
      if (i > 0 && hypotheses[i].first_pass_score > hypotheses[i - 1].first_pass_score) {
        ThrowData("n-best list " + utterance_id + " is not sorted by first-pass score");
      }
    }
  }
};

// Code-point offsets [start, end) into the utterance text.
struct EntitySpan {
  size_t start = 0;
  size_t end = 0;
  EntityClass cls = EntityClass::kNone;
};

struct AnnotatedUtterance {
  std::string id;
  std::string text;
  std::vector<EntitySpan> spans;
  BiasingList biasing_list;
  NBestList nbest;

  std::string EntityText(const EntitySpan& span) const {
    auto cps = utf8::Decode(text);
    return utf8::Encode(std::u32string_view(cps).substr(span.start, span.end - span.start));
  }
};

inline void ValidateSpans(const std::vector<EntitySpan>& spans, size_t text_length) {
  std::vector<EntitySpan> sorted = spans;
  std::sort(sorted.begin(), sorted.end(),
            [](const EntitySpan& a, const EntitySpan& b) { return a.start < b.start; });
  for (size_t i = 0; i < sorted.size(); ++i) {
    const auto& s = sorted[i];
    if (s.start >= s.end || s.end > text_length) {
      ThrowData("entity span [" + std::to_string(s.start) + ", " + std::to_string(s.end) +
                ") is out of bounds for text of length " + std::to_string(text_length));
    }
    if (s.cls == EntityClass::kNone) ThrowData("entity span cannot have class NONE");
    if (i > 0 && s.start < sorted[i - 1].end) {
      ThrowData("overlapping entity spans at " + std::to_string(s.start));
    }
  }
}

// Class of every code point: the covering span's class, else NONE.
inline std::vector<EntityClass> CharClasses(const std::string& text,
                                            const std::vector<EntitySpan>& spans) {
  const size_t n = utf8::Length(text);
  ValidateSpans(spans, n);
  std::vector<EntityClass> classes(n, EntityClass::kNone);
  for (const auto& s : spans) {
    std::fill(classes.begin() + s.start, classes.begin() + s.end, s.cls);
  }
  return classes;
}

// ---------------------------------------------------------------------------
// JSON-lines corpus files.

inline nlohmann::ordered_json NBestToJson(const NBestList& nbest) {
  nlohmann::ordered_json j;
  j["utterance_id"] = nbest.utterance_id;
  j["reference"] = nbest.reference;
  j["hypotheses"] = nlohmann::ordered_json::array();
  for (const auto& h : nbest.hypotheses) {
    j["hypotheses"].push_back(
        {{"text", h.text}, {"first_pass_score", h.first_pass_score}, {"edits", h.edits}});
  }
  return j;
}

inline NBestList NBestFromJson(const nlohmann::json& j) {
  NBestList nbest;
  nbest.utterance_id = j.at("utterance_id").get<std::string>();
  nbest.reference = j.at("reference").get<std::string>();
  for (const auto& h : j.at("hypotheses")) {
    Hypothesis hyp;
    hyp.text = h.at("text").get<std::string>();
    hyp.first_pass_score = h.at("first_pass_score").get<double>();
    if (h.contains("edits")) hyp.edits = h.at("edits").get<std::vector<std::string>>();
    nbest.hypotheses.push_back(std::move(hyp));
  }
  nbest.Validate();
  return nbest;
}

inline nlohmann::ordered_json SpansToJson(const std::vector<EntitySpan>& spans) {
  auto j = nlohmann::ordered_json::array();
  for (const auto& s : spans) {
    j.push_back({{"start", s.start}, {"end", s.end}, {"class", std::string(ClassName(s.cls))}});
  }
  return j;
}

inline nlohmann::ordered_json UtteranceToJson(const AnnotatedUtterance& u) {
  nlohmann::ordered_json j;
  j["schema_version"] = kCorpusSchemaVersion;
  j["id"] = u.id;
  j["text"] = u.text;
  j["entities"] = SpansToJson(u.spans);
  j["biasing_list"] = u.biasing_list.ToJson();
  j["nbest"] = NBestToJson(u.nbest);
  return j;
}

inline AnnotatedUtterance UtteranceFromJson(const nlohmann::json& j) {
  if (!j.contains("schema_version")) ThrowData("missing schema_version");
  if (j.at("schema_version").get<int>() != kCorpusSchemaVersion) {
    ThrowData("unsupported corpus schema_version " + j.at("schema_version").dump());
  }
  AnnotatedUtterance u;
  u.id = j.at("id").get<std::string>();
  u.text = j.at("text").get<std::string>();
  for (const auto& e : j.at("entities")) {
    u.spans.push_back({e.at("start").get<size_t>(), e.at("end").get<size_t>(),
                       ParseClassName(e.at("class").get<std::string>())});
  }
  ValidateSpans(u.spans, utf8::Length(u.text));
  u.biasing_list = BiasingList::FromJson(j.at("biasing_list"));
  u.nbest = NBestFromJson(j.at("nbest"));
  return u;
}

inline std::string CorpusToJsonl(const std::vector<AnnotatedUtterance>& corpus) {
  std::string out;
  for (const auto& u : corpus) out += UtteranceToJson(u).dump() + "\n";
  return out;
}

inline std::vector<AnnotatedUtterance> CorpusFromJsonl(std::istream& in,
                                                       const std::string& source = "corpus") {
  std::vector<AnnotatedUtterance> corpus;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      corpus.push_back(UtteranceFromJson(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      ThrowData(source + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      ThrowData(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return corpus;
}

inline std::vector<AnnotatedUtterance> LoadCorpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) ThrowData("cannot open corpus " + path.string());
  return CorpusFromJsonl(in, path.string());
}

}  // namespace ctxbias
