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
#include <string>
#include <vector>

#include "json.hpp"

#include "ctxbias/entity.hpp"
#include "ctxbias/error.hpp"
#include "ctxbias/tokenizer.hpp"

namespace ctxbias {

// Per-class entity lists supplied as context at scoring time. Entities keep
// their insertion order; duplicates within a class are rejected.
class BiasingList {
 public:
  BiasingList() = default;

  // Returns false (and leaves the list unchanged) if already present.
  bool Add(EntityClass cls, const std::string& entity) {
    auto& list = Mutable(cls);
    if (entity.empty()) ThrowData("empty biasing entity");
    if (std::find(list.begin(), list.end(), entity) != list.end()) return false;
    list.push_back(entity);
    return true;
  }

  const std::vector<std::string>& Entities(EntityClass cls) const {
    return lists_[Slot(cls)];
  }

  std::vector<std::string>& Mutable(EntityClass cls) { return lists_[Slot(cls)]; }

  bool Contains(EntityClass cls, const std::string& entity) const {
    const auto& list = Entities(cls);
    return std::find(list.begin(), list.end(), entity) != list.end();
  }

  size_t Size() const {
    return lists_[0].size() + lists_[1].size() + lists_[2].size();
  }

  bool Empty() const { return Size() == 0; }

  nlohmann::ordered_json ToJson() const {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (EntityClass c : kEntityClasses) {
      j[std::string(ClassName(c))] = Entities(c);
    }
    return j;
  }

  static BiasingList FromJson(const nlohmann::json& j) {
    if (!j.is_object()) ThrowData("biasing list must be a JSON object");
    BiasingList list;
    for (const auto& [key, value] : j.items()) {
      EntityClass cls = ParseClassName(key);
      if (cls == EntityClass::kNone) ThrowData("NONE cannot key a biasing list");
      if (!value.is_array()) ThrowData("biasing list entry '" + key + "' must be an array");
      for (const auto& e : value) {
        if (!list.Add(cls, e.get<std::string>())) {
          ThrowData("duplicate entity '" + e.get<std::string>() + "' in class " + key);
        }
      }
    }
    return list;
  }

  friend bool operator==(const BiasingList& a, const BiasingList& b) {
    return a.lists_ == b.lists_;
  }

 private:
  static size_t Slot(EntityClass cls) {
    if (cls == EntityClass::kNone) ThrowData("NONE cannot key a biasing list");
    return static_cast<size_t>(cls);
  }

  std::array<std::vector<std::string>, 3> lists_;
};

struct FewShotExample {
  BiasingList biasing_list;
  std::string sentence;
};

// Half-open token range.
struct Span {
  size_t begin = 0;
  size_t end = 0;
  size_t size() const { return end - begin; }
  bool empty() const { return begin == end; }
};

// BOS + few-shot region + biasing region + " Input: " + input region.
struct Prompt {
  TokenIds ids;
  Span few_shot;
  Span biasing;
  Span input;

  size_t size() const { return ids.size(); }
};

inline const std::string kInputScaffold = " Input: ";

// "<PER>amy bob</PER><LOC>paris</LOC>": classes in PER, LOC, ORG order,
// entities space-joined, empty classes omitted.
inline std::string BuildBiasingSegment(const BiasingList& list) {
  std::string out;
  for (EntityClass c : kEntityClasses) {
    const auto& entities = list.Entities(c);
    if (entities.empty()) continue;
    out += kSpecialSurfaces[Id(OpenTag(c))];
    for (size_t i = 0; i < entities.size(); ++i) {
      if (i > 0) out += ' ';
      out += entities[i];
    }
    out += kSpecialSurfaces[Id(CloseTag(c))];
  }
  return out;
}

inline std::string RenderFewShot(const std::vector<FewShotExample>& examples) {
  std::string out;
  for (const auto& ex : examples) {
    if (ex.sentence.empty()) ThrowData("few-shot example sentence is empty");
    out += BuildBiasingSegment(ex.biasing_list) + kInputScaffold + ex.sentence + " ";
  }
  return out;
}

inline std::string RenderPromptText(const std::vector<FewShotExample>& examples,
                                    const BiasingList& list, const std::string& input) {
  return RenderFewShot(examples) + BuildBiasingSegment(list) + kInputScaffold + input;
}

inline Prompt BuildPrompt(const Vocab& vocab, const std::vector<FewShotExample>& examples,
                          const BiasingList& list, const std::string& input) {
  if (input.empty()) ThrowData("prompt input sentence is empty");
  Prompt p;
  p.ids.push_back(Id(SpecialToken::kBos));
  auto append = [&](const std::string& text) {
    Span span{p.ids.size(), p.ids.size()};
    TokenIds ids = Encode(text, vocab);
    p.ids.insert(p.ids.end(), ids.begin(), ids.end());
    span.end = p.ids.size();
    return span;
  };
  p.few_shot = append(RenderFewShot(examples));
  p.biasing = append(BuildBiasingSegment(list));
  append(kInputScaffold);
  p.input = append(input);
  return p;
}

// The dynamic prompting selector: keeps only `cls`'s entities.
inline BiasingList SelectClassContext(const BiasingList& list, EntityClass cls) {
  BiasingList out;
  if (cls == EntityClass::kNone) return out;
  out.Mutable(cls) = list.Entities(cls);
  return out;
}

}  // namespace ctxbias
