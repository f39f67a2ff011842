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
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "ctxbias/entity.hpp"
#include "ctxbias/error.hpp"

namespace ctxbias {

using TokenId = int32_t;
using TokenIds = std::vector<TokenId>;

enum class SpecialToken : TokenId {
  kBos = 0,
  kEos,
  kPad,
  kOpenPer,
  kClosePer,
  kOpenLoc,
  kCloseLoc,
  kOpenOrg,
  kCloseOrg,
  kInputMark,
  kExampleMark,
};

inline constexpr int kNumSpecialTokens = 11;

inline constexpr std::array<std::string_view, kNumSpecialTokens>
    kSpecialSurfaces = {"<s>",   "</s>",  "<pad>", "<PER>",  "</PER>", "<LOC>",
                        "</LOC>", "<ORG>", "</ORG>", "Input:", "Example:"};

inline constexpr TokenId Id(SpecialToken t) { return static_cast<TokenId>(t); }

inline SpecialToken OpenTag(EntityClass c) {
  switch (c) {
    case EntityClass::kPer: return SpecialToken::kOpenPer;
    case EntityClass::kLoc: return SpecialToken::kOpenLoc;
    case EntityClass::kOrg: return SpecialToken::kOpenOrg;
    default: ThrowData("NONE has no class tag");
  }
}

inline SpecialToken CloseTag(EntityClass c) {
  return static_cast<SpecialToken>(Id(OpenTag(c)) + 1);
}

namespace utf8 {

inline std::u32string Decode(std::string_view s) {
  std::u32string out;
  out.reserve(s.size());
  size_t i = 0;
  while (i < s.size()) {
    auto b = static_cast<unsigned char>(s[i]);
    int len = b < 0x80 ? 1 : (b >> 5) == 0x6 ? 2 : (b >> 4) == 0xe ? 3
              : (b >> 3) == 0x1e ? 4 : 0;
    if (len == 0 || i + len > s.size()) {
      ThrowData("invalid UTF-8 at byte " + std::to_string(i));
    }
    char32_t cp = len == 1 ? b : len == 2 ? (b & 0x1f) : len == 3 ? (b & 0x0f)
                                                                  : (b & 0x07);
    for (int k = 1; k < len; ++k) {
      auto c = static_cast<unsigned char>(s[i + k]);
      if ((c >> 6) != 0x2) ThrowData("invalid UTF-8 at byte " + std::to_string(i + k));
      cp = (cp << 6) | (c & 0x3f);
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

inline void Append(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xc0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xe0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
  } else {
    out.push_back(static_cast<char>(0xf0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3f)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
  }
}

inline std::string Encode(std::u32string_view s) {
  std::string out;
  for (char32_t cp : s) Append(out, cp);
  return out;
}

inline size_t Length(std::string_view s) { return Decode(s).size(); }

}  // namespace utf8

// A piece of text is either one special token or one code point.
struct Piece {
  bool special = false;
  TokenId special_id = 0;
  char32_t cp = 0;
};

// Splits text into special-token markup and single code points. Markup is
// matched greedily at every position so class tags never fall apart into
// characters.
inline std::vector<Piece> SplitPieces(std::u32string_view text) {
  static const std::array<std::u32string, kNumSpecialTokens> surfaces = [] {
    std::array<std::u32string, kNumSpecialTokens> out;
    for (int i = 0; i < kNumSpecialTokens; ++i) out[i] = utf8::Decode(kSpecialSurfaces[i]);
    return out;
  }();
  std::vector<Piece> pieces;
  pieces.reserve(text.size());
  size_t i = 0;
  while (i < text.size()) {
    int best = -1;
    size_t best_len = 0;
    if (text[i] == U'<' || text[i] == U'I' || text[i] == U'E') {
      for (int s = 0; s < kNumSpecialTokens; ++s) {
        const auto& surf = surfaces[s];
        if (surf.size() > best_len && text.substr(i, surf.size()) == surf) {
          best = s;
          best_len = surf.size();
        }
      }
    }
    if (best >= 0) {
      pieces.push_back({true, static_cast<TokenId>(best), 0});
      i += best_len;
    } else {
      pieces.push_back({false, 0, text[i]});
      ++i;
    }
  }
  return pieces;
}

// Character vocabulary with the special tokens at ids [0, 11).
class Vocab {
 public:
  Vocab() = default;

  explicit Vocab(std::vector<char32_t> chars) : chars_(std::move(chars)) {
    std::sort(chars_.begin(), chars_.end());
    chars_.erase(std::unique(chars_.begin(), chars_.end()), chars_.end());
    for (size_t i = 0; i < chars_.size(); ++i) {
      char_to_id_[chars_[i]] = static_cast<TokenId>(kNumSpecialTokens + i);
    }
  }

  int size() const { return kNumSpecialTokens + static_cast<int>(chars_.size()); }

  const std::vector<char32_t>& chars() const { return chars_; }

  bool Contains(char32_t cp) const { return char_to_id_.count(cp) != 0; }

  // Returns -1 when the code point is not in the vocabulary.
  TokenId CharId(char32_t cp) const {
    auto it = char_to_id_.find(cp);
    return it == char_to_id_.end() ? -1 : it->second;
  }

  bool IsSpecial(TokenId id) const { return id >= 0 && id < kNumSpecialTokens; }

  std::string Surface(TokenId id) const {
    if (id < 0 || id >= size()) {
      ThrowData("token id " + std::to_string(id) + " out of range [0, " +
                std::to_string(size()) + ")");
    }
    if (IsSpecial(id)) return std::string(kSpecialSurfaces[id]);
    std::string out;
    utf8::Append(out, chars_[id - kNumSpecialTokens]);
    return out;
  }

  nlohmann::ordered_json ToJson() const {
    nlohmann::ordered_json j;
    j["specials"] = nlohmann::ordered_json::array();
    for (auto s : kSpecialSurfaces) j["specials"].push_back(std::string(s));
    j["chars"] = nlohmann::ordered_json::array();
    for (char32_t cp : chars_) {
      std::string c;
      utf8::Append(c, cp);
      j["chars"].push_back(c);
    }
    return j;
  }

  static Vocab FromJson(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("specials") || !j.contains("chars")) {
      ThrowData("vocab JSON must have 'specials' and 'chars'");
    }
    const auto& specials = j.at("specials");
    if (!specials.is_array() || specials.size() != kNumSpecialTokens) {
      ThrowData("vocab JSON has an unexpected special-token list");
    }
    for (int i = 0; i < kNumSpecialTokens; ++i) {
      if (specials[i].get<std::string>() != kSpecialSurfaces[i]) {
        ThrowData("vocab JSON special token " + std::to_string(i) + " mismatch");
      }
    }
    std::vector<char32_t> chars;
    for (const auto& c : j.at("chars")) {
      auto cps = utf8::Decode(c.get<std::string>());
      if (cps.size() != 1) ThrowData("vocab char entry must be one code point");
      chars.push_back(cps[0]);
    }
    Vocab v(std::move(chars));
    if (v.chars().size() != j.at("chars").size()) ThrowData("duplicate vocab chars");
    return v;
  }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.chars_ == b.chars_; }

 private:
  std::vector<char32_t> chars_;
  std::unordered_map<char32_t, TokenId> char_to_id_;
};

// Collects every code point occurring outside special markup.
inline Vocab BuildVocab(const std::vector<std::string>& corpus_texts) {
  std::set<char32_t> chars;
  bool any_text = false;
  for (const auto& text : corpus_texts) {
    if (!text.empty()) any_text = true;
    for (const auto& p : SplitPieces(utf8::Decode(text))) {
      if (!p.special) chars.insert(p.cp);
    }
  }
  if (!any_text) ThrowData("empty corpus");
  return Vocab(std::vector<char32_t>(chars.begin(), chars.end()));
}

inline TokenIds Encode(std::string_view text, const Vocab& vocab) {
  TokenIds ids;
  size_t position = 0;
  for (const auto& p : SplitPieces(utf8::Decode(text))) {
    if (p.special) {
      ids.push_back(p.special_id);
      position += utf8::Length(kSpecialSurfaces[p.special_id]);
      continue;
    }
    TokenId id = vocab.CharId(p.cp);
    if (id < 0) {
      std::string c;
      utf8::Append(c, p.cp);
      ThrowData("unknown character '" + c + "' at position " + std::to_string(position));
    }
    ids.push_back(id);
    ++position;
  }
  return ids;
}

inline std::string Decode(const TokenIds& ids, const Vocab& vocab) {
  std::string out;
  for (TokenId id : ids) out += vocab.Surface(id);
  return out;
}

}  // namespace ctxbias
