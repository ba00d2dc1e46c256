// Copyright 2026 The ibkt Authors.
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

#include <compare>
#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ibkt {

// Two-letter lowercase language identifier. Construction validates the
// format only; membership is checked by LanguageRegistry::parse.
class LangCode {
 public:
  LangCode() = default;
  explicit LangCode(std::string_view code);

  const std::string& str() const { return code_; }
  bool empty() const { return code_.empty(); }

  auto operator<=>(const LangCode&) const = default;

 private:
  std::string code_;
};

}  // namespace ibkt

template <>
struct std::hash<ibkt::LangCode> {
  std::size_t operator()(const ibkt::LangCode& c) const noexcept {
    return std::hash<std::string>{}(c.str());
  }
};

namespace ibkt::translit {

inline constexpr char32_t kDevanagariBase = 0x0900;
inline constexpr int kBlockSpan = 128;

// A source code point that does not follow offset arithmetic. A target
// equal to {source} means the code point passes through unchanged.
struct ExceptionEntry {
  char32_t source = 0;
  std::u32string target;
};

enum class BlockKind {
  kNone,          // no Indic block (English)
  kIdentity,      // Devanagari-native (hi, mr, ne)
  kOffset,        // ISCII-aligned block, offset arithmetic plus exceptions
  kPairTable,     // explicit pair table (Sinhala)
};

struct ScriptBlock {
  LangCode lang;
  BlockKind kind = BlockKind::kNone;
  char32_t base = 0;
  int span = 0;
  std::vector<ExceptionEntry> exceptions;
};

struct TranslitReport {
  std::size_t chars_total = 0;
  std::size_t chars_mapped = 0;
  std::size_t chars_passed_through = 0;
  std::map<char32_t, std::size_t> passthrough_inventory;

  void merge(const TranslitReport& other);
};

struct TranslitResult {
  std::string text;
  TranslitReport report;
};

struct RoundTripResult {
  double fraction = 1.0;
  std::vector<std::size_t> failing_lines;
};

// Parses `U+XXXX<TAB>U+YYYY[ U+ZZZZ...]` lines; '#' starts a comment.
std::vector<ExceptionEntry> parse_pair_table(std::string_view tsv);
std::vector<ExceptionEntry> load_pair_table(const std::filesystem::path& path);

// Directory holding the shipped Sinhala pair table.
std::filesystem::path default_data_dir();

// Supported languages with their script blocks. Immutable once built; all
// member functions are safe to call concurrently.
class LanguageRegistry {
 public:
  // as, bn, en, gu, hi, kn, ml, mr, or, pa, ta, te.
  static LanguageRegistry standard();
  // standard() plus ne (Devanagari) and si (pair table from `data_dir`).
  static LanguageRegistry extended(
      const std::filesystem::path& data_dir = default_data_dir());

  explicit LanguageRegistry(std::vector<ScriptBlock> blocks);

  const std::vector<LangCode>& languages() const { return order_; }
  bool contains(const LangCode& lang) const;
  // Throws Error naming the code when it is not registered.
  LangCode parse(std::string_view code) const;
  const ScriptBlock& block(const LangCode& lang) const;
  // Index in registry order; used for language tag ids.
  std::size_t index_of(const LangCode& lang) const;
  bool is_indic(const LangCode& lang) const;

  TranslitResult to_devanagari(std::string_view text,
                               const LangCode& src) const;
  TranslitResult from_devanagari(std::string_view text,
                                 const LangCode& tgt) const;
  RoundTripResult round_trip_check(const std::vector<std::string>& lines,
                                   const LangCode& lang) const;

  // Source code points that map 1:1 (the reversible subset).
  std::vector<char32_t> mapped_code_points(const LangCode& lang) const;

 private:
  struct Tables {
    ScriptBlock block;
    std::unordered_map<char32_t, std::u32string> to_deva;
    std::unordered_map<char32_t, char32_t> from_deva;
  };

  const Tables& tables(const LangCode& lang) const;
  static Tables build(ScriptBlock block);

  std::vector<LangCode> order_;
  std::unordered_map<LangCode, Tables> tables_;
};

}  // namespace ibkt::translit
