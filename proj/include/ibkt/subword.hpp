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

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ibkt/translit.hpp"

namespace ibkt::subword {

// Word-initial whitespace meta symbol.
inline constexpr char32_t kMeta = 0x2581;
inline constexpr std::string_view kMetaUtf8 = "▁";
// Rendering of UNK by decode().
inline constexpr std::string_view kUnkGlyph = "⁇";

using TokenId = std::int32_t;
using TokenIds = std::vector<TokenId>;

// Fixed special-token layout; language tags follow in registry order.
inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnkId = 1;
inline constexpr TokenId kBosId = 2;
inline constexpr TokenId kEosId = 3;
inline constexpr TokenId kMaskId = 4;
inline constexpr std::size_t kNumFixedSpecials = 5;

std::string lang_tag_piece(const LangCode& lang);

struct Piece {
  std::string text;
  double logprob = 0.0;
};

struct Segmentation {
  TokenIds ids;
  double logprob = 0.0;      // sum over non-UNK pieces
  std::size_t unk_chars = 0;  // code points covered by UNK
};

// Splits on whitespace and prefixes every word with the meta symbol.
std::vector<std::u32string> pretokenize(std::string_view text);

class SubwordVocab {
 public:
  SubwordVocab() = default;
  // `pieces` excludes specials; ids are assigned after the specials.
  SubwordVocab(std::vector<LangCode> tags, std::vector<Piece> pieces);

  static SubwordVocab parse(std::string_view text);
  static SubwordVocab load(const std::filesystem::path& path);
  std::string serialize() const;
  void save(const std::filesystem::path& path) const;
  // SHA-256 of serialize().
  std::string hash() const;

  std::size_t size() const { return entries_.size(); }
  std::size_t num_specials() const { return kNumFixedSpecials + tags_.size(); }
  const std::vector<LangCode>& tags() const { return tags_; }
  const std::string& piece(TokenId id) const;
  double logprob(TokenId id) const;
  bool is_special(TokenId id) const {
    return id >= 0 && static_cast<std::size_t>(id) < num_specials();
  }
  std::optional<TokenId> find(std::string_view piece) const;
  // Throws when the language has no tag in this vocabulary.
  TokenId lang_tag(const LangCode& lang) const;
  std::vector<TokenId> lang_tag_ids() const;

  // Max-logprob segmentation (Viterbi); ties prefer fewer pieces, then the
  // lexicographically smaller id sequence. Uncoverable runs become one UNK.
  Segmentation segment(std::string_view text) const;
  TokenIds encode(std::string_view text) const { return segment(text).ids; }
  std::string decode(std::span<const TokenId> ids) const;

  // Viterbi over one pretokenized word, optionally forbidding one piece.
  Segmentation segment_word(std::u32string_view word,
                            std::optional<TokenId> excluded = {}) const;

 private:
  void index();

  std::vector<LangCode> tags_;
  std::vector<Piece> entries_;  // specials first
  std::unordered_map<std::u32string, TokenId> lookup_;
  std::unordered_set<char32_t> piece_chars_;
  std::size_t max_piece_chars_ = 0;
};

struct TrainerSpec {
  std::size_t target_size = 512;  // including specials
  std::size_t seed_size = 100000;
  std::size_t max_piece_len = 16;
  std::size_t em_rounds = 2;
  double prune_fraction = 0.25;
  double char_coverage = 0.9995;

  void validate() const;
};

struct LangCorpus {
  LangCode lang;
  std::vector<std::string> lines;
};

// min(per_lang, available) lines per language, sampled without replacement.
std::vector<std::string> sample_training_corpus(
    const std::vector<LangCorpus>& corpora, std::size_t per_lang,
    std::uint64_t seed);

SubwordVocab train_unigram(const std::vector<std::string>& lines,
                           const TrainerSpec& spec,
                           const std::vector<LangCode>& tags);

}  // namespace ibkt::subword
