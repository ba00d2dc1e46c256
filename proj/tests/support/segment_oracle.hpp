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

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ibkt/subword.hpp"
#include "ibkt/utf8.hpp"

namespace ibkt::oracle {

using subword::Piece;
using subword::SubwordVocab;
using subword::TokenId;
using subword::TokenIds;

// Brute-force oracle: enumerate every segmentation of `word` into pieces and
// keep the best by (logprob desc, piece count asc, ids lexicographic asc).
struct Best {
  bool found = false;
  double logprob = 0.0;
  TokenIds ids;
};

inline Best brute_force(const SubwordVocab& v, const std::u32string& word) {
  std::vector<std::pair<std::u32string, TokenId>> pieces;
  for (std::size_t id = v.num_specials(); id < v.size(); ++id) {
    pieces.emplace_back(utf8::decode(v.piece(static_cast<TokenId>(id))),
                        static_cast<TokenId>(id));
  }
  Best best;
  TokenIds cur;
  std::function<void(std::size_t, double)> rec = [&](std::size_t pos,
                                                     double lp) {
    if (pos == word.size()) {
      bool better = !best.found || lp > best.logprob ||
                    (lp == best.logprob && (cur.size() < best.ids.size() ||
                                            (cur.size() == best.ids.size() &&
                                             cur < best.ids)));
      if (better) best = {true, lp, cur};
      return;
    }
    for (const auto& [text, id] : pieces) {
      if (word.compare(pos, text.size(), text) == 0) {
        cur.push_back(id);
        rec(pos + text.size(), lp + v.logprob(id));
        cur.pop_back();
      }
    }
  };
  rec(0, 0.0);
  return best;
}

// 30 pieces over {▁, a, b, c}; integer logprobs make exact ties common.
inline SubwordVocab toy_segment_vocab(bool integer_scores, std::uint64_t seed) {
  const std::vector<std::string> texts = {
      "▁", "a", "b", "c", "▁a", "▁b", "▁c", "ab", "ba", "bc",
      "ca", "cc", "aa", "▁ab", "▁ba", "abc", "bca", "cab", "aab", "bba",
      "▁abc", "▁cab", "ccc", "acb", "bac", "abab", "cabc", "▁aa", "bb", "ac"};
  std::mt19937_64 rng(seed);
  std::vector<Piece> pieces;
  double total = 0.0;
  std::vector<double> weights;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    weights.push_back(std::uniform_real_distribution<double>(0.05, 1.0)(rng));
    total += weights.back();
  }
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const double lp =
        integer_scores
            ? -static_cast<double>(
                  std::uniform_int_distribution<int>(1, 4)(rng))
            : std::log(weights[i] / total);
    pieces.push_back({texts[i], lp});
  }
  return SubwordVocab({LangCode("bn"), LangCode("hi")}, std::move(pieces));
}

}  // namespace ibkt::oracle
