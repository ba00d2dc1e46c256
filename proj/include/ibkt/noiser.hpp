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
#include <string>
#include <string_view>
#include <vector>

#include "ibkt/rng.hpp"
#include "ibkt/subword.hpp"
#include "ibkt/translit.hpp"

namespace ibkt::noiser {

inline constexpr std::string_view kMaskWord = "<mask>";

struct NoiserConfig {
  double mask_fraction = 0.35;
  double poisson_lambda = 3.5;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Span {
  std::size_t start = 0;
  std::size_t length = 0;
};

struct NoisedPair {
  std::vector<std::string> source_words;  // MASK sentinels as kMaskWord
  std::vector<bool> is_mask;              // parallel to source_words
  std::vector<std::string> target_words;
  std::size_t masked_count = 0;
  std::vector<Span> spans;  // in target coordinates, in draw order
};

std::vector<std::string> split_words(std::string_view sentence);

// Span masking: round(p*n) words are covered by non-overlapping spans with
// Poisson lengths, each span replaced by one sentinel.
NoisedPair noise(const std::vector<std::string>& words, const NoiserConfig& cfg,
                 Rng& rng);

struct DenoisingExample {
  subword::TokenIds encoder;        // encode(noised) + [EOS, tag]
  subword::TokenIds decoder_input;  // [tag] + encode(original)
  subword::TokenIds labels;         // encode(original) + [EOS]
};

DenoisingExample make_denoising_example(std::string_view sentence,
                                        const LangCode& lang,
                                        const NoiserConfig& cfg,
                                        const subword::SubwordVocab& vocab,
                                        Rng& rng);

// Encodes a word sequence, emitting MASK ids where is_mask is set.
subword::TokenIds encode_words(const subword::SubwordVocab& vocab,
                               const std::vector<std::string>& words,
                               const std::vector<bool>& is_mask);

}  // namespace ibkt::noiser
