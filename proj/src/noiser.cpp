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

#include "ibkt/noiser.hpp"

#include <cmath>
#include <random>

#include "ibkt/error.hpp"
#include "ibkt/utf8.hpp"

namespace ibkt::noiser {

void NoiserConfig::validate() const {
  if (!(mask_fraction >= 0.0 && mask_fraction <= 1.0)) {
    throw Error("noiser: mask_fraction must lie in [0, 1]");
  }
  if (!(poisson_lambda > 0.0) || !std::isfinite(poisson_lambda)) {
    throw Error("noiser: poisson_lambda must be positive");
  }
}

std::vector<std::string> split_words(std::string_view sentence) {
  std::vector<std::string> words;
  std::string current;
  for (char32_t cp : utf8::decode(sentence)) {
    if (utf8::is_space(cp)) {
      if (!current.empty()) words.push_back(std::move(current));
      current.clear();
    } else {
      utf8::append(current, cp);
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

NoisedPair noise(const std::vector<std::string>& words, const NoiserConfig& cfg,
                 Rng& rng) {
  cfg.validate();
  const std::size_t n = words.size();
  NoisedPair out;
  out.target_words = words;
  const auto budget = static_cast<std::size_t>(
      std::llround(cfg.mask_fraction * static_cast<double>(n)));

  std::vector<bool> covered(n, false);
  std::poisson_distribution<long> poisson(cfg.poisson_lambda);
  std::vector<std::size_t> starts;
  std::size_t remaining = budget;
  while (remaining > 0) {
    long draw = 0;
    while (draw == 0) draw = poisson(rng);
    std::size_t len = std::min(static_cast<std::size_t>(draw), remaining);
    for (;; --len) {
      starts.clear();
      std::size_t run = 0;  // uncovered words ending at i
      for (std::size_t i = 0; i < n; ++i) {
        run = covered[i] ? 0 : run + 1;
        if (run >= len) starts.push_back(i + 1 - len);
      }
      if (!starts.empty()) break;
    }
    const std::size_t start = starts[uniform_index(rng, starts.size())];
    for (std::size_t i = start; i < start + len; ++i) covered[i] = true;
    out.spans.push_back({start, len});
    remaining -= len;
  }

  std::vector<bool> span_start(n, false);
  for (const auto& s : out.spans) span_start[s.start] = true;
  for (std::size_t i = 0; i < n; ++i) {
    if (!covered[i]) {
      out.source_words.push_back(words[i]);
      out.is_mask.push_back(false);
    } else if (span_start[i]) {
      out.source_words.emplace_back(kMaskWord);
      out.is_mask.push_back(true);
    }
  }
  out.masked_count = budget;
  return out;
}

subword::TokenIds encode_words(const subword::SubwordVocab& vocab,
                               const std::vector<std::string>& words,
                               const std::vector<bool>& is_mask) {
  subword::TokenIds ids;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i < is_mask.size() && is_mask[i]) {
      ids.push_back(subword::kMaskId);
    } else {
      const auto piece_ids = vocab.encode(words[i]);
      ids.insert(ids.end(), piece_ids.begin(), piece_ids.end());
    }
  }
  return ids;
}

DenoisingExample make_denoising_example(std::string_view sentence,
                                        const LangCode& lang,
                                        const NoiserConfig& cfg,
                                        const subword::SubwordVocab& vocab,
                                        Rng& rng) {
  const subword::TokenId tag = vocab.lang_tag(lang);
  const auto words = split_words(sentence);
  const NoisedPair pair = noise(words, cfg, rng);

  DenoisingExample ex;
  ex.encoder = encode_words(vocab, pair.source_words, pair.is_mask);
  ex.encoder.push_back(subword::kEosId);
  ex.encoder.push_back(tag);
  const subword::TokenIds original = encode_words(vocab, words, {});
  ex.decoder_input.push_back(tag);
  ex.decoder_input.insert(ex.decoder_input.end(), original.begin(),
                          original.end());
  ex.labels = original;
  ex.labels.push_back(subword::kEosId);
  return ex;
}

}  // namespace ibkt::noiser
