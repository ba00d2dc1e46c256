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

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ibkt::metrics {

// mteval-v13a tokenization as done by sacreBLEU; case is preserved.
std::vector<std::string> tokenize_13a(std::string_view text);

struct BleuReport {
  double score = 0.0;                    // 0..100
  std::array<double, 4> precisions{};    // 0..1, smoothed
  double brevity_penalty = 0.0;
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;
  std::array<std::size_t, 4> matches{};  // clipped
  std::array<std::size_t, 4> totals{};

  // bleu p1 p2 p3 p4 bp hyp_len ref_len
  std::string tsv() const;
  static std::string tsv_header();
};

// Corpus BLEU over 13a tokens, one reference per line, exponential
// smoothing of zero-match orders.
BleuReport bleu(const std::vector<std::string>& hyps,
                const std::vector<std::string>& refs);

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct RougeReport {
  Prf r1, r2, rl;

  // r1_p r1_r r1_f r2_p r2_r r2_f rl_p rl_r rl_f
  std::string tsv() const;
  static std::string tsv_header();
};

// Whitespace tokens with punctuation stripped from both edges; tokens that
// are pure punctuation vanish.
std::vector<std::string> rouge_tokenize(std::string_view text);

std::size_t lcs_length(std::span<const std::string> a,
                       std::span<const std::string> b);

Prf prf(double overlap, double hyp_count, double ref_count);
Prf rouge_n(std::span<const std::string> hyp, std::span<const std::string> ref,
            std::size_t n);
Prf rouge_l(std::span<const std::string> hyp, std::span<const std::string> ref);

// Mean of per-line scores. Callers wanting a common script transliterate
// both sides first.
RougeReport rouge(const std::vector<std::string>& hyps,
                  const std::vector<std::string>& refs);

}  // namespace ibkt::metrics
