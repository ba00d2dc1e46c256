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
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "ibkt/model.hpp"
#include "ibkt/subword.hpp"
#include "ibkt/translit.hpp"

namespace ibkt::decode {

using subword::TokenId;
using subword::TokenIds;

struct DecodeConfig {
  std::size_t beam = 4;
  double length_penalty = 0.8;
  std::size_t no_repeat_ngram = 0;  // 0 = off
  std::size_t max_len = 128;        // generated tokens, EOS included
  LangCode target_lang;

  static DecodeConfig nmt();            // k=4, alpha=0.8
  static DecodeConfig summarization();  // k=5, alpha=1.2, n=4, max_len 64
  void validate() const;
};

struct Hypothesis {
  TokenIds ids;  // generated tokens, without the language tag
  double logprob_sum = 0.0;
  bool finished = false;

  // ids without a trailing EOS
  TokenIds tokens() const;
};

// logprob_sum / |Y|^alpha, |Y| counting EOS.
double normalized_score(const Hypothesis& h, double alpha);

// Next-token distributions for a set of generated prefixes.
class StepModel {
 public:
  virtual ~StepModel() = default;
  virtual std::size_t vocab_size() const = 0;
  // One row of log-probabilities per prefix.
  virtual std::vector<std::vector<double>> next_logprobs(
      const std::vector<TokenIds>& prefixes) = 0;
  virtual TokenId eos() const { return subword::kEosId; }
  // Never emitted.
  virtual const std::vector<TokenId>& banned() const;
};

// PAD, BOS, MASK and all language tags.
std::vector<TokenId> banned_tokens(const subword::SubwordVocab& vocab);

// Conditions a trained model on one encoded source; the decoder input
// starts with `start` (the target language tag).
class TransformerStepModel : public StepModel {
 public:
  TransformerStepModel(const model::Model& model, const TokenIds& source,
                       TokenId start, std::vector<TokenId> banned);

  std::size_t vocab_size() const override;
  std::vector<std::vector<double>> next_logprobs(
      const std::vector<TokenIds>& prefixes) override;
  const std::vector<TokenId>& banned() const override { return banned_; }

 private:
  const model::Model::Encoded& memory_for(std::size_t n);

  const model::Model& model_;
  TokenId start_;
  std::vector<TokenId> banned_;
  model::Model::Encoded encoded_;
  std::map<std::size_t, model::Model::Encoded> replicated_;
};

Hypothesis greedy(StepModel& step, const DecodeConfig& cfg);

struct BeamResult {
  Hypothesis best;
  std::vector<Hypothesis> completed;  // the finished pool
};

BeamResult beam_search(StepModel& step, const DecodeConfig& cfg);
Hypothesis beam(StepModel& step, const DecodeConfig& cfg);

// True when some n-gram occurs twice in ids.
bool has_repeated_ngram(const TokenIds& ids, std::size_t n);

// encode(text) + [EOS, source tag], cut to max_len tokens (the tail pair is
// kept).
TokenIds source_ids(const subword::SubwordVocab& vocab, std::string_view text,
                    const LangCode& lang, std::size_t max_len);

// Decodes each source independently; cfg.beam == 1 uses greedy. Source ids
// are encoder inputs (text + EOS + source tag).
std::vector<TokenIds> translate_ids(const model::Model& model,
                                    const subword::SubwordVocab& vocab,
                                    const std::vector<TokenIds>& sources,
                                    const DecodeConfig& cfg);

// Text in, text out; both sides are already in the model's script.
std::vector<std::string> translate_lines(const model::Model& model,
                                         const subword::SubwordVocab& vocab,
                                         const std::vector<std::string>& lines,
                                         const LangCode& src_lang,
                                         const DecodeConfig& cfg);

}  // namespace ibkt::decode
