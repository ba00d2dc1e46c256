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

#include "ibkt/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ibkt/error.hpp"

namespace ibkt::decode {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct Candidate {
  double logprob = 0.0;
  TokenIds ids;
};

// Higher score first, then shorter, then lexicographically smaller.
bool ranks_before(double sa, const TokenIds& a, double sb, const TokenIds& b) {
  if (sa != sb) return sa > sb;
  if (a.size() != b.size()) return a.size() < b.size();
  return a < b;
}

void apply_bans(std::vector<double>& row, const TokenIds& ids,
                const std::vector<TokenId>& banned, std::size_t n) {
  for (TokenId b : banned) {
    if (b >= 0 && static_cast<std::size_t>(b) < row.size()) row[b] = kNegInf;
  }
  if (n == 0 || ids.size() + 1 < n) return;
  const std::size_t ctx = n - 1;
  for (std::size_t i = 0; i + n <= ids.size(); ++i) {
    if (std::equal(ids.begin() + i, ids.begin() + i + ctx,
                   ids.end() - static_cast<std::ptrdiff_t>(ctx))) {
      row[ids[i + ctx]] = kNegInf;
    }
  }
}

bool all_banned(const std::vector<double>& row) {
  return std::none_of(row.begin(), row.end(),
                      [](double v) { return v != kNegInf && !std::isnan(v); });
}

}  // namespace

DecodeConfig DecodeConfig::nmt() { return DecodeConfig{}; }

DecodeConfig DecodeConfig::summarization() {
  DecodeConfig c;
  c.beam = 5;
  c.length_penalty = 1.2;
  c.no_repeat_ngram = 4;
  c.max_len = 64;
  return c;
}

void DecodeConfig::validate() const {
  if (beam == 0) throw Error("decode: beam size must be at least 1");
  if (max_len == 0) throw Error("decode: max_len must be at least 1");
  if (!std::isfinite(length_penalty)) {
    throw Error("decode: length penalty must be finite");
  }
}

TokenIds Hypothesis::tokens() const {
  TokenIds out = ids;
  if (!out.empty() && out.back() == subword::kEosId) out.pop_back();
  return out;
}

double normalized_score(const Hypothesis& h, double alpha) {
  const double len = static_cast<double>(std::max<std::size_t>(h.ids.size(), 1));
  return h.logprob_sum / std::pow(len, alpha);
}

const std::vector<TokenId>& StepModel::banned() const {
  static const std::vector<TokenId> kNone;
  return kNone;
}

std::vector<TokenId> banned_tokens(const subword::SubwordVocab& vocab) {
  std::vector<TokenId> out = {subword::kPadId, subword::kBosId,
                              subword::kMaskId};
  for (TokenId t : vocab.lang_tag_ids()) out.push_back(t);
  return out;
}

bool has_repeated_ngram(const TokenIds& ids, std::size_t n) {
  if (n == 0 || ids.size() < n) return false;
  std::vector<TokenIds> seen;
  for (std::size_t i = 0; i + n <= ids.size(); ++i) {
    seen.emplace_back(ids.begin() + i, ids.begin() + i + n);
  }
  std::sort(seen.begin(), seen.end());
  return std::adjacent_find(seen.begin(), seen.end()) != seen.end();
}

// ---------------------------------------------------------------------------

TransformerStepModel::TransformerStepModel(const model::Model& model,
                                           const TokenIds& source,
                                           TokenId start,
                                           std::vector<TokenId> banned)
    : model_(model), start_(start), banned_(std::move(banned)) {
  model::TokenMatrix src{1, source.size(), source};
  encoded_ = model_.encode(src, false, nullptr);
}

std::size_t TransformerStepModel::vocab_size() const {
  return model_.config().vocab;
}

const model::Model::Encoded& TransformerStepModel::memory_for(std::size_t n) {
  if (n == 1) return encoded_;
  auto it = replicated_.find(n);
  if (it != replicated_.end()) return it->second;
  auto repeat = [n](const model::Model::Tensor& t) {
    tensor::Shape shape = t.shape();
    shape[0] = n;
    std::vector<float> data;
    data.reserve(t.numel() * n);
    for (std::size_t i = 0; i < n; ++i) {
      data.insert(data.end(), t.values().begin(), t.values().end());
    }
    return model::Model::Tensor::from(std::move(shape), std::move(data));
  };
  return replicated_[n] = {repeat(encoded_.memory), repeat(encoded_.mask)};
}

std::vector<std::vector<double>> TransformerStepModel::next_logprobs(
    const std::vector<TokenIds>& prefixes) {
  const std::size_t n = prefixes.size();
  std::size_t longest = 0;
  for (const auto& p : prefixes) longest = std::max(longest, p.size());
  model::TokenMatrix tgt;
  tgt.rows = n;
  tgt.cols = longest + 1;
  tgt.ids.assign(n * tgt.cols, subword::kPadId);
  for (std::size_t r = 0; r < n; ++r) {
    tgt.ids[r * tgt.cols] = start_;
    std::copy(prefixes[r].begin(), prefixes[r].end(),
              tgt.ids.begin() + r * tgt.cols + 1);
  }
  const auto hidden = model_.decode_hidden(memory_for(n), tgt, false, nullptr);
  const std::size_t d = model_.config().d_model;
  std::vector<float> last(n * d);
  for (std::size_t r = 0; r < n; ++r) {
    const float* h = hidden.data() + (r * tgt.cols + prefixes[r].size()) * d;
    std::copy(h, h + d, last.begin() + r * d);
  }
  const auto logits = model_.project(model::Model::Tensor::from({n, d}, last));
  const std::size_t v = vocab_size();
  std::vector<std::vector<double>> out(n, std::vector<double>(v));
  for (std::size_t r = 0; r < n; ++r) {
    const float* row = logits.data() + r * v;
    double mx = kNegInf;
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, double(row[j]));
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(double(row[j]) - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < v; ++j) out[r][j] = double(row[j]) - lz;
  }
  return out;
}

// ---------------------------------------------------------------------------

Hypothesis greedy(StepModel& step, const DecodeConfig& cfg) {
  cfg.validate();
  Hypothesis h;
  for (std::size_t t = 0; t < cfg.max_len; ++t) {
    auto row = step.next_logprobs({h.ids}).front();
    const double eos_lp = row[step.eos()];
    apply_bans(row, h.ids, step.banned(), cfg.no_repeat_ngram);
    TokenId pick = step.eos();
    double best = h.logprob_sum + eos_lp;
    if (!all_banned(row)) {
      best = kNegInf;
      for (std::size_t v = 0; v < row.size(); ++v) {
        if (row[v] == kNegInf) continue;
        const double s = h.logprob_sum + row[v];
        if (best == kNegInf || s > best) {
          best = s;
          pick = static_cast<TokenId>(v);
        }
      }
    }
    h.ids.push_back(pick);
    h.logprob_sum = best;
    if (pick == step.eos()) break;
  }
  h.finished = true;
  return h;
}

BeamResult beam_search(StepModel& step, const DecodeConfig& cfg) {
  cfg.validate();
  const std::size_t k = cfg.beam;
  const TokenId eos = step.eos();
  std::vector<Hypothesis> live(1), pool;
  for (std::size_t t = 0; t < cfg.max_len && !live.empty(); ++t) {
    std::vector<TokenIds> prefixes;
    for (const auto& h : live) prefixes.push_back(h.ids);
    const auto rows = step.next_logprobs(prefixes);
    std::vector<Candidate> cands;
    for (std::size_t i = 0; i < live.size(); ++i) {
      auto row = rows[i];
      apply_bans(row, live[i].ids, step.banned(), cfg.no_repeat_ngram);
      if (all_banned(row)) {
        Candidate c{live[i].logprob_sum + rows[i][eos], live[i].ids};
        c.ids.push_back(eos);
        cands.push_back(std::move(c));
        continue;
      }
      for (std::size_t v = 0; v < row.size(); ++v) {
        if (row[v] == kNegInf) continue;
        Candidate c{live[i].logprob_sum + row[v], live[i].ids};
        c.ids.push_back(static_cast<TokenId>(v));
        cands.push_back(std::move(c));
      }
    }
    const std::size_t keep = std::min(cands.size(), 2 * k);
    std::partial_sort(cands.begin(), cands.begin() + keep, cands.end(),
                      [](const Candidate& a, const Candidate& b) {
                        return ranks_before(a.logprob, a.ids, b.logprob, b.ids);
                      });
    live.clear();
    const bool last_step = t + 1 == cfg.max_len;
    for (std::size_t r = 0; r < keep; ++r) {
      auto& c = cands[r];
      if (c.ids.back() == eos) {
        if (r < k) pool.push_back({std::move(c.ids), c.logprob, true});
      } else if (live.size() < k) {
        Hypothesis h{std::move(c.ids), c.logprob, last_step};
        (last_step ? pool : live).push_back(std::move(h));
      }
    }
    if (pool.size() >= k) break;
  }
  BeamResult out;
  if (pool.empty()) throw Error("beam search produced no hypothesis");
  const double alpha = cfg.length_penalty;
  out.best = *std::min_element(
      pool.begin(), pool.end(), [alpha](const Hypothesis& a, const Hypothesis& b) {
        return ranks_before(normalized_score(a, alpha), a.ids,
                            normalized_score(b, alpha), b.ids);
      });
  out.completed = std::move(pool);
  return out;
}

Hypothesis beam(StepModel& step, const DecodeConfig& cfg) {
  return beam_search(step, cfg).best;
}

// ---------------------------------------------------------------------------

TokenIds source_ids(const subword::SubwordVocab& vocab, std::string_view text,
                    const LangCode& lang, std::size_t max_len) {
  if (max_len < 2) throw Error("source_ids: max_len must be at least 2");
  TokenIds ids = vocab.encode(text);
  if (ids.size() + 2 > max_len) ids.resize(max_len - 2);
  ids.push_back(subword::kEosId);
  ids.push_back(vocab.lang_tag(lang));
  return ids;
}

std::vector<TokenIds> translate_ids(const model::Model& model,
                                    const subword::SubwordVocab& vocab,
                                    const std::vector<TokenIds>& sources,
                                    const DecodeConfig& cfg) {
  DecodeConfig c = cfg;
  c.max_len = std::min(c.max_len, model.config().max_positions - 1);
  const TokenId start = vocab.lang_tag(cfg.target_lang);
  const auto banned = banned_tokens(vocab);
  std::vector<TokenIds> out;
  out.reserve(sources.size());
  for (const auto& src : sources) {
    TransformerStepModel step(model, src, start, banned);
    out.push_back((c.beam == 1 ? greedy(step, c) : beam(step, c)).tokens());
  }
  return out;
}

std::vector<std::string> translate_lines(const model::Model& model,
                                         const subword::SubwordVocab& vocab,
                                         const std::vector<std::string>& lines,
                                         const LangCode& src_lang,
                                         const DecodeConfig& cfg) {
  std::vector<TokenIds> sources;
  sources.reserve(lines.size());
  for (const auto& l : lines) {
    sources.push_back(
        source_ids(vocab, l, src_lang, model.config().max_positions));
  }
  std::vector<std::string> out;
  for (const auto& ids : translate_ids(model, vocab, sources, cfg)) {
    out.push_back(vocab.decode(ids));
  }
  return out;
}

}  // namespace ibkt::decode
