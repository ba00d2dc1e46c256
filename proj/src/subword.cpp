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

#include "ibkt/subword.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "ibkt/error.hpp"
#include "ibkt/hash.hpp"
#include "ibkt/rng.hpp"
#include "ibkt/utf8.hpp"

namespace ibkt::subword {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr std::string_view kHeaderPrefix = "#unigram v1 size=";
constexpr std::array<std::string_view, kNumFixedSpecials> kFixedSpecials = {
    "<pad>", "<unk>", "<s>", "</s>", "<mask>"};

// Character trie over pieces; children live in one flat hash map keyed by
// (node, code point).
class PieceTrie {
 public:
  void insert(std::u32string_view text, TokenId id) {
    std::uint32_t node = 0;
    for (char32_t c : text) {
      const std::uint64_t key = edge_key(node, c);
      auto it = children_.find(key);
      if (it == children_.end()) {
        const auto next = static_cast<std::uint32_t>(values_.size());
        values_.push_back(-1);
        children_.emplace(key, next);
        node = next;
      } else {
        node = it->second;
      }
    }
    values_[node] = id;
  }

  // Calls fn(end, id) for each piece that matches text[start..end).
  template <class Fn>
  void match_prefixes(std::u32string_view text, std::size_t start,
                      Fn&& fn) const {
    std::uint32_t node = 0;
    for (std::size_t i = start; i < text.size(); ++i) {
      auto it = children_.find(edge_key(node, text[i]));
      if (it == children_.end()) return;
      node = it->second;
      if (values_[node] >= 0) fn(i + 1, values_[node]);
    }
  }

 private:
  static std::uint64_t edge_key(std::uint32_t node, char32_t c) {
    return (static_cast<std::uint64_t>(node) << 21) | c;
  }

  std::unordered_map<std::uint64_t, std::uint32_t> children_;
  std::vector<TokenId> values_ = {-1};
};

bool is_tag_piece(std::string_view s) {
  return s.size() == 5 && s[0] == '<' && s[1] == '2' && s[4] == '>' &&
         s[2] >= 'a' && s[2] <= 'z' && s[3] >= 'a' && s[3] <= 'z';
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double hi = std::max(a, b);
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

}  // namespace

std::string lang_tag_piece(const LangCode& lang) {
  return "<2" + lang.str() + ">";
}

std::vector<std::u32string> pretokenize(std::string_view text) {
  std::vector<std::u32string> words;
  std::u32string current;
  for (char32_t cp : utf8::decode(text)) {
    if (utf8::is_space(cp)) {
      if (!current.empty()) words.push_back(std::move(current));
      current.clear();
    } else {
      if (current.empty()) current.push_back(kMeta);
      current.push_back(cp);
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

// ---------------------------------------------------------------------------
// SubwordVocab

SubwordVocab::SubwordVocab(std::vector<LangCode> tags,
                           std::vector<Piece> pieces)
    : tags_(std::move(tags)) {
  entries_.reserve(kNumFixedSpecials + tags_.size() + pieces.size());
  for (auto name : kFixedSpecials) entries_.push_back({std::string(name), 0.0});
  for (const auto& t : tags_) entries_.push_back({lang_tag_piece(t), 0.0});
  for (auto& p : pieces) entries_.push_back(std::move(p));
  index();
}

void SubwordVocab::index() {
  lookup_.clear();
  piece_chars_.clear();
  max_piece_chars_ = 0;
  std::unordered_set<std::string> seen;
  for (std::size_t id = 0; id < entries_.size(); ++id) {
    const auto& e = entries_[id];
    if (!seen.insert(e.text).second) {
      throw FormatError("duplicate vocabulary piece '" + e.text + "'");
    }
    if (id < num_specials()) continue;
    if (e.text.empty()) throw FormatError("empty vocabulary piece");
    if (!std::isfinite(e.logprob)) {
      throw FormatError("piece '" + e.text + "' has non-finite logprob");
    }
    const std::u32string text = utf8::decode(e.text);
    if (std::find(text.begin() + 1, text.end(), kMeta) != text.end()) {
      throw FormatError("piece '" + e.text +
                        "' contains the meta symbol after its first character");
    }
    lookup_.emplace(text, static_cast<TokenId>(id));
    piece_chars_.insert(text.begin(), text.end());
    max_piece_chars_ = std::max(max_piece_chars_, text.size());
  }
}

const std::string& SubwordVocab::piece(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= entries_.size()) {
    throw Error("token id " + std::to_string(id) + " out of range (V=" +
                std::to_string(entries_.size()) + ")");
  }
  return entries_[id].text;
}

double SubwordVocab::logprob(TokenId id) const {
  piece(id);
  return entries_[id].logprob;
}

std::optional<TokenId> SubwordVocab::find(std::string_view piece) const {
  for (std::size_t id = 0; id < num_specials(); ++id) {
    if (entries_[id].text == piece) return static_cast<TokenId>(id);
  }
  auto it = lookup_.find(utf8::decode(piece));
  if (it == lookup_.end()) return std::nullopt;
  return it->second;
}

TokenId SubwordVocab::lang_tag(const LangCode& lang) const {
  auto it = std::find(tags_.begin(), tags_.end(), lang);
  if (it == tags_.end()) {
    throw Error("vocabulary has no language tag for '" + lang.str() + "'");
  }
  return static_cast<TokenId>(kNumFixedSpecials + (it - tags_.begin()));
}

std::vector<TokenId> SubwordVocab::lang_tag_ids() const {
  std::vector<TokenId> ids(tags_.size());
  std::iota(ids.begin(), ids.end(), static_cast<TokenId>(kNumFixedSpecials));
  return ids;
}

Segmentation SubwordVocab::segment_word(std::u32string_view word,
                                        std::optional<TokenId> excluded) const {
  struct Cell {
    std::size_t unk = std::numeric_limits<std::size_t>::max();
    double score = kNegInf;
    std::size_t count = 0;
    std::size_t prev = 0;
    TokenId id = -1;
  };
  const std::size_t n = word.size();
  std::vector<Cell> best(n + 1);
  best[0] = Cell{0, 0.0, 0, 0, -1};

  auto sequence = [&](std::size_t end) {
    TokenIds ids;
    while (end > 0) {
      ids.push_back(best[end].id);
      end = best[end].prev;
    }
    std::reverse(ids.begin(), ids.end());
    return ids;
  };
  auto relax = [&](std::size_t start, std::size_t end, TokenId id,
                   double lp, bool unk) {
    const Cell& from = best[start];
    Cell cand{from.unk + (unk ? end - start : 0), from.score + lp,
              from.count + 1, start, id};
    Cell& cur = best[end];
    bool better = false;
    if (cur.id < 0) {
      better = true;
    } else if (cand.unk != cur.unk) {
      better = cand.unk < cur.unk;
    } else if (cand.score != cur.score) {
      better = cand.score > cur.score;
    } else if (cand.count != cur.count) {
      better = cand.count < cur.count;
    } else {
      TokenIds a = sequence(start);
      a.push_back(id);
      better = a < sequence(end);
    }
    if (better) cur = cand;
  };

  for (std::size_t start = 0; start < n; ++start) {
    if (best[start].id < 0 && start != 0) continue;
    const std::size_t limit = std::min(n, start + max_piece_chars_);
    for (std::size_t end = start + 1; end <= limit; ++end) {
      auto it = lookup_.find(std::u32string(word.substr(start, end - start)));
      if (it == lookup_.end() || (excluded && it->second == *excluded)) {
        continue;
      }
      relax(start, end, it->second, entries_[it->second].logprob, false);
    }
    // The unk count ranks this below any piece cover of the same span.
    relax(start, start + 1, kUnkId, 0.0, true);
  }

  Segmentation seg;
  seg.unk_chars = best[n].unk;
  seg.logprob = best[n].score;
  for (TokenId id : sequence(n)) {
    if (id == kUnkId && !seg.ids.empty() && seg.ids.back() == kUnkId) continue;
    seg.ids.push_back(id);
  }
  return seg;
}

Segmentation SubwordVocab::segment(std::string_view text) const {
  Segmentation out;
  for (const auto& word : pretokenize(text)) {
    Segmentation w = segment_word(word);
    out.logprob += w.logprob;
    out.unk_chars += w.unk_chars;
    out.ids.insert(out.ids.end(), w.ids.begin(), w.ids.end());
  }
  return out;
}

std::string SubwordVocab::decode(std::span<const TokenId> ids) const {
  std::string joined;
  for (TokenId id : ids) {
    const std::string& p = piece(id);
    if (id == kUnkId) {
      joined += kUnkGlyph;
    } else if (!is_special(id)) {
      joined += p;
    }
  }
  std::string out;
  out.reserve(joined.size());
  std::size_t pos = 0;
  while (pos < joined.size()) {
    if (joined.compare(pos, kMetaUtf8.size(), kMetaUtf8) == 0) {
      out.push_back(' ');
      pos += kMetaUtf8.size();
    } else {
      out.push_back(joined[pos++]);
    }
  }
  const std::size_t first = out.find_first_not_of(' ');
  return first == std::string::npos ? std::string() : out.substr(first);
}

std::string SubwordVocab::serialize() const {
  std::string out;
  out += kHeaderPrefix;
  out += std::to_string(entries_.size());
  out += '\n';
  for (const auto& e : entries_) {
    out += e.text;
    out += '\t';
    out += format_double(e.logprob);
    out += '\n';
  }
  return out;
}

SubwordVocab SubwordVocab::parse(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line.rfind(kHeaderPrefix, 0) != 0) {
    throw FormatError("vocab: missing '#unigram v1 size=<V>' header");
  }
  const std::size_t declared =
      std::stoul(line.substr(kHeaderPrefix.size()));
  std::vector<Piece> all;
  while (std::getline(in, line)) {
    const std::size_t tab = line.rfind('\t');
    if (tab == std::string::npos) {
      throw FormatError("vocab: line " + std::to_string(all.size() + 2) +
                        " lacks a tab");
    }
    Piece p;
    p.text = line.substr(0, tab);
    const std::string num = line.substr(tab + 1);
    auto [ptr, ec] =
        std::from_chars(num.data(), num.data() + num.size(), p.logprob);
    if (ec != std::errc() || ptr != num.data() + num.size()) {
      throw FormatError("vocab: bad logprob '" + num + "'");
    }
    all.push_back(std::move(p));
  }
  if (all.size() != declared) {
    throw FormatError("vocab: header declares " + std::to_string(declared) +
                      " entries, file has " + std::to_string(all.size()));
  }
  if (all.size() < kNumFixedSpecials) {
    throw FormatError("vocab: missing special tokens");
  }
  for (std::size_t i = 0; i < kNumFixedSpecials; ++i) {
    if (all[i].text != kFixedSpecials[i]) {
      throw FormatError("vocab: expected special '" +
                        std::string(kFixedSpecials[i]) + "' at id " +
                        std::to_string(i));
    }
  }
  std::vector<LangCode> tags;
  std::size_t i = kNumFixedSpecials;
  for (; i < all.size() && is_tag_piece(all[i].text); ++i) {
    tags.emplace_back(all[i].text.substr(2, 2));
  }
  std::vector<Piece> pieces(std::make_move_iterator(all.begin() + i),
                            std::make_move_iterator(all.end()));
  return SubwordVocab(std::move(tags), std::move(pieces));
}

SubwordVocab SubwordVocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open vocab " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void SubwordVocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write vocab " + path.string());
  out << serialize();
}

std::string SubwordVocab::hash() const { return sha256_hex(serialize()); }

// ---------------------------------------------------------------------------
// Training

void TrainerSpec::validate() const {
  if (target_size == 0) throw Error("trainer: target_size must be positive");
  if (max_piece_len == 0) throw Error("trainer: max_piece_len must be >= 1");
  if (!(prune_fraction > 0.0 && prune_fraction < 1.0)) {
    throw Error("trainer: prune_fraction must lie in (0, 1)");
  }
  if (!(char_coverage > 0.0 && char_coverage <= 1.0)) {
    throw Error("trainer: char_coverage must lie in (0, 1]");
  }
}

std::vector<std::string> sample_training_corpus(
    const std::vector<LangCorpus>& corpora, std::size_t per_lang,
    std::uint64_t seed) {
  if (per_lang == 0) throw Error("sample_training_corpus: per_lang must be >= 1");
  std::vector<std::string> merged;
  for (std::size_t li = 0; li < corpora.size(); ++li) {
    const auto& c = corpora[li];
    if (c.lines.empty()) {
      spdlog::warn("corpus for '{}' is empty; it contributes no lines",
                   c.lang.str());
      continue;
    }
    const std::size_t k = std::min(per_lang, c.lines.size());
    std::vector<std::size_t> idx(c.lines.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng = derive_rng({seed, 0x5a3b1e00u, li});
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + uniform_index(rng, idx.size() - i);
      std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    for (std::size_t i : idx) merged.push_back(c.lines[i]);
  }
  return merged;
}

namespace {

struct Candidate {
  std::u32string text;
  double logprob = 0.0;
  bool required = false;
};

struct Run {
  std::u32string text;
  double freq = 0.0;
};

// Unigram EM / pruning state over a fixed list of runs (maximal stretches of
// covered characters inside pretokenized words).
class UnigramTrainer {
 public:
  UnigramTrainer(std::vector<Run> runs, std::vector<Candidate> pieces,
                 std::size_t em_rounds, std::size_t max_piece_len)
      : runs_(std::move(runs)),
        pieces_(std::move(pieces)),
        em_rounds_(em_rounds),
        max_piece_len_(max_piece_len) {}

  std::vector<Candidate>& pieces() { return pieces_; }

  void run_em(std::size_t min_size) {
    for (std::size_t round = 0; round < em_rounds_; ++round) {
      const std::vector<double> expected = expected_counts();
      m_step(expected, min_size);
    }
  }

  void prune(std::size_t new_size) {
    rebuild_trie();
    const std::size_t n = pieces_.size();
    std::vector<double> vfreq(n, 0.0);
    std::vector<double> inverted(n, 0.0);
    for (const auto& run : runs_) {
      for (std::size_t id : viterbi(run.text, n)) {
        vfreq[id] += run.freq;
        inverted[id] += run.freq;
      }
    }
    const double sum = std::accumulate(vfreq.begin(), vfreq.end(), 0.0);
    const double logsum = std::log(sum);

    std::vector<std::pair<double, std::size_t>> scored;
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < n; ++i) {
      if (pieces_[i].required) {
        keep.push_back(i);
        continue;
      }
      double loss = 0.0;
      if (vfreq[i] > 0.0) {
        const auto alt = viterbi(pieces_[i].text, i);
        const double logprob_sp = std::log(vfreq[i]) - logsum;
        const double new_sum =
            sum + vfreq[i] * (static_cast<double>(alt.size()) - 1.0);
        const double new_logsum = std::log(new_sum);
        double logprob_alt = 0.0;
        for (std::size_t a : alt) {
          logprob_alt += std::log(vfreq[a] + vfreq[i]) - new_logsum;
        }
        loss = (inverted[i] / sum) * (logprob_sp - logprob_alt);
      }
      scored.emplace_back(loss, i);
    }
    std::stable_sort(scored.begin(), scored.end(),
                     [&](const auto& a, const auto& b) {
                       if (a.first != b.first) return a.first > b.first;
                       return pieces_[a.second].text < pieces_[b.second].text;
                     });
    const std::size_t room = new_size > keep.size() ? new_size - keep.size() : 0;
    for (std::size_t k = 0; k < std::min(room, scored.size()); ++k) {
      keep.push_back(scored[k].second);
    }
    std::sort(keep.begin(), keep.end());
    std::vector<Candidate> next;
    next.reserve(keep.size());
    for (std::size_t i : keep) next.push_back(std::move(pieces_[i]));
    pieces_ = std::move(next);
  }

 private:
  void rebuild_trie() {
    trie_ = PieceTrie();
    for (std::size_t i = 0; i < pieces_.size(); ++i) {
      trie_.insert(pieces_[i].text, static_cast<TokenId>(i));
    }
  }

  std::vector<double> expected_counts() {
    rebuild_trie();
    std::vector<double> expected(pieces_.size(), 0.0);
    struct Edge {
      std::size_t start, end;
      TokenId id;
    };
    std::vector<Edge> edges;
    std::vector<double> alpha, beta;
    for (const auto& run : runs_) {
      const std::u32string& w = run.text;
      const std::size_t n = w.size();
      edges.clear();
      for (std::size_t s = 0; s < n; ++s) {
        trie_.match_prefixes(w, s, [&](std::size_t e, TokenId id) {
          if (e - s <= max_piece_len_) edges.push_back({s, e, id});
        });
      }
      alpha.assign(n + 1, kNegInf);
      beta.assign(n + 1, kNegInf);
      alpha[0] = 0.0;
      beta[n] = 0.0;
      // Edges are sorted by start, so a forward sweep sees finished alphas.
      for (const auto& e : edges) {
        alpha[e.end] =
            log_add(alpha[e.end], alpha[e.start] + pieces_[e.id].logprob);
      }
      for (auto it = edges.rbegin(); it != edges.rend(); ++it) {
        beta[it->start] =
            log_add(beta[it->start], beta[it->end] + pieces_[it->id].logprob);
      }
      const double z = alpha[n];
      if (z == kNegInf) continue;
      for (const auto& e : edges) {
        const double post =
            alpha[e.start] + pieces_[e.id].logprob + beta[e.end] - z;
        expected[e.id] += run.freq * std::exp(post);
      }
    }
    return expected;
  }

  void m_step(const std::vector<double>& expected, std::size_t min_size) {
    constexpr double kMinCount = 0.5;
    // Drop rarely used optional pieces, but never below min_size.
    std::vector<std::size_t> order(pieces_.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a,
                                                     std::size_t b) {
      return expected[a] < expected[b];
    });
    std::vector<bool> drop(pieces_.size(), false);
    std::size_t size = pieces_.size();
    for (std::size_t i : order) {
      if (size <= min_size || expected[i] >= kMinCount) break;
      if (pieces_[i].required) continue;
      drop[i] = true;
      --size;
    }
    std::vector<Candidate> next;
    std::vector<double> counts;
    for (std::size_t i = 0; i < pieces_.size(); ++i) {
      if (drop[i]) continue;
      counts.push_back(std::max(expected[i], pieces_[i].required ? kMinCount
                                                                 : 1e-6));
      next.push_back(std::move(pieces_[i]));
    }
    const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
    for (std::size_t i = 0; i < next.size(); ++i) {
      next[i].logprob = std::log(counts[i] / total);
    }
    pieces_ = std::move(next);
  }

  // Best segmentation of `text` as piece indices, optionally excluding one.
  std::vector<std::size_t> viterbi(const std::u32string& text,
                                   std::size_t excluded) const {
    const std::size_t n = text.size();
    std::vector<double> score(n + 1, kNegInf);
    std::vector<std::size_t> prev(n + 1, 0);
    std::vector<TokenId> via(n + 1, -1);
    score[0] = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      if (score[s] == kNegInf) continue;
      trie_.match_prefixes(text, s, [&](std::size_t e, TokenId id) {
        if (static_cast<std::size_t>(id) == excluded) return;
        const double cand = score[s] + pieces_[id].logprob;
        if (cand > score[e]) {
          score[e] = cand;
          prev[e] = s;
          via[e] = id;
        }
      });
    }
    std::vector<std::size_t> out;
    if (score[n] == kNegInf) return out;
    for (std::size_t e = n; e > 0; e = prev[e]) out.push_back(via[e]);
    std::reverse(out.begin(), out.end());
    return out;
  }

  std::vector<Run> runs_;
  std::vector<Candidate> pieces_;
  std::size_t em_rounds_;
  std::size_t max_piece_len_;
  PieceTrie trie_;
};

}  // namespace

SubwordVocab train_unigram(const std::vector<std::string>& lines,
                           const TrainerSpec& spec,
                           const std::vector<LangCode>& tags) {
  spec.validate();
  const std::size_t num_specials = kNumFixedSpecials + tags.size();

  std::map<std::u32string, double> word_counts;
  for (const auto& line : lines) {
    for (auto& w : pretokenize(line)) word_counts[std::move(w)] += 1.0;
  }
  if (word_counts.empty()) {
    throw Error("train_unigram: corpus is empty after pretokenization");
  }

  // Characters inside the top char_coverage mass become required pieces.
  std::map<char32_t, double> char_counts;
  double char_total = 0.0;
  for (const auto& [w, f] : word_counts) {
    for (char32_t c : w) char_counts[c] += f;
    char_total += f * static_cast<double>(w.size());
  }
  std::vector<std::pair<char32_t, double>> chars(char_counts.begin(),
                                                 char_counts.end());
  std::stable_sort(chars.begin(), chars.end(), [](const auto& a,
                                                  const auto& b) {
    return a.second > b.second;
  });
  std::unordered_set<char32_t> covered;
  double mass = 0.0;
  for (const auto& [c, f] : chars) {
    if (mass >= spec.char_coverage * char_total) break;
    covered.insert(c);
    mass += f;
  }
  if (spec.target_size < num_specials + covered.size()) {
    throw Error("train_unigram: target_size " +
                std::to_string(spec.target_size) + " is below specials (" +
                std::to_string(num_specials) + ") + covered characters (" +
                std::to_string(covered.size()) + ")");
  }

  // Runs of covered characters, weighted by word frequency.
  std::map<std::u32string, double> run_counts;
  for (const auto& [w, f] : word_counts) {
    std::size_t i = 0;
    while (i < w.size()) {
      if (covered.count(w[i]) == 0) {
        ++i;
        continue;
      }
      std::size_t j = i;
      while (j < w.size() && covered.count(w[j]) != 0) ++j;
      run_counts[w.substr(i, j - i)] += f;
      i = j;
    }
  }

  // Seed candidates: frequency-counted substrings (hash count with a cap).
  std::unordered_set<std::string> reserved;
  for (auto s : kFixedSpecials) reserved.emplace(s);
  for (const auto& t : tags) reserved.insert(lang_tag_piece(t));
  const std::size_t count_cap = std::max<std::size_t>(spec.seed_size * 8, 1024);
  std::unordered_map<std::u32string, double> substr_counts;
  for (const auto& [run, f] : run_counts) {
    for (std::size_t s = 0; s < run.size(); ++s) {
      for (std::size_t len = 2;
           len <= spec.max_piece_len && s + len <= run.size(); ++len) {
        std::u32string sub = run.substr(s, len);
        if (sub.find(kMeta, 1) != std::u32string::npos) break;
        auto it = substr_counts.find(sub);
        if (it != substr_counts.end()) {
          it->second += f;
        } else if (substr_counts.size() < count_cap) {
          substr_counts.emplace(std::move(sub), f);
        }
      }
    }
  }
  std::vector<std::pair<std::u32string, double>> subs;
  subs.reserve(substr_counts.size());
  for (auto& [s, f] : substr_counts) {
    if (reserved.count(utf8::encode(s)) == 0) subs.emplace_back(s, f);
  }
  std::sort(subs.begin(), subs.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  const std::size_t wanted = spec.target_size - num_specials;
  const std::size_t achievable = num_specials + covered.size() + subs.size();
  if (achievable < spec.target_size) {
    throw Error("train_unigram: target_size " +
                std::to_string(spec.target_size) +
                " unreachable; at most " + std::to_string(achievable) +
                " entries are achievable on this corpus");
  }

  std::vector<Candidate> seed;
  double seed_total = 0.0;
  for (const auto& [c, f] : chars) {
    if (covered.count(c) == 0) continue;
    seed.push_back({std::u32string(1, c), f, true});
  }
  const std::size_t seed_limit = std::max(spec.seed_size, wanted);
  for (const auto& [s, f] : subs) {
    if (seed.size() >= seed_limit) break;
    seed.push_back({s, f, false});
  }
  for (const auto& c : seed) seed_total += c.logprob;
  for (auto& c : seed) c.logprob = std::log(c.logprob / seed_total);

  std::vector<Run> runs;
  runs.reserve(run_counts.size());
  for (auto& [r, f] : run_counts) runs.push_back({r, f});

  UnigramTrainer trainer(std::move(runs), std::move(seed), spec.em_rounds,
                         spec.max_piece_len);
  trainer.run_em(wanted);
  while (trainer.pieces().size() > wanted) {
    const std::size_t current = trainer.pieces().size();
    std::size_t next = static_cast<std::size_t>(
        std::floor(static_cast<double>(current) * (1.0 - spec.prune_fraction)));
    next = std::min(std::max(next, wanted), current - 1);
    trainer.prune(next);
    trainer.run_em(wanted);
  }
  if (spec.em_rounds == 0) {
    // Without EM the seed frequencies remain; renormalize after pruning.
    auto& p = trainer.pieces();
    double total = 0.0;
    for (const auto& c : p) total += std::exp(c.logprob);
    for (auto& c : p) c.logprob -= std::log(total);
  }

  auto& final_pieces = trainer.pieces();
  std::stable_sort(final_pieces.begin(), final_pieces.end(),
                   [](const Candidate& a, const Candidate& b) {
                     if (a.logprob != b.logprob) return a.logprob > b.logprob;
                     return a.text < b.text;
                   });
  std::vector<Piece> pieces;
  pieces.reserve(final_pieces.size());
  for (const auto& c : final_pieces) {
    pieces.push_back({utf8::encode(c.text), c.logprob});
  }
  return SubwordVocab(tags, std::move(pieces));
}

}  // namespace ibkt::subword
