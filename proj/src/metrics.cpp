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

#include "ibkt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "ibkt/error.hpp"
#include "ibkt/utf8.hpp"

namespace ibkt::metrics {

namespace {

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
}

bool is_digit(char32_t c) { return c >= U'0' && c <= U'9'; }
bool is_period_comma(char32_t c) { return c == U'.' || c == U','; }

// [\{-\~\[-\` -\&\(-\+\:-\@\/]
bool is_13a_punct(char32_t c) {
  return (c >= 0x7B && c <= 0x7E) || (c >= 0x5B && c <= 0x60) ||
         (c >= 0x20 && c <= 0x26) || (c >= 0x28 && c <= 0x2B) ||
         (c >= 0x3A && c <= 0x40) || c == U'/';
}

// re.sub for a two-character pattern (A)(B): non-overlapping left-to-right
// matches; `emit` writes the replacement.
template <class A, class B, class Emit>
std::u32string sub_pair(const std::u32string& s, A first, B second,
                        Emit emit) {
  std::u32string out;
  out.reserve(s.size() + s.size() / 2);
  std::size_t i = 0;
  while (i < s.size()) {
    if (i + 1 < s.size() && first(s[i]) && second(s[i + 1])) {
      emit(out, s[i], s[i + 1]);
      i += 2;
    } else {
      out.push_back(s[i]);
      ++i;
    }
  }
  return out;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts ngrams(std::span<const std::string> toks, std::size_t n) {
  NgramCounts c;
  if (toks.size() < n) return c;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) {
    ++c[std::vector<std::string>(toks.begin() + i, toks.begin() + i + n)];
  }
  return c;
}

std::size_t clipped_overlap(const NgramCounts& hyp, const NgramCounts& ref) {
  std::size_t m = 0;
  for (const auto& [g, n] : hyp) {
    auto it = ref.find(g);
    if (it != ref.end()) m += std::min(n, it->second);
  }
  return m;
}

bool is_edge_punct(char32_t c) {
  if (c < 0x80) {
    return (c >= 0x21 && c <= 0x2F) || (c >= 0x3A && c <= 0x40) ||
           (c >= 0x5B && c <= 0x60) || (c >= 0x7B && c <= 0x7E);
  }
  return c == 0x00A1 || c == 0x00AB || c == 0x00B7 || c == 0x00BB ||
         c == 0x00BF || c == 0x0964 || c == 0x0965 || c == 0x0970 ||
         c == 0x3001 || c == 0x3002 || (c >= 0x2010 && c <= 0x2027) ||
         (c >= 0x2030 && c <= 0x205E);
}

}  // namespace

std::vector<std::string> tokenize_13a(std::string_view text) {
  std::string line(text);
  replace_all(line, "<skipped>", "");
  replace_all(line, "-\n", "");
  replace_all(line, "\n", " ");
  if (line.find('&') != std::string::npos) {
    replace_all(line, "&quot;", "\"");
    replace_all(line, "&amp;", "&");
    replace_all(line, "&lt;", "<");
    replace_all(line, "&gt;", ">");
  }
  const std::u32string in = utf8::decode(" " + line + " ");

  std::u32string s;
  s.reserve(in.size() * 2);
  for (char32_t c : in) {
    if (is_13a_punct(c)) {
      s.push_back(U' ');
      s.push_back(c);
      s.push_back(U' ');
    } else {
      s.push_back(c);
    }
  }
  auto not_digit = [](char32_t c) { return !is_digit(c); };
  s = sub_pair(s, not_digit, is_period_comma,
               [](std::u32string& o, char32_t a, char32_t b) {
                 o.push_back(a);
                 o.push_back(U' ');
                 o.push_back(b);
                 o.push_back(U' ');
               });
  s = sub_pair(s, is_period_comma, not_digit,
               [](std::u32string& o, char32_t a, char32_t b) {
                 o.push_back(U' ');
                 o.push_back(a);
                 o.push_back(U' ');
                 o.push_back(b);
               });
  s = sub_pair(s, is_digit, [](char32_t c) { return c == U'-'; },
               [](std::u32string& o, char32_t a, char32_t b) {
                 o.push_back(a);
                 o.push_back(U' ');
                 o.push_back(b);
                 o.push_back(U' ');
               });

  std::vector<std::string> tokens;
  std::u32string cur;
  for (char32_t c : s) {
    if (utf8::is_space(c)) {
      if (!cur.empty()) tokens.push_back(utf8::encode(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) tokens.push_back(utf8::encode(cur));
  return tokens;
}

std::string BleuReport::tsv_header() {
  return "bleu\tp1\tp2\tp3\tp4\tbp\thyp_len\tref_len";
}

std::string BleuReport::tsv() const {
  std::string out = fmt(score);
  for (double p : precisions) out += "\t" + fmt(p);
  out += "\t" + fmt(brevity_penalty);
  out += "\t" + std::to_string(hyp_len) + "\t" + std::to_string(ref_len);
  return out;
}

BleuReport bleu(const std::vector<std::string>& hyps,
                const std::vector<std::string>& refs) {
  if (hyps.size() != refs.size()) {
    throw Error("bleu: " + std::to_string(hyps.size()) + " hypotheses vs " +
                std::to_string(refs.size()) + " references");
  }
  if (hyps.empty()) throw Error("bleu: empty corpus");
  BleuReport r;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const auto h = tokenize_13a(hyps[i]);
    const auto g = tokenize_13a(refs[i]);
    r.hyp_len += h.size();
    r.ref_len += g.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      if (h.size() >= n) r.totals[n - 1] += h.size() - n + 1;
      r.matches[n - 1] += clipped_overlap(ngrams(h, n), ngrams(g, n));
    }
  }
  double smooth = 1.0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (r.matches[n] > 0) {
      r.precisions[n] = static_cast<double>(r.matches[n]) /
                        static_cast<double>(r.totals[n]);
    } else {
      smooth *= 2.0;
      r.precisions[n] =
          1.0 / (smooth * static_cast<double>(std::max<std::size_t>(
                              r.totals[n], 1)));
    }
  }
  if (r.hyp_len == 0) {
    r.brevity_penalty = 0.0;
  } else if (r.hyp_len < r.ref_len) {
    r.brevity_penalty = std::exp(1.0 - static_cast<double>(r.ref_len) /
                                           static_cast<double>(r.hyp_len));
  } else {
    r.brevity_penalty = 1.0;
  }
  if (r.matches[0] == 0) {
    r.score = 0.0;
    return r;
  }
  double log_sum = 0.0;
  for (double p : r.precisions) log_sum += std::log(p);
  r.score = 100.0 * r.brevity_penalty * std::exp(log_sum / 4.0);
  return r;
}

std::vector<std::string> rouge_tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::u32string cur;
  auto flush = [&] {
    std::size_t b = 0, e = cur.size();
    while (b < e && is_edge_punct(cur[b])) ++b;
    while (e > b && is_edge_punct(cur[e - 1])) --e;
    if (b < e) out.push_back(utf8::encode(cur.substr(b, e - b)));
    cur.clear();
  };
  for (char32_t c : utf8::decode(text)) {
    if (utf8::is_space(c)) {
      flush();
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return out;
}

std::size_t lcs_length(std::span<const std::string> a,
                       std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1
                                    : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

Prf prf(double overlap, double hyp_count, double ref_count) {
  Prf r;
  r.precision = hyp_count > 0 ? overlap / hyp_count : 0.0;
  r.recall = ref_count > 0 ? overlap / ref_count : 0.0;
  const double s = r.precision + r.recall;
  r.f1 = s > 0 ? 2.0 * r.precision * r.recall / s : 0.0;
  return r;
}

Prf rouge_n(std::span<const std::string> hyp, std::span<const std::string> ref,
            std::size_t n) {
  const double h = hyp.size() >= n ? static_cast<double>(hyp.size() - n + 1) : 0;
  const double g = ref.size() >= n ? static_cast<double>(ref.size() - n + 1) : 0;
  const auto m = clipped_overlap(ngrams(hyp, n), ngrams(ref, n));
  return prf(static_cast<double>(m), h, g);
}

Prf rouge_l(std::span<const std::string> hyp, std::span<const std::string> ref) {
  return prf(static_cast<double>(lcs_length(hyp, ref)),
             static_cast<double>(hyp.size()), static_cast<double>(ref.size()));
}

std::string RougeReport::tsv_header() {
  return "r1_p\tr1_r\tr1_f\tr2_p\tr2_r\tr2_f\trl_p\trl_r\trl_f";
}

std::string RougeReport::tsv() const {
  std::string out;
  for (const Prf* p : {&r1, &r2, &rl}) {
    if (!out.empty()) out += "\t";
    out += fmt(p->precision) + "\t" + fmt(p->recall) + "\t" + fmt(p->f1);
  }
  return out;
}

RougeReport rouge(const std::vector<std::string>& hyps,
                  const std::vector<std::string>& refs) {
  if (hyps.size() != refs.size()) {
    throw Error("rouge: " + std::to_string(hyps.size()) + " hypotheses vs " +
                std::to_string(refs.size()) + " references");
  }
  RougeReport r;
  if (hyps.empty()) return r;
  auto acc = [](Prf& total, const Prf& x) {
    total.precision += x.precision;
    total.recall += x.recall;
    total.f1 += x.f1;
  };
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const auto h = rouge_tokenize(hyps[i]);
    const auto g = rouge_tokenize(refs[i]);
    acc(r.r1, rouge_n(h, g, 1));
    acc(r.r2, rouge_n(h, g, 2));
    acc(r.rl, rouge_l(h, g));
  }
  const double n = static_cast<double>(hyps.size());
  for (Prf* p : {&r.r1, &r.r2, &r.rl}) {
    p->precision /= n;
    p->recall /= n;
    p->f1 /= n;
  }
  return r;
}

}  // namespace ibkt::metrics
