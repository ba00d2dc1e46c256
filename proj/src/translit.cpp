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

#include "ibkt/translit.hpp"

#include <algorithm>
#include <array>
#include <cstdlib>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <utility>

#include "ibkt/error.hpp"
#include "ibkt/utf8.hpp"

#ifndef IBKT_DATA_DIR
#define IBKT_DATA_DIR "data"
#endif

namespace ibkt {

LangCode::LangCode(std::string_view code) {
  if (code.size() != 2 || !std::all_of(code.begin(), code.end(), [](char c) {
        return c >= 'a' && c <= 'z';
      })) {
    throw Error("invalid language code '" + std::string(code) +
                "': expected two lowercase ASCII letters");
  }
  code_ = std::string(code);
}

}  // namespace ibkt

namespace ibkt::translit {
namespace {

struct EmbeddedTable {
  const char* lang;
  const char* tsv;
};

// Generated from data/translit/exceptions/*.tsv.
#include "translit_exceptions.inc"

// Assigned code points per block (Unicode 13), bit o set when base+o is
// assigned. Generated with Python's unicodedata.
struct AssignedMask {
  char32_t base;
  std::uint64_t lo;
  std::uint64_t hi;
};

constexpr std::array<AssignedMask, 9> kAssigned = {{
    {0x0900, 0xFFFFFFFFFFFFFFFFULL, 0xFFFFFFFFFFFFFFFFULL},
    {0x0980, 0xF3C5FDFFFFF99FEFULL, 0x7FFFFFCFB080799FULL},
    {0x0A00, 0xD36DFDFFFFF987EEULL, 0x007FFFC05E023987ULL},
    {0x0A80, 0xF3EDFDFFFFFBBFEEULL, 0xFE03FFCF00013BBFULL},
    {0x0B00, 0xF3EDFDFFFFF99FEEULL, 0x00FFFFCFB0E0399FULL},
    {0x0B80, 0xC3FFC718D63DC7ECULL, 0x07FFFFC000813DC7ULL},
    {0x0C00, 0xE3FFFDFFFFFDDFFFULL, 0xFF80FFCF07603DDFULL},
    {0x0C80, 0xF3EFFDFFFFFDDFFFULL, 0x0006FFCF40603DDFULL},
    {0x0D00, 0xFFFFFFFFFFFDDFFFULL, 0xFFFFFFCFFFF0FDDFULL},
}};

bool is_assigned(char32_t base, int offset) {
  for (const auto& m : kAssigned) {
    if (m.base == base) {
      return offset < 64 ? ((m.lo >> offset) & 1u) != 0
                         : ((m.hi >> (offset - 64)) & 1u) != 0;
    }
  }
  return false;
}

std::vector<ExceptionEntry> embedded_exceptions(std::string_view lang) {
  for (const auto& t : kEmbeddedTables) {
    if (lang == t.lang) return parse_pair_table(t.tsv);
  }
  return {};
}

ScriptBlock offset_block(std::string_view code, char32_t base,
                         std::string_view exception_table) {
  ScriptBlock b;
  b.lang = LangCode(code);
  b.kind = BlockKind::kOffset;
  b.base = base;
  b.span = kBlockSpan;
  b.exceptions = embedded_exceptions(exception_table);
  return b;
}

ScriptBlock identity_block(std::string_view code) {
  ScriptBlock b;
  b.lang = LangCode(code);
  b.kind = BlockKind::kIdentity;
  b.base = kDevanagariBase;
  b.span = kBlockSpan;
  return b;
}

ScriptBlock empty_block(std::string_view code) {
  ScriptBlock b;
  b.lang = LangCode(code);
  return b;
}

std::vector<ScriptBlock> standard_blocks() {
  return {
      offset_block("as", 0x0980, "bn"),
      offset_block("bn", 0x0980, "bn"),
      empty_block("en"),
      offset_block("gu", 0x0A80, "gu"),
      identity_block("hi"),
      offset_block("kn", 0x0C80, "kn"),
      offset_block("ml", 0x0D00, "ml"),
      identity_block("mr"),
      offset_block("or", 0x0B00, "or"),
      offset_block("pa", 0x0A00, "pa"),
      offset_block("ta", 0x0B80, "ta"),
      offset_block("te", 0x0C00, "te"),
  };
}

}  // namespace

void TranslitReport::merge(const TranslitReport& other) {
  chars_total += other.chars_total;
  chars_mapped += other.chars_mapped;
  chars_passed_through += other.chars_passed_through;
  for (const auto& [cp, n] : other.passthrough_inventory) {
    passthrough_inventory[cp] += n;
  }
}

std::vector<ExceptionEntry> parse_pair_table(std::string_view tsv) {
  std::vector<ExceptionEntry> entries;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= tsv.size()) {
    std::size_t end = tsv.find('\n', pos);
    if (end == std::string_view::npos) end = tsv.size();
    std::string_view line = tsv.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty() || line.front() == '#') continue;

    const std::size_t tab = line.find('\t');
    if (tab == std::string_view::npos) {
      throw FormatError("pair table line " + std::to_string(line_no) +
                        ": expected src<TAB>tgt");
    }
    std::string_view target_field = line.substr(tab + 1);
    target_field = target_field.substr(0, target_field.find('\t'));

    ExceptionEntry e;
    e.source = utf8::parse_codepoint(line.substr(0, tab));
    std::istringstream targets{std::string(target_field)};
    std::string tok;
    while (targets >> tok) e.target.push_back(utf8::parse_codepoint(tok));
    if (e.target.empty()) {
      throw FormatError("pair table line " + std::to_string(line_no) +
                        ": empty target");
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

std::vector<ExceptionEntry> load_pair_table(
    const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open pair table " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_pair_table(ss.str());
}

std::filesystem::path default_data_dir() {
  if (const char* env = std::getenv("IBKT_DATA_DIR")) return env;
  return IBKT_DATA_DIR;
}

LanguageRegistry LanguageRegistry::standard() {
  return LanguageRegistry(standard_blocks());
}

LanguageRegistry LanguageRegistry::extended(
    const std::filesystem::path& data_dir) {
  auto blocks = standard_blocks();
  blocks.push_back(identity_block("ne"));
  ScriptBlock si;
  si.lang = LangCode("si");
  si.kind = BlockKind::kPairTable;
  si.base = 0x0D80;
  si.span = kBlockSpan;
  si.exceptions = load_pair_table(data_dir / "translit" / "si_pairs.tsv");
  blocks.push_back(std::move(si));
  return LanguageRegistry(std::move(blocks));
}

LanguageRegistry::LanguageRegistry(std::vector<ScriptBlock> blocks) {
  for (auto& b : blocks) {
    if (tables_.count(b.lang) != 0) {
      throw Error("language '" + b.lang.str() + "' registered twice");
    }
    order_.push_back(b.lang);
    LangCode lang = b.lang;
    tables_.emplace(lang, build(std::move(b)));
  }
}

LanguageRegistry::Tables LanguageRegistry::build(ScriptBlock block) {
  Tables t;
  switch (block.kind) {
    case BlockKind::kNone:
      break;
    case BlockKind::kIdentity:
      for (int o = 0; o < kBlockSpan; ++o) {
        const char32_t cp = kDevanagariBase + o;
        t.to_deva.emplace(cp, std::u32string(1, cp));
        t.from_deva.emplace(cp, cp);
      }
      break;
    case BlockKind::kOffset: {
      if (block.base == kDevanagariBase) {
        throw Error("offset block for '" + block.lang.str() +
                    "' must not start at U+0900");
      }
      for (int o = 0; o < kBlockSpan; ++o) {
        if (is_assigned(block.base, o) && is_assigned(kDevanagariBase, o)) {
          t.to_deva.emplace(block.base + o,
                            std::u32string(1, kDevanagariBase + o));
        }
      }
      for (const auto& e : block.exceptions) {
        if (e.source < block.base || e.source >= block.base + block.span) {
          throw Error("exception " + utf8::format_codepoint(e.source) +
                      " lies outside the block of '" + block.lang.str() + "'");
        }
        t.to_deva.erase(e.source);
        if (!(e.target.size() == 1 && e.target[0] == e.source)) {
          t.to_deva.emplace(e.source, e.target);
        }
      }
      break;
    }
    case BlockKind::kPairTable:
      for (const auto& e : block.exceptions) {
        if (!t.to_deva.emplace(e.source, e.target).second) {
          throw Error("duplicate pair-table source " +
                      utf8::format_codepoint(e.source));
        }
      }
      break;
  }
  // The inverse covers exactly the 1:1 entries that land in Devanagari.
  if (block.kind != BlockKind::kIdentity) {
    for (const auto& [src, tgt] : t.to_deva) {
      if (tgt.size() == 1 && tgt[0] >= kDevanagariBase &&
          tgt[0] < kDevanagariBase + kBlockSpan) {
        if (!t.from_deva.emplace(tgt[0], src).second) {
          throw Error("pair table for '" + block.lang.str() +
                      "' maps two sources onto " +
                      utf8::format_codepoint(tgt[0]));
        }
      }
    }
  }
  t.block = std::move(block);
  return t;
}

bool LanguageRegistry::contains(const LangCode& lang) const {
  return tables_.count(lang) != 0;
}

LangCode LanguageRegistry::parse(std::string_view code) const {
  LangCode lang(code);
  if (!contains(lang)) {
    throw Error("unregistered language code '" + std::string(code) + "'");
  }
  return lang;
}

const LanguageRegistry::Tables& LanguageRegistry::tables(
    const LangCode& lang) const {
  auto it = tables_.find(lang);
  if (it == tables_.end()) {
    throw Error("unregistered language code '" + lang.str() + "'");
  }
  return it->second;
}

const ScriptBlock& LanguageRegistry::block(const LangCode& lang) const {
  return tables(lang).block;
}

std::size_t LanguageRegistry::index_of(const LangCode& lang) const {
  auto it = std::find(order_.begin(), order_.end(), lang);
  if (it == order_.end()) {
    throw Error("unregistered language code '" + lang.str() + "'");
  }
  return static_cast<std::size_t>(it - order_.begin());
}

bool LanguageRegistry::is_indic(const LangCode& lang) const {
  return block(lang).kind != BlockKind::kNone;
}

TranslitResult LanguageRegistry::to_devanagari(std::string_view text,
                                               const LangCode& src) const {
  const Tables& t = tables(src);
  TranslitResult r;
  r.text.reserve(text.size());
  for (char32_t cp : utf8::decode(text)) {
    ++r.report.chars_total;
    auto it = t.to_deva.find(cp);
    if (it != t.to_deva.end()) {
      ++r.report.chars_mapped;
      for (char32_t out : it->second) utf8::append(r.text, out);
    } else {
      ++r.report.chars_passed_through;
      ++r.report.passthrough_inventory[cp];
      utf8::append(r.text, cp);
    }
  }
  return r;
}

TranslitResult LanguageRegistry::from_devanagari(std::string_view text,
                                                 const LangCode& tgt) const {
  const Tables& t = tables(tgt);
  TranslitResult r;
  r.text.reserve(text.size());
  for (char32_t cp : utf8::decode(text)) {
    ++r.report.chars_total;
    auto it = t.from_deva.find(cp);
    if (it != t.from_deva.end()) {
      ++r.report.chars_mapped;
      utf8::append(r.text, it->second);
    } else {
      ++r.report.chars_passed_through;
      ++r.report.passthrough_inventory[cp];
      utf8::append(r.text, cp);
    }
  }
  return r;
}

RoundTripResult LanguageRegistry::round_trip_check(
    const std::vector<std::string>& lines, const LangCode& lang) const {
  tables(lang);
  RoundTripResult r;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto unified = to_devanagari(lines[i], lang);
    if (from_devanagari(unified.text, lang).text != lines[i]) {
      r.failing_lines.push_back(i);
    }
  }
  if (!lines.empty()) {
    r.fraction = static_cast<double>(lines.size() - r.failing_lines.size()) /
                 static_cast<double>(lines.size());
  }
  return r;
}

std::vector<char32_t> LanguageRegistry::mapped_code_points(
    const LangCode& lang) const {
  const Tables& t = tables(lang);
  std::vector<char32_t> out;
  for (const auto& [src, tgt] : t.to_deva) {
    if (tgt.size() == 1) {
      auto inv = t.from_deva.find(tgt[0]);
      if (inv != t.from_deva.end() && inv->second == src) out.push_back(src);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace ibkt::translit
