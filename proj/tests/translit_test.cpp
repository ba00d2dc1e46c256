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

#include <gtest/gtest.h>

#include <random>
#include <string>

#include "ibkt/error.hpp"
#include "ibkt/utf8.hpp"

namespace ibkt::translit {
namespace {

const LanguageRegistry& registry() {
  static const LanguageRegistry r = LanguageRegistry::extended();
  return r;
}

std::string u8(std::u32string_view s) { return utf8::encode(s); }

TEST(Translit, BengaliToDevanagari) {
  const auto r = registry().to_devanagari("বন", LangCode("bn"));
  EXPECT_EQ(r.text, u8(U"बन"));
  EXPECT_EQ(r.report.chars_mapped, 2u);
  EXPECT_EQ(r.report.chars_passed_through, 0u);
}

TEST(Translit, HindiIsIdentity) {
  EXPECT_EQ(registry().to_devanagari("नमस्ते", LangCode("hi")).text, "नमस्ते");
  EXPECT_EQ(registry().from_devanagari("बन", LangCode("hi")).text, "बन");
}

TEST(Translit, TamilWithAsciiPassthrough) {
  const auto r = registry().to_devanagari("தமிழ் 2024!", LangCode("ta"));
  EXPECT_EQ(r.text, "तमिऴ् 2024!");
  EXPECT_EQ(r.report.chars_passed_through, 6u);
  EXPECT_EQ(r.report.chars_mapped, 5u);
  EXPECT_EQ(r.report.passthrough_inventory.at(U'2'), 2u);
}

TEST(Translit, FromDevanagari) {
  EXPECT_EQ(registry().from_devanagari("बन", LangCode("bn")).text, "বন");
  // Nukta letter QA has no Tamil slot.
  const auto r = registry().from_devanagari("क़", LangCode("ta"));
  EXPECT_EQ(r.text, "क़");
  EXPECT_EQ(r.report.chars_passed_through, 1u);
}

TEST(Translit, RoundTripExamples) {
  EXPECT_DOUBLE_EQ(
      registry().round_trip_check({"বন", "মা"}, LangCode("bn")).fraction, 1.0);
  EXPECT_DOUBLE_EQ(registry().round_trip_check({"abc"}, LangCode("bn")).fraction,
                   1.0);
  EXPECT_DOUBLE_EQ(
      registry().round_trip_check({"தமிழ்"}, LangCode("ta")).fraction, 1.0);
}

TEST(Translit, RoundTripListsFailingLines) {
  // A chillu expands to two code points and cannot be restored.
  const auto r =
      registry().round_trip_check({"മല", "ൻ"}, LangCode("ml"));
  EXPECT_DOUBLE_EQ(r.fraction, 0.5);
  ASSERT_EQ(r.failing_lines.size(), 1u);
  EXPECT_EQ(r.failing_lines[0], 1u);
}

TEST(Translit, UnregisteredCodeIsNamed) {
  try {
    registry().parse("xx");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("'xx'"), std::string::npos);
  }
  EXPECT_THROW(registry().to_devanagari("a", LangCode("zz")), Error);
  EXPECT_THROW(LangCode("HI"), Error);
  EXPECT_THROW(LangCode("hin"), Error);
}

TEST(Translit, StandardRegistryOrder) {
  const auto reg = LanguageRegistry::standard();
  std::string joined;
  for (const auto& l : reg.languages()) joined += l.str() + ",";
  EXPECT_EQ(joined, "as,bn,en,gu,hi,kn,ml,mr,or,pa,ta,te,");
  EXPECT_FALSE(reg.is_indic(LangCode("en")));
  EXPECT_EQ(reg.block(LangCode("as")).base, reg.block(LangCode("bn")).base);
}

TEST(Translit, MappedPointsFollowOffsetArithmetic) {
  for (const auto& lang : registry().languages()) {
    const auto& b = registry().block(lang);
    if (b.kind != BlockKind::kOffset) continue;
    const auto mapped = registry().mapped_code_points(lang);
    EXPECT_GT(mapped.size(), 40u) << lang.str();
    for (char32_t c : mapped) {
      const char32_t expect = 0x0900 + (c - b.base);
      const auto to = registry().to_devanagari(u8(std::u32string(1, c)), lang);
      ASSERT_EQ(to.text, u8(std::u32string(1, expect)))
          << utf8::format_codepoint(c);
      ASSERT_EQ(registry().from_devanagari(to.text, lang).text,
                u8(std::u32string(1, c)));
    }
  }
}

TEST(Translit, MalayalamChilluExpands) {
  const auto r = registry().to_devanagari("ൻ", LangCode("ml"));
  EXPECT_EQ(r.text, "न्");
  EXPECT_EQ(r.report.chars_mapped, 1u);
}

TEST(Translit, SinhalaPairTable) {
  const auto r = registry().to_devanagari("කා", LangCode("si"));
  EXPECT_EQ(r.text, "का");
  EXPECT_EQ(registry().from_devanagari(r.text, LangCode("si")).text,
            "කා");
  for (char32_t c : registry().mapped_code_points(LangCode("si"))) {
    const std::string s = u8(std::u32string(1, c));
    const auto to = registry().to_devanagari(s, LangCode("si")).text;
    ASSERT_EQ(registry().from_devanagari(to, LangCode("si")).text, s);
  }
}

TEST(Translit, ParsePairTableRejectsMalformedLines) {
  EXPECT_THROW(parse_pair_table("U+0D85 U+0905\n"), FormatError);
  EXPECT_THROW(parse_pair_table("U+0D85\t\n"), FormatError);
  const auto t = parse_pair_table("# c\nU+0D85\tU+0905 U+094D\t# x\n");
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t[0].target, std::u32string(U"अ्"));
}

char32_t random_code_point(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, 9);
  const int k = pick(rng);
  if (k < 6) {
    // Inside the Indic blocks.
    return std::uniform_int_distribution<char32_t>(0x0900, 0x0DFF)(rng);
  }
  if (k < 8) return std::uniform_int_distribution<char32_t>(0x20, 0x7E)(rng);
  char32_t c;
  do {
    c = std::uniform_int_distribution<char32_t>(0x80, 0x2FFFF)(rng);
  } while (c >= 0xD800 && c <= 0xDFFF);
  return c;
}

TEST(Translit, FuzzProperties) {
  std::mt19937_64 rng(7);
  const auto& langs = registry().languages();
  for (int iter = 0; iter < 5000; ++iter) {
    std::u32string s;
    const int n = std::uniform_int_distribution<int>(0, 20)(rng);
    for (int i = 0; i < n; ++i) s.push_back(random_code_point(rng));
    const std::string text = u8(s);
    const auto& lang = langs[iter % langs.size()];
    const auto& b = registry().block(lang);

    const auto to = registry().to_devanagari(text, lang);
    ASSERT_EQ(to.report.chars_mapped + to.report.chars_passed_through,
              to.report.chars_total);
    ASSERT_EQ(to.report.chars_total, s.size());
    const auto from = registry().from_devanagari(text, lang);
    ASSERT_EQ(from.report.chars_mapped + from.report.chars_passed_through,
              from.report.chars_total);

    // Idempotent on its own output.
    ASSERT_EQ(registry().to_devanagari(to.text, lang).text, to.text);
    if (b.kind == BlockKind::kIdentity) ASSERT_EQ(to.text, text);

    // Code points outside every Indic block survive unchanged.
    const std::u32string out = utf8::decode(to.text);
    std::size_t j = 0;
    for (char32_t c : s) {
      if (c < 0x0900 || c > 0x0DFF) {
        while (j < out.size() && out[j] != c) ++j;
        ASSERT_LT(j, out.size());
        ++j;
      }
    }
  }
}

}  // namespace
}  // namespace ibkt::translit
