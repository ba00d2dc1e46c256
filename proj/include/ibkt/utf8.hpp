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
#include <optional>
#include <string>
#include <string_view>

namespace ibkt::utf8 {

// Decodes UTF-8 into code points. Throws FormatError naming the byte offset
// of the first malformed sequence.
std::u32string decode(std::string_view text);

// Returns the byte offset of the first invalid sequence, if any.
std::optional<std::size_t> find_invalid(std::string_view text);

std::string encode(std::u32string_view text);
void append(std::string& out, char32_t cp);

// Python str.isspace() semantics.
bool is_space(char32_t cp);

// "U+0915" notation.
std::string format_codepoint(char32_t cp);
char32_t parse_codepoint(std::string_view token);

}  // namespace ibkt::utf8
