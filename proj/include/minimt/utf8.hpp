#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace minimt::utf8 {

// One decoded character: its byte range in the source and code point.
// Malformed bytes decode as single-byte units with code point -1.
struct Unit {
  std::size_t offset;
  std::size_t length;
  std::int32_t code_point;
};

std::vector<Unit> decode(std::string_view text);
std::string encode(std::uint32_t code_point);
bool valid(std::string_view text);

enum class CharClass { kSpace, kLetter, kDigit, kPunct };

// Coarse character classes for tokenization. Non-ASCII code points count as
// letters unless they fall in a punctuation or symbol block.
CharClass classify(std::int32_t code_point);

}  // namespace minimt::utf8
