#include "minimt/utf8.hpp"

namespace minimt::utf8 {

std::vector<Unit> decode(std::string_view text) {
  std::vector<Unit> units;
  units.reserve(text.size());
  std::size_t i = 0;
  const auto byte = [&](std::size_t k) { return static_cast<unsigned char>(text[k]); };
  while (i < text.size()) {
    const unsigned char c = byte(i);
    std::size_t len = 0;
    std::int32_t cp = -1;
    if (c < 0x80) {
      len = 1;
      cp = c;
    } else if ((c & 0xE0) == 0xC0) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4;
      cp = c & 0x07;
    }
    bool ok = len > 0 && i + len <= text.size();
    for (std::size_t k = 1; ok && k < len; ++k) {
      const unsigned char cc = byte(i + k);
      if ((cc & 0xC0) != 0x80) ok = false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    if (ok) {
      // Reject overlong forms, surrogates and out-of-range values.
      static constexpr std::int32_t kMin[] = {0, 0, 0x80, 0x800, 0x10000};
      if (cp < kMin[len] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) ok = false;
    }
    if (!ok) {
      units.push_back({i, 1, -1});
      ++i;
      continue;
    }
    units.push_back({i, len, cp});
    i += len;
  }
  return units;
}

std::string encode(std::uint32_t cp) {
  std::string out;
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
  return out;
}

bool valid(std::string_view text) {
  for (const auto& u : decode(text)) {
    if (u.code_point < 0) return false;
  }
  return true;
}

CharClass classify(std::int32_t cp) {
  if (cp < 0) return CharClass::kPunct;
  if (cp == ' ' || cp == '\t' || cp == '\r' || cp == '\n' || cp == '\v' || cp == '\f') {
    return CharClass::kSpace;
  }
  if (cp < 0x80) {
    if ((cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z')) return CharClass::kLetter;
    if (cp >= '0' && cp <= '9') return CharClass::kDigit;
    return CharClass::kPunct;
  }
  struct Range {
    std::int32_t lo, hi;
  };
  static constexpr Range kPunctRanges[] = {
      {0x0080, 0x00BF},  // C1 controls, Latin-1 punctuation and symbols
      {0x00D7, 0x00D7},  {0x00F7, 0x00F7},
      {0x2000, 0x206F},  // general punctuation
      {0x20A0, 0x20CF},  // currency
      {0x2190, 0x2BFF},  // arrows, math operators, technical, shapes
      {0x3000, 0x303F},  // CJK symbols and punctuation
      {0xFE30, 0xFE6F},  {0xFF00, 0xFF0F}, {0xFF1A, 0xFF20},
      {0xFF3B, 0xFF40},  {0xFF5B, 0xFF65},
      {0xFFE0, 0xFFEF},  // fullwidth signs, includes the joiner
      {0x1F000, 0x1FAFF},
  };
  for (const auto& r : kPunctRanges) {
    if (cp >= r.lo && cp <= r.hi) return CharClass::kPunct;
  }
  return CharClass::kLetter;
}

}  // namespace minimt::utf8
