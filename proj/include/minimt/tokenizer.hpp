#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace minimt {

inline constexpr std::string_view kDefaultJoiner = "\xEF\xBF\xAD";  // U+FFED

enum class TokenizeMode { kAggressive };

struct TokenizerOptions {
  std::string joiner{kDefaultJoiner};
  TokenizeMode mode = TokenizeMode::kAggressive;
  bool case_preserving = true;
};

class TokenizeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Splits on whitespace and at letter/digit/punctuation boundaries; every
// punctuation character is its own token. Where two tokens were adjacent in
// the input, the joiner marks the side to glue: a punctuation token followed
// by a non-punctuation token gets a trailing joiner, otherwise the following
// token gets a leading one.
std::vector<std::string> tokenize(std::string_view line,
                                  const TokenizerOptions& opts = {});

// Inverse of tokenize on single-spaced input. Tokens are separated by one
// space unless either side carries a joiner at the shared edge.
std::string detokenize(std::span<const std::string> tokens,
                       const TokenizerOptions& opts = {});

bool has_leading_joiner(std::string_view token, std::string_view joiner);
bool has_trailing_joiner(std::string_view token, std::string_view joiner);
std::string_view strip_joiners(std::string_view token, std::string_view joiner);

std::vector<std::string> split_whitespace(std::string_view line);
std::string join_tokens(std::span<const std::string> tokens);

}  // namespace minimt
