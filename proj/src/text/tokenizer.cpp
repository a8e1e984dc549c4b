#include "minimt/tokenizer.hpp"

#include "minimt/utf8.hpp"

namespace minimt {

namespace {
std::string ascii_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}
}  // namespace

bool has_leading_joiner(std::string_view token, std::string_view joiner) {
  return token.size() > joiner.size() && token.substr(0, joiner.size()) == joiner;
}

bool has_trailing_joiner(std::string_view token, std::string_view joiner) {
  return token.size() > joiner.size() &&
         token.substr(token.size() - joiner.size()) == joiner;
}

std::string_view strip_joiners(std::string_view token, std::string_view joiner) {
  if (has_leading_joiner(token, joiner)) token.remove_prefix(joiner.size());
  if (has_trailing_joiner(token, joiner)) token.remove_suffix(joiner.size());
  return token;
}

std::vector<std::string> tokenize(std::string_view line,
                                  const TokenizerOptions& opts) {
  if (opts.joiner.empty()) throw TokenizeError("joiner marker must be non-empty");
  if (line.find(opts.joiner) != std::string_view::npos) {
    throw TokenizeError("input already contains the joiner marker");
  }
  if (line.find('\n') != std::string_view::npos) {
    throw TokenizeError("input must be a single line");
  }

  std::vector<std::string> tokens;
  std::string current;
  utf8::CharClass current_class = utf8::CharClass::kSpace;
  bool leading_joiner = false;

  auto flush = [&](bool trailing_joiner) {
    if (current.empty()) return;
    std::string tok;
    if (leading_joiner) tok += opts.joiner;
    tok += opts.case_preserving ? current : ascii_lower(current);
    if (trailing_joiner) tok += opts.joiner;
    tokens.push_back(std::move(tok));
    current.clear();
    leading_joiner = false;
  };

  for (const auto& u : utf8::decode(line)) {
    const auto cls = utf8::classify(u.code_point);
    const auto text = line.substr(u.offset, u.length);
    if (cls == utf8::CharClass::kSpace) {
      flush(false);
      current_class = cls;
      continue;
    }
    if (current.empty()) {
      current = text;
      current_class = cls;
      continue;
    }
    if (cls == current_class && cls != utf8::CharClass::kPunct) {
      current += text;
      continue;
    }
    // Boundary with no whitespace in between.
    const bool glue_on_left =
        current_class == utf8::CharClass::kPunct && cls != utf8::CharClass::kPunct;
    flush(glue_on_left);
    leading_joiner = !glue_on_left;
    current = text;
    current_class = cls;
  }
  flush(false);
  return tokens;
}

std::string detokenize(std::span<const std::string> tokens,
                       const TokenizerOptions& opts) {
  std::string out;
  bool glue_next = true;
  for (const auto& tok : tokens) {
    const bool lead = has_leading_joiner(tok, opts.joiner);
    if (!glue_next && !lead) out += ' ';
    out += strip_joiners(tok, opts.joiner);
    glue_next = has_trailing_joiner(tok, opts.joiner);
  }
  return out;
}

std::vector<std::string> split_whitespace(std::string_view line) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.emplace_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

std::string join_tokens(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

}  // namespace minimt
