#include "minimt/vocab.hpp"

#include <algorithm>
#include <charconv>
#include <numeric>

#include "minimt/io.hpp"

namespace minimt {

namespace {

bool is_reserved(std::string_view token) {
  return token == kPadToken || token == kUnkToken || token == kBosToken || token == kEosToken;
}

}  // namespace

Vocab::Vocab() {
  for (auto t : {kPadToken, kUnkToken, kBosToken, kEosToken}) add(std::string(t));
}

const std::string& Vocab::token(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw VocabError("vocab id out of range: " + std::to_string(id));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::int32_t Vocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnkId : it->second;
}

bool Vocab::contains(std::string_view token) const {
  return index_.count(std::string(token)) > 0;
}

std::int32_t Vocab::add(std::string token, std::uint64_t count) {
  if (token.empty()) throw VocabError("empty vocab token");
  const auto id = static_cast<std::int32_t>(tokens_.size());
  if (!index_.emplace(token, id).second) throw VocabError("duplicate vocab token: " + token);
  tokens_.push_back(std::move(token));
  counts_.push_back(count);
  return id;
}

std::vector<std::int32_t> Vocab::encode(std::span<const std::string> tokens) const {
  std::vector<std::int32_t> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocab::decode(std::span<const std::int32_t> ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (auto i : ids) out.push_back(token(i));
  return out;
}

void VocabCounter::add(std::string_view token) {
  if (token.empty() || is_reserved(token)) return;
  auto [it, fresh] = slot_.try_emplace(std::string(token), order_.size());
  if (fresh) order_.emplace_back(std::string(token), 0);
  ++order_[it->second].second;
}

void VocabCounter::add(std::span<const std::string> tokens) {
  for (const auto& t : tokens) add(t);
}

Vocab VocabCounter::build(std::size_t max_size, std::uint64_t min_freq) const {
  if (max_size < kNumReserved) throw VocabError("vocab max_size must be at least 4");
  std::vector<std::size_t> idx(order_.size());
  std::iota(idx.begin(), idx.end(), 0);
  // Stable sort keeps first-occurrence order among equal counts.
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return order_[a].second > order_[b].second;
  });
  Vocab vocab;
  for (auto i : idx) {
    if (vocab.size() >= max_size || order_[i].second < min_freq) break;
    vocab.add(order_[i].first, order_[i].second);
  }
  return vocab;
}

Vocab build_vocab(std::span<const std::vector<std::string>> corpus, std::size_t max_size,
                  std::uint64_t min_freq) {
  if (corpus.empty()) throw VocabError("cannot build a vocabulary from an empty corpus");
  VocabCounter counter;
  for (const auto& line : corpus) counter.add(line);
  return counter.build(max_size, min_freq);
}

std::string vocab_to_text(const Vocab& vocab) {
  std::string out;
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    out += vocab.tokens()[i];
    out += '\t';
    out += std::to_string(vocab.count(static_cast<std::int32_t>(i)));
    out += '\n';
  }
  return out;
}

Vocab vocab_from_text(std::string_view text) {
  Vocab vocab;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    const auto tab = line.rfind('\t');
    if (tab == std::string_view::npos || tab == 0) {
      throw VocabError("malformed vocab line " + std::to_string(line_no + 1));
    }
    std::string_view tok = line.substr(0, tab);
    std::uint64_t count = 0;
    auto digits = line.substr(tab + 1);
    auto [p, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), count);
    if (ec != std::errc() || p != digits.data() + digits.size()) {
      throw VocabError("bad count on vocab line " + std::to_string(line_no + 1));
    }
    if (line_no < kNumReserved) {
      if (tok != vocab.tokens()[line_no]) {
        throw VocabError("vocab line " + std::to_string(line_no + 1) + " must be " +
                         vocab.tokens()[line_no]);
      }
    } else {
      vocab.add(std::string(tok), count);
    }
    ++line_no;
  }
  if (line_no < kNumReserved) throw VocabError("vocab file is missing reserved tokens");
  return vocab;
}

void save_vocab(const std::filesystem::path& path, const Vocab& vocab) {
  write_file_atomic(path, vocab_to_text(vocab));
}

Vocab load_vocab(const std::filesystem::path& path) { return vocab_from_text(read_file(path)); }

}  // namespace minimt
