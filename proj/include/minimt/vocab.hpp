#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace minimt {

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kUnkId = 1;
inline constexpr std::int32_t kBosId = 2;
inline constexpr std::int32_t kEosId = 3;
inline constexpr std::size_t kNumReserved = 4;

inline constexpr std::string_view kPadToken = "<blank>";
inline constexpr std::string_view kUnkToken = "<unk>";
inline constexpr std::string_view kBosToken = "<s>";
inline constexpr std::string_view kEosToken = "</s>";

class VocabError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Vocab {
 public:
  // Reserved tokens only.
  Vocab();

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(std::int32_t id) const;
  std::uint64_t count(std::int32_t id) const { return counts_.at(static_cast<std::size_t>(id)); }

  // Unknown tokens map to kUnkId.
  std::int32_t id(std::string_view token) const;
  bool contains(std::string_view token) const;

  // Appends a token; a token already present is an error.
  std::int32_t add(std::string token, std::uint64_t count = 0);

  std::vector<std::int32_t> encode(std::span<const std::string> tokens) const;
  std::vector<std::string> decode(std::span<const std::int32_t> ids) const;

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::vector<std::uint64_t> counts_;
  std::unordered_map<std::string, std::int32_t> index_;
};

// Accumulates token frequencies in first-occurrence order so the vocabulary
// can be built from a streaming pass.
class VocabCounter {
 public:
  void add(std::string_view token);
  void add(std::span<const std::string> tokens);
  std::size_t distinct() const { return order_.size(); }
  bool empty() const { return order_.empty(); }
  Vocab build(std::size_t max_size, std::uint64_t min_freq) const;

 private:
  std::vector<std::pair<std::string, std::uint64_t>> order_;
  std::unordered_map<std::string, std::size_t> slot_;
};

// Reserved tokens followed by the most frequent tokens, frequency ties
// broken by first occurrence. Literal reserved tokens in the corpus are
// not counted.
Vocab build_vocab(std::span<const std::vector<std::string>> corpus, std::size_t max_size,
                  std::uint64_t min_freq = 1);

// "token<TAB>count" per line; the id is the line index.
std::string vocab_to_text(const Vocab& vocab);
Vocab vocab_from_text(std::string_view text);
void save_vocab(const std::filesystem::path& path, const Vocab& vocab);
Vocab load_vocab(const std::filesystem::path& path);

}  // namespace minimt
