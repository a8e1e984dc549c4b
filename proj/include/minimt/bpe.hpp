#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "minimt/tokenizer.hpp"

namespace minimt {

// Internal end-of-word symbol. 0xFF never occurs in UTF-8, so it cannot
// collide with text and sorts after every real symbol. Model files spell it
// "</w>".
inline constexpr std::string_view kEndOfWord = "\xFF";
inline constexpr std::string_view kBpeHeader = "#version: minimt-bpe-1";

class BpeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using SymbolPair = std::pair<std::string, std::string>;

class BpeModel {
 public:
  BpeModel() = default;
  explicit BpeModel(std::vector<SymbolPair> merges, std::string fingerprint = {});

  const std::vector<SymbolPair>& merges() const { return merges_; }
  const std::string& fingerprint() const { return fingerprint_; }
  std::size_t size() const { return merges_.size(); }

  // Position of the pair in learning order, or -1.
  long rank(const std::string& left, const std::string& right) const;

 private:
  std::vector<SymbolPair> merges_;
  std::string fingerprint_;
  std::map<SymbolPair, long> ranks_;
};

// Greedy merge learning over the word-frequency table of `corpus`. Joiner
// markers are stripped before counting. Frequency ties go to the
// lexicographically smallest pair; learning stops early once no pair occurs
// at least twice.
BpeModel bpe_learn(std::span<const std::string> corpus, std::size_t n_merges,
                   std::string_view joiner = kDefaultJoiner);

// Segments one joiner-free token. Every piece but the last carries `marker`
// as a continuation suffix.
std::vector<std::string> bpe_apply(const BpeModel& model, std::string_view token,
                                   std::string_view marker = kDefaultJoiner);

// Segments tokenizer output, keeping each token's own joiners on its first
// and last piece.
std::vector<std::string> bpe_segment(const BpeModel& model,
                                     std::span<const std::string> tokens,
                                     std::string_view joiner = kDefaultJoiner);

// Glues pieces whose continuation marker joins them to the next piece. Only
// meaningful for untokenized (whitespace-split) text; tokenized text goes
// straight to detokenize.
std::vector<std::string> bpe_merge_pieces(std::span<const std::string> pieces,
                                          std::string_view marker = kDefaultJoiner);

std::string bpe_to_text(const BpeModel& model);
BpeModel bpe_from_text(std::string_view text);
void save_bpe(const std::filesystem::path& path, const BpeModel& model);
BpeModel load_bpe(const std::filesystem::path& path);

}  // namespace minimt
