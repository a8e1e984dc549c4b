#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <future>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "minimt/dropout.hpp"
#include "minimt/serialize.hpp"
#include "minimt/vocab.hpp"

namespace minimt {

inline constexpr std::size_t kDefaultMaxLen = 50;
inline constexpr std::size_t kBpeMaxLen = 100;
inline constexpr std::size_t kDefaultBatchSize = 64;
inline constexpr std::size_t kWindowBatches = 100;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Whitespace-split sentence pair. Source tokens may carry features as
// "word|feat1|feat2"; the last n_feats '|' fields are split off.
struct RawExample {
  std::vector<std::string> src;
  std::vector<std::vector<std::string>> src_feats;  // [feature][position]
  std::vector<std::string> tgt;
};

RawExample parse_example(std::string_view src_line, std::string_view tgt_line,
                         std::size_t n_feats = 0);

// Splits "word|f1|..." into the word and exactly n_feats features.
std::vector<std::string> split_features(std::string_view token, std::size_t n_feats);

// Keep iff both sides are at most max_len tokens.
bool filter_pair(std::size_t src_len, std::size_t tgt_len, std::size_t max_len = kDefaultMaxLen);
bool filter_pair(std::span<const std::string> src, std::span<const std::string> tgt,
                 std::size_t max_len = kDefaultMaxLen);

struct Vocabs {
  Vocab src;
  Vocab tgt;
  std::vector<Vocab> feats;
};

struct Example {
  std::int64_t index = 0;  // position in the filtered corpus
  std::vector<std::int32_t> src;
  std::vector<std::vector<std::int32_t>> src_feats;
  std::vector<std::int32_t> tgt;  // without <s> and </s>
  // Copy support. Source words outside the target vocabulary get ids
  // V, V+1, ... in order of first appearance in this example; src_map gives
  // each source position's id in that extended space and tgt_ext the
  // target's.
  std::vector<std::int32_t> src_map;
  std::vector<std::int32_t> tgt_ext;
  std::int32_t n_oov = 0;
};

Example numericalize(const RawExample& raw, const Vocabs& vocabs, std::int64_t index = 0);

// Extended-vocabulary source map for one tokenized sentence; `oov_words`
// receives the out-of-vocabulary words in id order.
std::vector<std::int32_t> source_copy_map(std::span<const std::string> src, const Vocab& tgt,
                                          std::vector<std::string>* oov_words = nullptr);

struct Shard {
  std::size_t index = 0;
  std::vector<Example> examples;
};

std::vector<NamedArray> shard_to_arrays(const Shard& shard);
Shard shard_from_arrays(const std::vector<NamedArray>& arrays);
void write_shard(const std::filesystem::path& path, const Shard& shard);
Shard read_shard(const std::filesystem::path& path);

struct ShardingStats {
  std::size_t read = 0;
  std::size_t kept = 0;
  std::size_t dropped = 0;
  std::size_t shards = 0;
};

using RawShardSink = std::function<void(std::size_t index, std::vector<RawExample>&& examples)>;

// Single streaming pass over line-aligned files holding at most one shard
// in memory. Pairs failing filter_pair and pairs with an empty source are
// dropped; the rest reach `sink` in order, shard_size at a time.
ShardingStats shard_corpus(const std::filesystem::path& src_path,
                           const std::filesystem::path& tgt_path, std::size_t shard_size,
                           std::size_t max_len, std::size_t n_feats, const RawShardSink& sink);

std::vector<std::vector<RawExample>> shard_corpus(const std::filesystem::path& src_path,
                                                  const std::filesystem::path& tgt_path,
                                                  std::size_t shard_size,
                                                  std::size_t max_len = kDefaultMaxLen,
                                                  std::size_t n_feats = 0);

struct ShardManifest {
  std::vector<std::string> train_shards;  // paths relative to the manifest
  std::vector<std::size_t> train_sizes;
  std::vector<std::string> valid_shards;
  std::vector<std::size_t> valid_sizes;
  std::string src_vocab;
  std::string tgt_vocab;
  std::vector<std::string> feat_vocabs;
  std::size_t max_len = kDefaultMaxLen;
  std::size_t shard_size = 0;
  std::uint64_t seed = 0;
  bool shared_vocab = false;
  std::size_t dropped = 0;
  std::string pipeline;  // JSON object: tokenization/BPE settings, may be empty
  std::string config;    // JSON object: effective preprocessing config, may be empty

  std::string to_json() const;
  static ShardManifest from_json(std::string_view text);
};

void save_manifest(const std::filesystem::path& path, const ShardManifest& manifest);
ShardManifest load_manifest(const std::filesystem::path& path);
Vocabs load_vocabs(const std::filesystem::path& manifest_path, const ShardManifest& manifest);

// Ordered shard collection, either resident or loaded from disk on demand.
class ShardSet {
 public:
  ShardSet() = default;
  static ShardSet in_memory(std::vector<Shard> shards);
  static ShardSet from_files(std::vector<std::filesystem::path> paths);
  // kind is "train" or "valid".
  static ShardSet from_manifest(const std::filesystem::path& manifest_path,
                                const std::string& kind = "train");

  std::size_t count() const { return count_; }
  Shard load(std::size_t i) const { return loader_(i); }
  std::size_t total_examples() const;

 private:
  std::size_t count_ = 0;
  std::function<Shard(std::size_t)> loader_;
};

struct Batch {
  std::size_t batch_size = 0;  // B
  std::size_t src_len = 0;     // S_max
  std::size_t tgt_len = 0;     // T_max, counting <s> and </s>
  // Matrices are time-major: entry (t, b) sits at t * B + b.
  std::vector<std::int32_t> src;
  std::vector<std::vector<std::int32_t>> src_feats;
  std::vector<std::int32_t> tgt;
  std::vector<std::int32_t> src_map;  // -1 at padding
  std::vector<std::int32_t> tgt_ext;
  std::vector<std::uint8_t> src_mask;
  std::vector<std::uint8_t> tgt_mask;
  std::vector<std::size_t> src_lengths;
  std::vector<std::size_t> tgt_lengths;
  std::vector<std::int64_t> indices;
  std::int32_t max_oov = 0;

  // Number of predicted target tokens (everything after <s>).
  std::size_t n_tokens() const;
  bool operator==(const Batch&) const = default;
};

Batch collate(std::span<const Example* const> examples);
Batch collate(std::span<const Example> examples);

// Shuffle, stable-sort by source length, cut into batches of batch_size,
// then shuffle the batch order.
std::vector<Batch> make_batches(std::span<const Example> examples, std::size_t batch_size,
                                Rng& rng);

// Corpus order, no shuffling; used for validation and scoring.
std::vector<Batch> sequential_batches(std::span<const Example> examples, std::size_t batch_size);

// Training batch stream for one epoch. Examples are taken in corpus order
// in windows of window_batches * batch_size, each window going through
// make_batches with a generator keyed on (seed, epoch). Windows ignore
// shard boundaries, so the stream depends only on the filtered corpus. The
// next shard is read in the background while the current one is consumed.
class BatchStream {
 public:
  BatchStream(const ShardSet& shards, std::size_t batch_size, std::uint64_t seed,
              std::size_t epoch, std::size_t window_batches = kWindowBatches);
  BatchStream(const BatchStream&) = delete;
  BatchStream& operator=(const BatchStream&) = delete;

  std::optional<Batch> next();
  std::size_t emitted() const { return emitted_; }

 private:
  void fill_window();

  const ShardSet* shards_;
  std::size_t batch_size_;
  std::size_t window_examples_;
  Rng rng_;
  std::size_t next_shard_ = 0;
  std::future<Shard> pending_;
  std::vector<Example> buffer_;
  std::size_t buffer_pos_ = 0;
  std::vector<Batch> window_;
  std::size_t window_pos_ = 0;
  std::size_t emitted_ = 0;
};

std::vector<Batch> epoch_batches(const ShardSet& shards, std::size_t batch_size,
                                 std::uint64_t seed, std::size_t epoch,
                                 std::size_t window_batches = kWindowBatches);

}  // namespace minimt
