#include "minimt/data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include "json.hpp"
#include "minimt/io.hpp"
#include "minimt/tokenizer.hpp"

namespace minimt {

using json = nlohmann::json;

std::vector<std::string> split_features(std::string_view token, std::size_t n_feats) {
  std::vector<std::string> parts(n_feats + 1);
  std::size_t end = token.size();
  for (std::size_t k = n_feats; k > 0; --k) {
    const auto bar = end == 0 ? std::string_view::npos : token.rfind('|', end - 1);
    if (bar == std::string_view::npos) {
      throw DataError("token '" + std::string(token) + "' lacks " + std::to_string(n_feats) +
                      " features");
    }
    parts[k] = std::string(token.substr(bar + 1, end - bar - 1));
    end = bar;
  }
  parts[0] = std::string(token.substr(0, end));
  for (const auto& p : parts) {
    if (p.empty()) throw DataError("empty field in featured token '" + std::string(token) + "'");
  }
  return parts;
}

RawExample parse_example(std::string_view src_line, std::string_view tgt_line,
                         std::size_t n_feats) {
  RawExample ex;
  ex.tgt = split_whitespace(tgt_line);
  auto src = split_whitespace(src_line);
  if (n_feats == 0) {
    ex.src = std::move(src);
    return ex;
  }
  ex.src_feats.resize(n_feats);
  for (const auto& tok : src) {
    auto parts = split_features(tok, n_feats);
    ex.src.push_back(std::move(parts[0]));
    for (std::size_t k = 0; k < n_feats; ++k) ex.src_feats[k].push_back(std::move(parts[k + 1]));
  }
  return ex;
}

bool filter_pair(std::size_t src_len, std::size_t tgt_len, std::size_t max_len) {
  return src_len <= max_len && tgt_len <= max_len;
}

bool filter_pair(std::span<const std::string> src, std::span<const std::string> tgt,
                 std::size_t max_len) {
  return filter_pair(src.size(), tgt.size(), max_len);
}

std::vector<std::int32_t> source_copy_map(std::span<const std::string> src, const Vocab& tgt,
                                          std::vector<std::string>* oov_words) {
  std::unordered_map<std::string, std::int32_t> local;
  std::vector<std::int32_t> map;
  map.reserve(src.size());
  const auto base = static_cast<std::int32_t>(tgt.size());
  for (const auto& w : src) {
    if (tgt.contains(w)) {
      map.push_back(tgt.id(w));
      continue;
    }
    auto [it, fresh] = local.try_emplace(w, base + static_cast<std::int32_t>(local.size()));
    if (fresh && oov_words) oov_words->push_back(w);
    map.push_back(it->second);
  }
  return map;
}

Example numericalize(const RawExample& raw, const Vocabs& vocabs, std::int64_t index) {
  if (raw.src_feats.size() != vocabs.feats.size()) {
    throw DataError("example has " + std::to_string(raw.src_feats.size()) +
                    " source features, vocabularies expect " +
                    std::to_string(vocabs.feats.size()));
  }
  Example ex;
  ex.index = index;
  ex.src = vocabs.src.encode(raw.src);
  for (std::size_t k = 0; k < raw.src_feats.size(); ++k) {
    ex.src_feats.push_back(vocabs.feats[k].encode(raw.src_feats[k]));
  }
  ex.tgt = vocabs.tgt.encode(raw.tgt);
  std::vector<std::string> oov;
  ex.src_map = source_copy_map(raw.src, vocabs.tgt, &oov);
  ex.n_oov = static_cast<std::int32_t>(oov.size());
  const auto base = static_cast<std::int32_t>(vocabs.tgt.size());
  ex.tgt_ext = ex.tgt;
  for (std::size_t t = 0; t < raw.tgt.size(); ++t) {
    if (ex.tgt[t] != kUnkId) continue;
    auto it = std::find(oov.begin(), oov.end(), raw.tgt[t]);
    if (it != oov.end()) ex.tgt_ext[t] = base + static_cast<std::int32_t>(it - oov.begin());
  }
  return ex;
}

// ---------------------------------------------------------------------------
// Shard files

namespace {

template <typename Get>
void flatten(const std::vector<Example>& exs, Get get, std::vector<std::int32_t>& flat,
             std::vector<std::int32_t>* offsets) {
  if (offsets) offsets->push_back(0);
  for (const auto& ex : exs) {
    const auto& v = get(ex);
    flat.insert(flat.end(), v.begin(), v.end());
    if (offsets) offsets->push_back(static_cast<std::int32_t>(flat.size()));
  }
}

std::vector<std::int32_t> slice(const std::vector<std::int32_t>& flat,
                                const std::vector<std::int32_t>& offsets, std::size_t i) {
  return {flat.begin() + offsets[i], flat.begin() + offsets[i + 1]};
}

}  // namespace

std::vector<NamedArray> shard_to_arrays(const Shard& shard) {
  const auto& exs = shard.examples;
  std::vector<std::int32_t> index, n_oov, src, src_off, tgt, tgt_off, src_map, tgt_ext;
  for (const auto& ex : exs) {
    index.push_back(static_cast<std::int32_t>(ex.index));
    n_oov.push_back(ex.n_oov);
  }
  flatten(exs, [](const Example& e) -> const auto& { return e.src; }, src, &src_off);
  flatten(exs, [](const Example& e) -> const auto& { return e.src_map; }, src_map, nullptr);
  flatten(exs, [](const Example& e) -> const auto& { return e.tgt; }, tgt, &tgt_off);
  flatten(exs, [](const Example& e) -> const auto& { return e.tgt_ext; }, tgt_ext, nullptr);
  const std::size_t n_feats = exs.empty() ? 0 : exs.front().src_feats.size();

  std::vector<NamedArray> arrays;
  arrays.push_back(NamedArray::from_ints(
      "meta", {static_cast<std::int32_t>(shard.index), static_cast<std::int32_t>(n_feats)}));
  arrays.push_back(NamedArray::from_ints("index", std::move(index)));
  arrays.push_back(NamedArray::from_ints("n_oov", std::move(n_oov)));
  arrays.push_back(NamedArray::from_ints("src_offsets", std::move(src_off)));
  arrays.push_back(NamedArray::from_ints("src", std::move(src)));
  arrays.push_back(NamedArray::from_ints("src_map", std::move(src_map)));
  arrays.push_back(NamedArray::from_ints("tgt_offsets", std::move(tgt_off)));
  arrays.push_back(NamedArray::from_ints("tgt", std::move(tgt)));
  arrays.push_back(NamedArray::from_ints("tgt_ext", std::move(tgt_ext)));
  for (std::size_t k = 0; k < n_feats; ++k) {
    std::vector<std::int32_t> feat;
    flatten(exs, [k](const Example& e) -> const auto& { return e.src_feats[k]; }, feat, nullptr);
    arrays.push_back(NamedArray::from_ints("feat" + std::to_string(k), std::move(feat)));
  }
  return arrays;
}

Shard shard_from_arrays(const std::vector<NamedArray>& arrays) {
  const auto meta = find_array(arrays, "meta").ints();
  if (meta.size() != 2) throw FormatError("shard meta array must hold 2 values");
  Shard shard;
  shard.index = static_cast<std::size_t>(meta[0]);
  const auto n_feats = static_cast<std::size_t>(meta[1]);
  const auto index = find_array(arrays, "index").ints();
  const auto n_oov = find_array(arrays, "n_oov").ints();
  const auto src_off = find_array(arrays, "src_offsets").ints();
  const auto tgt_off = find_array(arrays, "tgt_offsets").ints();
  const auto src = find_array(arrays, "src").ints();
  const auto src_map = find_array(arrays, "src_map").ints();
  const auto tgt = find_array(arrays, "tgt").ints();
  const auto tgt_ext = find_array(arrays, "tgt_ext").ints();
  std::vector<std::vector<std::int32_t>> feats;
  for (std::size_t k = 0; k < n_feats; ++k) {
    feats.push_back(find_array(arrays, "feat" + std::to_string(k)).ints());
  }
  const std::size_t n = index.size();
  const auto bad_offsets = [n](const std::vector<std::int32_t>& off, std::size_t total) {
    if (off.size() != n + 1 || off.front() != 0 ||
        static_cast<std::size_t>(off.back()) != total) {
      return true;
    }
    return !std::is_sorted(off.begin(), off.end());
  };
  if (n_oov.size() != n || bad_offsets(src_off, src.size()) ||
      bad_offsets(tgt_off, tgt.size()) || src_map.size() != src.size() ||
      tgt_ext.size() != tgt.size()) {
    throw FormatError("inconsistent shard arrays");
  }
  for (const auto& f : feats) {
    if (f.size() != src.size()) throw FormatError("inconsistent shard feature arrays");
  }
  shard.examples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& ex = shard.examples[i];
    ex.index = index[i];
    ex.n_oov = n_oov[i];
    ex.src = slice(src, src_off, i);
    ex.src_map = slice(src_map, src_off, i);
    ex.tgt = slice(tgt, tgt_off, i);
    ex.tgt_ext = slice(tgt_ext, tgt_off, i);
    for (const auto& f : feats) ex.src_feats.push_back(slice(f, src_off, i));
  }
  return shard;
}

void write_shard(const std::filesystem::path& path, const Shard& shard) {
  write_container(path, shard_to_arrays(shard));
}

Shard read_shard(const std::filesystem::path& path) {
  return shard_from_arrays(read_container(path));
}

// ---------------------------------------------------------------------------
// Sharding

ShardingStats shard_corpus(const std::filesystem::path& src_path,
                           const std::filesystem::path& tgt_path, std::size_t shard_size,
                           std::size_t max_len, std::size_t n_feats, const RawShardSink& sink) {
  if (shard_size == 0) throw DataError("shard_size must be positive");
  std::ifstream src(src_path, std::ios::binary);
  std::ifstream tgt(tgt_path, std::ios::binary);
  if (!src) throw DataError("cannot open " + src_path.string());
  if (!tgt) throw DataError("cannot open " + tgt_path.string());

  ShardingStats stats;
  std::vector<RawExample> current;
  std::string s_line, t_line;
  while (true) {
    const bool has_s = static_cast<bool>(std::getline(src, s_line));
    const bool has_t = static_cast<bool>(std::getline(tgt, t_line));
    if (has_s != has_t) {
      const auto& longer = has_s ? src_path : tgt_path;
      const auto& shorter = has_s ? tgt_path : src_path;
      throw DataError("line-count mismatch: line " + std::to_string(stats.read + 1) + " exists in " +
                      longer.string() + " but not in " + shorter.string());
    }
    if (!has_s) break;
    ++stats.read;
    RawExample ex = parse_example(s_line, t_line, n_feats);
    if (ex.src.empty() || !filter_pair(ex.src, ex.tgt, max_len)) {
      ++stats.dropped;
      continue;
    }
    ++stats.kept;
    current.push_back(std::move(ex));
    if (current.size() == shard_size) {
      sink(stats.shards++, std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) sink(stats.shards++, std::move(current));
  return stats;
}

std::vector<std::vector<RawExample>> shard_corpus(const std::filesystem::path& src_path,
                                                  const std::filesystem::path& tgt_path,
                                                  std::size_t shard_size, std::size_t max_len,
                                                  std::size_t n_feats) {
  std::vector<std::vector<RawExample>> shards;
  shard_corpus(src_path, tgt_path, shard_size, max_len, n_feats,
               [&](std::size_t, std::vector<RawExample>&& exs) {
                 shards.push_back(std::move(exs));
               });
  return shards;
}

// ---------------------------------------------------------------------------
// Manifest

std::string ShardManifest::to_json() const {
  json j;
  j["version"] = 1;
  j["shard_count"] = train_shards.size();
  j["train_shards"] = train_shards;
  j["train_sizes"] = train_sizes;
  j["valid_shards"] = valid_shards;
  j["valid_sizes"] = valid_sizes;
  j["src_vocab"] = src_vocab;
  j["tgt_vocab"] = tgt_vocab;
  j["feat_vocabs"] = feat_vocabs;
  j["max_len"] = max_len;
  j["shard_size"] = shard_size;
  j["seed"] = seed;
  j["shared_vocab"] = shared_vocab;
  j["dropped"] = dropped;
  if (!pipeline.empty()) j["pipeline"] = json::parse(pipeline);
  if (!config.empty()) j["config"] = json::parse(config);
  return j.dump(2) + "\n";
}

ShardManifest ShardManifest::from_json(std::string_view text) {
  ShardManifest m;
  try {
    const json j = json::parse(text);
    if (j.at("version").get<int>() != 1) throw DataError("unsupported manifest version");
    j.at("train_shards").get_to(m.train_shards);
    j.at("train_sizes").get_to(m.train_sizes);
    j.at("valid_shards").get_to(m.valid_shards);
    j.at("valid_sizes").get_to(m.valid_sizes);
    j.at("src_vocab").get_to(m.src_vocab);
    j.at("tgt_vocab").get_to(m.tgt_vocab);
    j.at("feat_vocabs").get_to(m.feat_vocabs);
    j.at("max_len").get_to(m.max_len);
    j.at("shard_size").get_to(m.shard_size);
    j.at("seed").get_to(m.seed);
    m.shared_vocab = j.value("shared_vocab", false);
    m.dropped = j.value("dropped", std::size_t{0});
    if (j.contains("pipeline")) m.pipeline = j.at("pipeline").dump();
    if (j.contains("config")) m.config = j.at("config").dump();
    if (j.at("shard_count").get<std::size_t>() != m.train_shards.size()) {
      throw DataError("manifest shard_count disagrees with its shard list");
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed shard manifest: ") + e.what());
  }
  if (m.train_sizes.size() != m.train_shards.size() ||
      m.valid_sizes.size() != m.valid_shards.size()) {
    throw DataError("manifest sizes disagree with its shard lists");
  }
  return m;
}

void save_manifest(const std::filesystem::path& path, const ShardManifest& manifest) {
  write_file_atomic(path, manifest.to_json());
}

ShardManifest load_manifest(const std::filesystem::path& path) {
  return ShardManifest::from_json(read_file(path));
}

Vocabs load_vocabs(const std::filesystem::path& manifest_path, const ShardManifest& manifest) {
  const auto dir = manifest_path.parent_path();
  Vocabs v;
  v.src = load_vocab(dir / manifest.src_vocab);
  v.tgt = load_vocab(dir / manifest.tgt_vocab);
  for (const auto& f : manifest.feat_vocabs) v.feats.push_back(load_vocab(dir / f));
  return v;
}

ShardSet ShardSet::in_memory(std::vector<Shard> shards) {
  auto held = std::make_shared<std::vector<Shard>>(std::move(shards));
  ShardSet set;
  set.count_ = held->size();
  set.loader_ = [held](std::size_t i) { return held->at(i); };
  return set;
}

ShardSet ShardSet::from_files(std::vector<std::filesystem::path> paths) {
  ShardSet set;
  set.count_ = paths.size();
  set.loader_ = [paths = std::move(paths)](std::size_t i) { return read_shard(paths.at(i)); };
  return set;
}

ShardSet ShardSet::from_manifest(const std::filesystem::path& manifest_path,
                                 const std::string& kind) {
  const auto m = load_manifest(manifest_path);
  const auto dir = manifest_path.parent_path();
  const std::vector<std::string>* names = nullptr;
  if (kind == "train") {
    names = &m.train_shards;
  } else if (kind == "valid") {
    names = &m.valid_shards;
  } else {
    throw DataError("unknown shard kind: " + kind);
  }
  std::vector<std::filesystem::path> paths;
  for (const auto& n : *names) paths.push_back(dir / n);
  return from_files(std::move(paths));
}

std::size_t ShardSet::total_examples() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < count_; ++i) n += load(i).examples.size();
  return n;
}

// ---------------------------------------------------------------------------
// Batching

std::size_t Batch::n_tokens() const {
  std::size_t n = 0;
  for (auto len : tgt_lengths) n += len - 1;
  return n;
}

Batch collate(std::span<const Example* const> examples) {
  if (examples.empty()) throw DataError("cannot collate an empty batch");
  Batch b;
  const std::size_t B = examples.size();
  b.batch_size = B;
  const std::size_t n_feats = examples.front()->src_feats.size();
  for (const auto* ex : examples) {
    if (ex->src.empty()) throw DataError("example with empty source");
    if (ex->src_feats.size() != n_feats) throw DataError("examples disagree on feature count");
    b.src_len = std::max(b.src_len, ex->src.size());
    b.tgt_len = std::max(b.tgt_len, ex->tgt.size() + 2);
    b.max_oov = std::max(b.max_oov, ex->n_oov);
  }
  const std::size_t S = b.src_len, T = b.tgt_len;
  b.src.assign(S * B, kPadId);
  b.src_map.assign(S * B, -1);
  b.src_mask.assign(S * B, 0);
  b.src_feats.assign(n_feats, std::vector<std::int32_t>(S * B, kPadId));
  b.tgt.assign(T * B, kPadId);
  b.tgt_ext.assign(T * B, kPadId);
  b.tgt_mask.assign(T * B, 0);
  for (std::size_t j = 0; j < B; ++j) {
    const Example& ex = *examples[j];
    b.indices.push_back(ex.index);
    b.src_lengths.push_back(ex.src.size());
    b.tgt_lengths.push_back(ex.tgt.size() + 2);
    for (std::size_t s = 0; s < ex.src.size(); ++s) {
      b.src[s * B + j] = ex.src[s];
      b.src_map[s * B + j] = ex.src_map[s];
      b.src_mask[s * B + j] = 1;
      for (std::size_t k = 0; k < n_feats; ++k) b.src_feats[k][s * B + j] = ex.src_feats[k][s];
    }
    const std::size_t len = ex.tgt.size() + 2;
    for (std::size_t t = 0; t < len; ++t) {
      std::int32_t id = kBosId, ext = kBosId;
      if (t == len - 1) {
        id = ext = kEosId;
      } else if (t > 0) {
        id = ex.tgt[t - 1];
        ext = ex.tgt_ext[t - 1];
      }
      b.tgt[t * B + j] = id;
      b.tgt_ext[t * B + j] = ext;
      b.tgt_mask[t * B + j] = 1;
    }
  }
  return b;
}

Batch collate(std::span<const Example> examples) {
  std::vector<const Example*> ptrs;
  for (const auto& ex : examples) ptrs.push_back(&ex);
  return collate(std::span<const Example* const>(ptrs));
}

std::vector<Batch> make_batches(std::span<const Example> examples, std::size_t batch_size,
                                Rng& rng) {
  if (batch_size == 0) throw DataError("batch_size must be positive");
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  shuffle_in_place(order, rng);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return examples[a].src.size() < examples[b].src.size();
  });
  std::vector<Batch> batches;
  std::vector<const Example*> chunk;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    chunk.clear();
    for (std::size_t k = i; k < std::min(order.size(), i + batch_size); ++k) {
      chunk.push_back(&examples[order[k]]);
    }
    batches.push_back(collate(std::span<const Example* const>(chunk)));
  }
  shuffle_in_place(batches, rng);
  return batches;
}

std::vector<Batch> sequential_batches(std::span<const Example> examples,
                                      std::size_t batch_size) {
  if (batch_size == 0) throw DataError("batch_size must be positive");
  std::vector<Batch> batches;
  for (std::size_t i = 0; i < examples.size(); i += batch_size) {
    batches.push_back(
        collate(examples.subspan(i, std::min(batch_size, examples.size() - i))));
  }
  return batches;
}

BatchStream::BatchStream(const ShardSet& shards, std::size_t batch_size, std::uint64_t seed,
                         std::size_t epoch, std::size_t window_batches)
    : shards_(&shards),
      batch_size_(batch_size),
      window_examples_(batch_size * window_batches),
      rng_(make_rng({seed, epoch})) {
  if (batch_size == 0 || window_batches == 0) {
    throw DataError("batch_size and window size must be positive");
  }
  if (shards_->count() > 0) {
    pending_ = std::async(std::launch::async, [this] { return shards_->load(0); });
    next_shard_ = 1;
  }
}

void BatchStream::fill_window() {
  std::vector<Example> window;
  while (window.size() < window_examples_) {
    if (buffer_pos_ == buffer_.size()) {
      if (!pending_.valid()) break;
      buffer_ = pending_.get().examples;
      buffer_pos_ = 0;
      if (next_shard_ < shards_->count()) {
        const std::size_t i = next_shard_++;
        pending_ = std::async(std::launch::async, [this, i] { return shards_->load(i); });
      }
      continue;
    }
    const std::size_t take =
        std::min(window_examples_ - window.size(), buffer_.size() - buffer_pos_);
    auto first = buffer_.begin() + static_cast<std::ptrdiff_t>(buffer_pos_);
    window.insert(window.end(), std::make_move_iterator(first),
                  std::make_move_iterator(first + static_cast<std::ptrdiff_t>(take)));
    buffer_pos_ += take;
  }
  window_ = window.empty() ? std::vector<Batch>{} : make_batches(window, batch_size_, rng_);
  window_pos_ = 0;
}

std::optional<Batch> BatchStream::next() {
  if (window_pos_ == window_.size()) {
    fill_window();
    if (window_.empty()) return std::nullopt;
  }
  ++emitted_;
  return std::move(window_[window_pos_++]);
}

std::vector<Batch> epoch_batches(const ShardSet& shards, std::size_t batch_size,
                                 std::uint64_t seed, std::size_t epoch,
                                 std::size_t window_batches) {
  BatchStream stream(shards, batch_size, seed, epoch, window_batches);
  std::vector<Batch> out;
  while (auto b = stream.next()) out.push_back(std::move(*b));
  return out;
}

}  // namespace minimt
