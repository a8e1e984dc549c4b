#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "minimt/data.hpp"
#include "minimt/io.hpp"
#include "minimt/vocab.hpp"

using namespace minimt;
using Tokens = std::vector<std::string>;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("minimt_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_lines(const fs::path& p, const std::vector<std::string>& lines) {
  std::ofstream out(p, std::ios::binary);
  for (const auto& l : lines) out << l << '\n';
}

Tokens reserved() { return {"<blank>", "<unk>", "<s>", "</s>"}; }

Tokens with_reserved(Tokens extra) {
  Tokens t = reserved();
  t.insert(t.end(), extra.begin(), extra.end());
  return t;
}

// Synthetic aligned corpus: sentence i has length 1 + (i * 7) % 13.
std::vector<RawExample> synthetic(std::size_t n) {
  std::vector<RawExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    RawExample ex;
    const std::size_t len = 1 + (i * 7) % 13;
    for (std::size_t k = 0; k < len; ++k) {
      ex.src.push_back("w" + std::to_string((i + k) % 17));
      ex.tgt.push_back("v" + std::to_string((i * 3 + k) % 19));
    }
    out.push_back(std::move(ex));
  }
  return out;
}

Vocabs synthetic_vocabs(const std::vector<RawExample>& exs) {
  VocabCounter s, t;
  for (const auto& ex : exs) {
    s.add(ex.src);
    t.add(ex.tgt);
  }
  return {s.build(50, 1), t.build(15, 1), {}};
}

std::vector<Shard> make_shards(const std::vector<RawExample>& raw, const Vocabs& v,
                               std::size_t shard_size) {
  std::vector<Shard> shards;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (i % shard_size == 0) shards.push_back({shards.size(), {}});
    shards.back().examples.push_back(numericalize(raw[i], v, static_cast<std::int64_t>(i)));
  }
  return shards;
}

}  // namespace

TEST_CASE("build_vocab orders by frequency then first occurrence") {
  CHECK(build_vocab(std::vector<Tokens>{{"a", "a", "b"}}, 10).tokens() ==
        with_reserved({"a", "b"}));
  CHECK(build_vocab(std::vector<Tokens>{{"a", "a", "b"}}, 4).tokens() == reserved());
  CHECK(build_vocab(std::vector<Tokens>{{"b", "a", "a", "b"}}, 10).tokens() ==
        with_reserved({"b", "a"}));
  CHECK(build_vocab(std::vector<Tokens>{{"x", "y", "y"}, {"z", "z", "x", "x"}}, 10).tokens() ==
        with_reserved({"x", "y", "z"}));
}

TEST_CASE("build_vocab limits and errors") {
  std::vector<Tokens> corpus = {{"a", "a", "a", "b", "b", "c"}};
  CHECK(build_vocab(corpus, 5).tokens() == with_reserved({"a"}));
  CHECK(build_vocab(corpus, 10, 2).tokens() == with_reserved({"a", "b"}));
  CHECK_THROWS_AS(build_vocab(std::vector<Tokens>{}, 10), VocabError);
  CHECK_THROWS_AS(build_vocab(corpus, 3), VocabError);
  // Literal reserved tokens in data are not double counted.
  CHECK(build_vocab(std::vector<Tokens>{{"<unk>", "q"}}, 10).tokens() == with_reserved({"q"}));
}

TEST_CASE("vocab lookup and numericalize identity") {
  Vocab v = build_vocab(std::vector<Tokens>{{"le", "chat", "le"}}, 10);
  CHECK(v.id("le") == 4);
  CHECK(v.id("chien") == kUnkId);
  Tokens words = {"chat", "le", "<s>", "</s>"};
  CHECK(v.decode(v.encode(words)) == words);
  CHECK_THROWS_AS(v.token(99), VocabError);
  CHECK_THROWS_AS(v.add("le"), VocabError);
  CHECK(v.count(4) == 2);
}

TEST_CASE("vocab file format") {
  Vocab v = build_vocab(std::vector<Tokens>{{"b", "a", "a", "b", "c"}}, 10);
  const std::string text = vocab_to_text(v);
  CHECK(text == "<blank>\t0\n<unk>\t0\n<s>\t0\n</s>\t0\nb\t2\na\t2\nc\t1\n");
  CHECK(vocab_from_text(text) == v);
  auto dir = temp_dir("vocab");
  save_vocab(dir / "v.txt", v);
  CHECK(load_vocab(dir / "v.txt").tokens() == v.tokens());
  CHECK_THROWS_AS(vocab_from_text("<unk>\t0\n"), VocabError);
  CHECK_THROWS_AS(vocab_from_text("<blank>\t0\n<unk>\t0\n<s>\t0\n</s>\t0\nx\n"), VocabError);
  CHECK_THROWS_AS(vocab_from_text("<blank>\t0\n<unk>\t0\n<s>\t0\n</s>\tz\n"), VocabError);
  fs::remove_all(dir);
}

TEST_CASE("filter_pair boundary") {
  CHECK(filter_pair(50, 50, 50));
  CHECK_FALSE(filter_pair(51, 10, 50));
  CHECK_FALSE(filter_pair(10, 51, 50));
  CHECK(filter_pair(80, 80, kBpeMaxLen));
  CHECK(filter_pair(Tokens(50, "x"), Tokens(3, "y")));
  CHECK_FALSE(filter_pair(Tokens(51, "x"), Tokens(3, "y")));
}

TEST_CASE("source features") {
  CHECK(split_features("word|N|sg", 2) == Tokens{"word", "N", "sg"});
  CHECK(split_features("a|b|c", 1) == Tokens{"a|b", "c"});
  CHECK_THROWS_AS(split_features("word", 1), DataError);
  CHECK_THROWS_AS(split_features("word|", 1), DataError);
  auto ex = parse_example("the|D cat|N", "le chat", 1);
  CHECK(ex.src == Tokens{"the", "cat"});
  CHECK(ex.src_feats == std::vector<Tokens>{{"D", "N"}});
  CHECK(ex.tgt == Tokens{"le", "chat"});
}

TEST_CASE("copy maps extend the target vocabulary per example") {
  Vocabs v;
  v.src = build_vocab(std::vector<Tokens>{{"a", "b", "c"}}, 10);
  v.tgt = build_vocab(std::vector<Tokens>{{"a"}}, 10);  // size 5
  RawExample raw{{"a", "zz", "yy", "zz"}, {}, {"zz", "a", "qq", "yy"}};
  Example ex = numericalize(raw, v, 7);
  CHECK(ex.index == 7);
  CHECK(ex.src == std::vector<std::int32_t>{4, kUnkId, kUnkId, kUnkId});
  CHECK(ex.src_map == std::vector<std::int32_t>{4, 5, 6, 5});
  CHECK(ex.n_oov == 2);
  CHECK(ex.tgt == std::vector<std::int32_t>{kUnkId, 4, kUnkId, kUnkId});
  CHECK(ex.tgt_ext == std::vector<std::int32_t>{5, 4, kUnkId, 6});
}

TEST_CASE("shard_corpus splits in order") {
  auto dir = temp_dir("shard");
  std::vector<std::string> src, tgt;
  for (int i = 0; i < 10; ++i) {
    src.push_back("s" + std::to_string(i));
    tgt.push_back("t" + std::to_string(i));
  }
  write_lines(dir / "src.txt", src);
  write_lines(dir / "tgt.txt", tgt);
  auto shards = shard_corpus(dir / "src.txt", dir / "tgt.txt", 4);
  REQUIRE(shards.size() == 3);
  CHECK(shards[0].size() == 4);
  CHECK(shards[1].size() == 4);
  CHECK(shards[2].size() == 2);
  std::vector<std::string> joined;
  for (const auto& s : shards) {
    for (const auto& ex : s) joined.push_back(ex.src[0]);
  }
  CHECK(joined == src);
  CHECK(shard_corpus(dir / "src.txt", dir / "tgt.txt", 10).size() == 1);
  CHECK(shard_corpus(dir / "src.txt", dir / "tgt.txt", 1000).size() == 1);

  SUBCASE("filtering and empty sources") {
    write_lines(dir / "s2.txt", {"a b c", "", "a", "a b"});
    write_lines(dir / "t2.txt", {"x", "y", "x y z", "x"});
    std::size_t seen = 0;
    auto stats = shard_corpus(dir / "s2.txt", dir / "t2.txt", 10, 2, 0,
                              [&](std::size_t, std::vector<RawExample>&& exs) {
                                seen += exs.size();
                                CHECK(exs.back().src == Tokens{"a", "b"});
                              });
    CHECK(stats.read == 4);
    CHECK(stats.kept == 1);
    CHECK(stats.dropped == 3);
    CHECK(seen == 1);
  }
  SUBCASE("line-count mismatch") {
    write_lines(dir / "short.txt", {"only"});
    CHECK_THROWS_AS(shard_corpus(dir / "src.txt", dir / "short.txt", 4), DataError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(shard_corpus(dir / "nope.txt", dir / "tgt.txt", 4), DataError);
  }
  fs::remove_all(dir);
}

TEST_CASE("collate pads, wraps and masks") {
  Example a, b;
  a.src = {5, 6, 7};
  a.src_map = {5, 6, 7};
  a.tgt = {8};
  a.tgt_ext = {8};
  b.src = {9, 9, 9, 9, 9};
  b.src_map = {9, 9, 9, 9, 9};
  b.tgt = {4, 4, 4};
  b.tgt_ext = {4, 4, 4};
  b.index = 1;
  Batch batch = collate(std::vector<Example>{a, b});
  CHECK(batch.batch_size == 2);
  CHECK(batch.src_len == 5);
  CHECK(batch.tgt_len == 5);
  CHECK(batch.src == std::vector<std::int32_t>{5, 9, 6, 9, 7, 9, 0, 9, 0, 9});
  CHECK(batch.src_mask == std::vector<std::uint8_t>{1, 1, 1, 1, 1, 1, 0, 1, 0, 1});
  CHECK(batch.src_map[6] == -1);
  CHECK(batch.tgt == std::vector<std::int32_t>{2, 2, 8, 4, 3, 4, 0, 4, 0, 3});
  CHECK(batch.tgt_lengths == std::vector<std::size_t>{3, 5});
  CHECK(batch.n_tokens() == 6);

  Batch single = collate(std::vector<Example>{a});
  CHECK(single.batch_size == 1);
  CHECK(single.src == a.src);
  CHECK(single.tgt == std::vector<std::int32_t>{2, 8, 3});
  CHECK_THROWS_AS(collate(std::vector<Example>{}), DataError);
}

TEST_CASE("make_batches covers every example once with valid padding") {
  auto raw = synthetic(700);
  auto v = synthetic_vocabs(raw);
  auto shards = make_shards(raw, v, 10000);
  Rng rng(3);
  auto batches = make_batches(shards[0].examples, 64, rng);
  CHECK(batches.size() == 11);
  std::set<std::int64_t> seen;
  for (const auto& b : batches) {
    const std::size_t B = b.batch_size;
    for (std::size_t j = 0; j < B; ++j) {
      CHECK(seen.insert(b.indices[j]).second);
      const auto& ex = shards[0].examples[static_cast<std::size_t>(b.indices[j])];
      CHECK(b.src_lengths[j] == ex.src.size());
      for (std::size_t s = 0; s < b.src_len; ++s) {
        const bool live = s < ex.src.size();
        CHECK(b.src_mask[s * B + j] == live);
        CHECK(b.src[s * B + j] == (live ? ex.src[s] : kPadId));
        CHECK(static_cast<std::size_t>(b.src[s * B + j]) < v.src.size());
      }
      for (std::size_t t = 0; t < b.tgt_len; ++t) {
        const bool live = t < ex.tgt.size() + 2;
        CHECK(b.tgt_mask[t * B + j] == live);
        if (!live) CHECK(b.tgt[t * B + j] == kPadId);
        CHECK(static_cast<std::size_t>(b.tgt[t * B + j]) < v.tgt.size());
      }
      CHECK(b.tgt[j] == kBosId);
      CHECK(b.tgt[(ex.tgt.size() + 1) * B + j] == kEosId);
    }
  }
  CHECK(seen.size() == 700);
}

TEST_CASE("make_batches sorts by source length before cutting") {
  auto raw = synthetic(256);
  auto v = synthetic_vocabs(raw);
  auto shards = make_shards(raw, v, 10000);
  Rng rng(11);
  auto batches = make_batches(shards[0].examples, 32, rng);
  // With lengths sorted, batch length ranges never overlap.
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (const auto& b : batches) {
    ranges.emplace_back(*std::min_element(b.src_lengths.begin(), b.src_lengths.end()),
                        *std::max_element(b.src_lengths.begin(), b.src_lengths.end()));
  }
  std::sort(ranges.begin(), ranges.end());
  for (std::size_t i = 1; i < ranges.size(); ++i) {
    CHECK(ranges[i - 1].second <= ranges[i].first);
  }
}

TEST_CASE("shard files round trip") {
  Vocabs v;
  v.src = build_vocab(std::vector<Tokens>{{"a", "b"}}, 10);
  v.tgt = build_vocab(std::vector<Tokens>{{"x"}}, 10);
  v.feats.push_back(build_vocab(std::vector<Tokens>{{"N", "V"}}, 10));
  Shard shard{3, {}};
  shard.examples.push_back(numericalize(parse_example("a|N b|V", "x y", 1), v, 0));
  shard.examples.push_back(numericalize(parse_example("q|N", "", 1), v, 1));
  auto dir = temp_dir("shardfile");
  write_shard(dir / "s.mnmt", shard);
  Shard back = read_shard(dir / "s.mnmt");
  CHECK(back.index == 3);
  REQUIRE(back.examples.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back.examples[i].src == shard.examples[i].src);
    CHECK(back.examples[i].src_feats == shard.examples[i].src_feats);
    CHECK(back.examples[i].src_map == shard.examples[i].src_map);
    CHECK(back.examples[i].tgt == shard.examples[i].tgt);
    CHECK(back.examples[i].tgt_ext == shard.examples[i].tgt_ext);
    CHECK(back.examples[i].n_oov == shard.examples[i].n_oov);
    CHECK(back.examples[i].index == shard.examples[i].index);
  }
  fs::remove_all(dir);
}

TEST_CASE("manifest round trip") {
  ShardManifest m;
  m.train_shards = {"d.train.0.mnmt", "d.train.1.mnmt"};
  m.train_sizes = {100, 20};
  m.valid_shards = {"d.valid.0.mnmt"};
  m.valid_sizes = {9};
  m.src_vocab = "d.src.vocab";
  m.tgt_vocab = "d.tgt.vocab";
  m.max_len = 100;
  m.shard_size = 100;
  m.seed = 42;
  auto back = ShardManifest::from_json(m.to_json());
  CHECK(back.train_shards == m.train_shards);
  CHECK(back.train_sizes == m.train_sizes);
  CHECK(back.valid_sizes == m.valid_sizes);
  CHECK(back.max_len == 100);
  CHECK(back.seed == 42);
  CHECK_THROWS_AS(ShardManifest::from_json("{"), DataError);
  CHECK_THROWS_AS(ShardManifest::from_json("{\"version\": 2}"), DataError);
}

TEST_CASE("batch stream is independent of shard size") {
  auto raw = synthetic(1000);
  auto v = synthetic_vocabs(raw);
  auto whole = ShardSet::in_memory(make_shards(raw, v, 1000));
  auto dir = temp_dir("stream");
  std::vector<fs::path> paths;
  for (const auto& s : make_shards(raw, v, 100)) {
    paths.push_back(dir / ("s" + std::to_string(s.index) + ".mnmt"));
    write_shard(paths.back(), s);
  }
  auto small = ShardSet::from_files(paths);
  CHECK(small.count() == 10);
  CHECK(small.total_examples() == 1000);
  for (std::size_t epoch = 0; epoch < 2; ++epoch) {
    // A small window makes batches cross shard boundaries.
    auto a = epoch_batches(whole, 16, 5, epoch, 3);
    auto b = epoch_batches(small, 16, 5, epoch, 3);
    CHECK(a.size() == b.size());
    CHECK(a == b);
  }
  CHECK(epoch_batches(whole, 16, 5, 0, 3) != epoch_batches(whole, 16, 5, 1, 3));
  CHECK(epoch_batches(whole, 16, 5, 0) != epoch_batches(whole, 16, 6, 0));
  fs::remove_all(dir);
}

TEST_CASE("sequential batches keep corpus order") {
  auto raw = synthetic(50);
  auto v = synthetic_vocabs(raw);
  auto shards = make_shards(raw, v, 1000);
  auto batches = sequential_batches(shards[0].examples, 16);
  REQUIRE(batches.size() == 4);
  CHECK(batches[3].batch_size == 2);
  CHECK(batches[1].indices.front() == 16);
}
