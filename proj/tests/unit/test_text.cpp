#include <filesystem>
#include <random>
#include <set>

#include "doctest.h"
#include "minimt/bpe.hpp"
#include "minimt/tokenizer.hpp"
#include "minimt/utf8.hpp"
#include "support/text_fixtures.hpp"

using namespace minimt;
using Tokens = std::vector<std::string>;

namespace {
const std::string J(kDefaultJoiner);
}

TEST_CASE("tokenize splits punctuation and marks joins") {
  CHECK(tokenize("Hello, world!") == Tokens{"Hello", J + ",", "world", J + "!"});
  CHECK(tokenize("abc") == Tokens{"abc"});
  CHECK(tokenize("a  b") == Tokens{"a", "b"});
  CHECK(tokenize("(a)") == Tokens{"(" + J, "a", J + ")"});
  CHECK(tokenize("abc123") == Tokens{"abc", J + "123"});
  CHECK(tokenize("a.b") == Tokens{"a", J + "." + J, "b"});
  CHECK(tokenize("!!") == Tokens{"!", J + "!"});
  CHECK(tokenize("").empty());
}

TEST_CASE("detokenize inverts tokenize") {
  CHECK(detokenize(Tokens{"Hello", J + ",", "world", J + "!"}) == "Hello, world!");
  CHECK(detokenize(Tokens{"abc"}) == "abc");
  CHECK(detokenize(tokenize("a  b")) == "a b");
  CHECK(detokenize(Tokens{}).empty());
}

TEST_CASE("tokenize rejects input containing the joiner") {
  CHECK_THROWS_AS(tokenize("a" + J + "b"), TokenizeError);
  CHECK_THROWS_AS(tokenize("a\nb"), TokenizeError);
}

TEST_CASE("custom joiner and case folding") {
  TokenizerOptions opts;
  opts.joiner = "@@";
  CHECK(tokenize("Hi!", opts) == Tokens{"Hi", "@@!"});
  CHECK(detokenize(tokenize("x-y", opts), opts) == "x-y");
  opts.case_preserving = false;
  CHECK(tokenize("HeLLo", opts) == Tokens{"hello"});
}

TEST_CASE("tokenizer never emits the joiner from joiner-free text") {
  std::mt19937_64 rng(17);
  for (int i = 0; i < 500; ++i) {
    for (const auto& tok : tokenize(testing::fuzz_line(rng))) {
      CHECK(strip_joiners(tok, J).find(J) == std::string::npos);
    }
  }
}

TEST_CASE("round trip over multilingual and fuzzed lines") {
  std::size_t mismatches = 0;
  for (const auto& line : testing::multilingual_corpus(2000, 5)) {
    if (detokenize(tokenize(line)) != line) ++mismatches;
  }
  std::mt19937_64 rng(6);
  for (int i = 0; i < 2000; ++i) {
    const std::string line = testing::fuzz_line(rng);
    if (detokenize(tokenize(line)) != line) {
      ++mismatches;
      CAPTURE(line);
    }
  }
  CHECK(mismatches == 0);
}

TEST_CASE("utf8 decoding flags malformed bytes") {
  auto units = utf8::decode("a\xC3\xA9\xFF");
  REQUIRE(units.size() == 3);
  CHECK(units[1].code_point == 0xE9);
  CHECK(units[2].code_point == -1);
  CHECK(utf8::encode(0x1F600) == "\xF0\x9F\x98\x80");
  CHECK_FALSE(utf8::valid("\xC0\x80"));
  // Malformed bytes still round trip as punctuation.
  const std::string raw = "ab\xFF" "cd";
  CHECK(detokenize(tokenize(raw)) == raw);
}

TEST_CASE("bpe_learn hand fixtures") {
  SUBCASE("single repeated word") {
    Tokens corpus(5, "aa");
    auto m = bpe_learn(corpus, 1);
    REQUIRE(m.size() == 1);
    CHECK(m.merges()[0] == SymbolPair{"a", "a"});
  }
  SUBCASE("zero merges") {
    CHECK(bpe_learn(Tokens{"ab"}, 0).size() == 0);
  }
  SUBCASE("most frequent pair wins") {
    Tokens corpus = {"ab", "ab", "ab", "ac"};
    auto m = bpe_learn(corpus, 1);
    REQUIRE(m.size() == 1);
    CHECK(m.merges()[0] == SymbolPair{"a", "b"});
  }
  SUBCASE("stops when no pair repeats") {
    auto m = bpe_learn(Tokens{"xyz"}, 10);
    CHECK(m.size() == 0);
  }
  SUBCASE("empty corpus") {
    CHECK_THROWS_AS(bpe_learn(Tokens{}, 3), BpeError);
  }
  SUBCASE("multi-step learning") {
    Tokens corpus;
    auto add = [&](const std::string& w, int n) { corpus.insert(corpus.end(), n, w); };
    add("low", 5);
    add("lower", 2);
    add("newest", 6);
    add("widest", 3);
    auto m = bpe_learn(corpus, 4);
    // (e,s), (s,t) and (t,</w>) all count 9; the smallest pair goes first.
    // The merged symbols then keep count 9 ahead of (l,o) and (o,w) at 7.
    REQUIRE(m.size() == 4);
    CHECK(m.merges()[0] == SymbolPair{"e", "s"});
    CHECK(m.merges()[1] == SymbolPair{"es", "t"});
    CHECK(m.merges()[2] == SymbolPair{"est", std::string(kEndOfWord)});
    CHECK(m.merges()[3] == SymbolPair{"l", "o"});
  }
}

TEST_CASE("bpe_learn is deterministic") {
  auto corpus = testing::multilingual_corpus(300, 9);
  Tokens tokens;
  for (const auto& l : corpus) {
    for (auto& t : tokenize(l)) tokens.push_back(std::move(t));
  }
  auto a = bpe_learn(tokens, 200);
  auto b = bpe_learn(tokens, 200);
  CHECK(a.merges() == b.merges());
  CHECK(a.fingerprint() == b.fingerprint());
  std::set<SymbolPair> unique(a.merges().begin(), a.merges().end());
  CHECK(unique.size() == a.size());
}

TEST_CASE("bpe_apply segments with continuation markers") {
  BpeModel aa(std::vector<SymbolPair>{{"a", "a"}});
  CHECK(bpe_apply(aa, "aaa") == Tokens{"aa" + J, "a"});
  CHECK(bpe_apply(BpeModel{}, "ab") == Tokens{"a" + J, "b"});
  BpeModel word(std::vector<SymbolPair>{{"a", "b"}, {"ab", std::string(kEndOfWord)}});
  CHECK(bpe_apply(word, "ab") == Tokens{"ab"});
  CHECK(bpe_apply(word, "abab") == Tokens{"ab" + J, "ab"});
}

TEST_CASE("bpe segmentation preserves token text") {
  auto corpus = testing::multilingual_corpus(500, 3);
  Tokens tokens;
  for (const auto& l : corpus) {
    for (auto& t : tokenize(l)) tokens.push_back(std::move(t));
  }
  auto model = bpe_learn(tokens, 300);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 2000; ++i) {
    const std::string tok = testing::fuzz_word(rng, 12);
    std::string joined;
    for (const auto& p : bpe_apply(model, tok)) {
      joined += p.size() > J.size() && p.ends_with(J) ? p.substr(0, p.size() - J.size()) : p;
    }
    CHECK(joined == tok);
  }
  SUBCASE("segmented tokenizer output still detokenizes") {
    for (const auto& l : testing::multilingual_corpus(300, 4)) {
      CHECK(detokenize(bpe_segment(model, tokenize(l))) == l);
    }
  }
  SUBCASE("plain text pieces merge back") {
    Tokens words = {"lowest", "newer", "x"};
    CHECK(bpe_merge_pieces(bpe_segment(model, words, J), J) == words);
  }
}

TEST_CASE("bpe model file round trip") {
  BpeModel m(std::vector<SymbolPair>{{"a", "b"}, {"ab", std::string(kEndOfWord)}, {"ü", "ß"}});
  const std::string text = bpe_to_text(m);
  CHECK(text.starts_with("#version: minimt-bpe-1\n"));
  CHECK(text.find("ab </w>\n") != std::string::npos);
  auto back = bpe_from_text(text);
  CHECK(back.merges() == m.merges());
  auto path = std::filesystem::temp_directory_path() / "minimt_bpe_test.codes";
  save_bpe(path, m);
  CHECK(load_bpe(path).merges() == m.merges());
  std::filesystem::remove(path);
  CHECK_THROWS_AS(bpe_from_text("#version: other\n"), BpeError);
  CHECK_THROWS_AS(bpe_from_text(std::string(kBpeHeader) + "\nab\n"), BpeError);
  CHECK_THROWS_AS(bpe_from_text(std::string(kBpeHeader) + "\na b\na b\n"), BpeError);
}
