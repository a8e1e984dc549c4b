#include <cmath>
#include <limits>

#include "doctest.h"
#include "minimt/beam.hpp"
#include "support/beam_oracle.hpp"
#include "support/model_fixtures.hpp"

using namespace minimt;
using namespace minimt::testing;

namespace {

// Model whose generator ignores its input and always favors `token`.
Seq2Seq forced_model(const Vocabs& v, int token, double margin = 1000.0) {
  Seq2Seq m(toy_config(v, 8, 1), 3);
  for (double& w : m.param("gen.W").data()) w = 0.0;
  for (double& b : m.param("gen.b").data()) b = 0.0;
  m.param("gen.b").data()[static_cast<std::size_t>(token)] = margin;
  return m;
}

Example source(const Vocabs& v, const std::string& line) {
  return numericalize(parse_example(line, "x"), v, 0);
}

}  // namespace

TEST_CASE("scoring formulas") {
  Hypothesis h;
  h.tokens = {4, 5, 6, 7, 4, 5, kEosId};
  h.score = -3.5;
  h.attn = std::vector<std::vector<double>>(7, {0.5, 0.5});
  CHECK(final_score(h, 0.0, 0.0) == -3.5);
  CHECK(length_penalty(7, 1.0) == 2.0);
  CHECK(final_score(h, 1.0, 0.0) == -1.75);
  // Each position receives 3.5 total attention, so coverage costs nothing.
  CHECK(coverage_penalty(h.attn, 0.7) == 0.0);
  std::vector<std::vector<double>> low{{0.2, 0.8}, {0.1, 0.1}};
  CHECK(coverage_penalty(low, 2.0) == doctest::Approx(2.0 * (std::log(0.3) + std::log(0.9))));
  CHECK(coverage_penalty({}, 1.0) == 0.0);
}

TEST_CASE("option validation") {
  DecodeOptions o;
  CHECK(o.beam_size == 5);
  CHECK_NOTHROW(o.validate());
  o.n_best = 6;
  CHECK_THROWS_AS(o.validate(), DecodeError);
  o.n_best = 1;
  o.length_alpha = -1.0;
  CHECK_THROWS_AS(o.validate(), DecodeError);
}

TEST_CASE("beam of one is greedy decoding") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    auto d = random_toy_decoder(seed, 5);
    DecodeOptions o;
    o.beam_size = 1;
    o.max_len = 6;
    auto r = beam_search(d.model, d.src, o);

    Tape t(false);
    const auto enc = d.model.encode(t, collate(std::vector<Example>{d.src}));
    DecoderState st = d.model.init_state(enc);
    std::vector<int> greedy;
    double score = 0.0;
    int prev = kBosId;
    for (std::size_t step = 0; step < o.max_len; ++step) {
      auto [lp, out] = d.model.decode_step(t, {prev}, st, enc, 0);
      int best = -1;
      for (std::size_t w = 0; w < lp.dim(1); ++w) {
        if (w == kPadId || w == kBosId) continue;
        if (best < 0 || lp.data()[w] > lp.data()[static_cast<std::size_t>(best)]) {
          best = static_cast<int>(w);
        }
      }
      greedy.push_back(best);
      score += lp.data()[static_cast<std::size_t>(best)];
      st = out.state;
      prev = best;
      if (best == kEosId) break;
    }
    REQUIRE(r.hyps.size() == 1);
    CHECK(r.hyps[0].tokens == greedy);
    CHECK(r.hyps[0].score == score);
    CHECK(r.hyps[0].finished == (greedy.back() == kEosId));
  }
}

TEST_CASE("exhaustive beam matches brute force") {
  const std::vector<std::pair<double, double>> settings{{0.0, 0.0}, {1.0, 0.0}, {1.0, 0.5}};
  std::size_t checked = 0;
  for (std::uint64_t seed = 1; seed <= 30; ++seed) {
    const std::size_t V = 3 + seed % 3;
    const std::size_t max_len = 2 + seed % 3;
    auto d = random_toy_decoder(seed, V);
    for (auto [alpha, beta] : settings) {
      DecodeOptions o;
      o.beam_size = int_pow(V, max_len);
      o.max_len = max_len;
      o.length_alpha = alpha;
      o.coverage_beta = beta;
      auto r = beam_search(d.model, d.src, o);
      auto best = brute_force_best(d.model, d.src, max_len, alpha, beta);
      REQUIRE(!r.hyps.empty());
      CHECK(r.hyps[0].tokens == best.tokens);
      CHECK(r.hyps[0].score == best.score);
      CHECK(r.hyps[0].normalized == best.normalized);
      ++checked;
    }
  }
  CHECK(checked == 90);
}

TEST_CASE("wider beams never score worse") {
  std::size_t violations = 0;
  for (std::uint64_t seed = 1; seed <= 30; ++seed) {
    auto d = random_toy_decoder(seed, 3 + seed % 3);
    for (auto [alpha, beta] : std::vector<std::pair<double, double>>{{0, 0}, {1, 0}, {1, 0.5}}) {
      double prev = -std::numeric_limits<double>::infinity();
      for (std::size_t b = 1; b <= 8; ++b) {
        DecodeOptions o;
        o.beam_size = b;
        o.max_len = 4;
        o.length_alpha = alpha;
        o.coverage_beta = beta;
        // An unfinished (truncated) result has no final score.
        const auto h = beam_search(d.model, d.src, o).hyps[0];
        const double s = h.finished ? h.normalized : -std::numeric_limits<double>::infinity();
        if (s < prev) ++violations;
        prev = std::max(prev, s);
      }
    }
  }
  CHECK(violations == 0);
}

TEST_CASE("forced outputs") {
  auto v = toy_vocabs();
  DecodeOptions o;
  o.max_len = 5;
  SUBCASE("forced end of sentence") {
    auto r = beam_search(forced_model(v, kEosId), source(v, "a b"), o);
    CHECK(r.hyps[0].tokens == std::vector<int>{kEosId});
    CHECK(r.hyps[0].score == 0.0);
    CHECK(r.hyps[0].finished);
  }
  SUBCASE("forced word runs to max_len") {
    const int x = v.tgt.id("x");
    // A margin of 1e6 drives every other probability to exactly zero.
    auto r = beam_search(forced_model(v, x, 1e6), source(v, "a b"), o);
    CHECK(r.hyps[0].tokens == std::vector<int>(5, x));
    CHECK(r.hyps[0].score == 0.0);
    CHECK_FALSE(r.hyps[0].finished);
    CHECK(r.hyps[0].attn.size() == 5);
  }
}

TEST_CASE("stored scores match a rescoring pass") {
  auto d = random_toy_decoder(77, 5);
  DecodeOptions o;
  o.beam_size = 4;
  o.n_best = 4;
  o.max_len = 6;
  auto r = beam_search(d.model, d.src, o);
  REQUIRE(r.hyps.size() >= 2);
  for (std::size_t i = 0; i + 1 < r.hyps.size(); ++i) {
    CHECK(r.hyps[i].normalized >= r.hyps[i + 1].normalized);
  }
  Tape t(false);
  const auto enc = d.model.encode(t, collate(std::vector<Example>{d.src}));
  for (const auto& h : r.hyps) {
    DecoderState st = d.model.init_state(enc);
    int prev = kBosId;
    double total = 0.0;
    for (int tok : h.tokens) {
      auto [lp, out] = d.model.decode_step(t, {prev}, st, enc, 0);
      total += lp.data()[static_cast<std::size_t>(tok)];
      st = out.state;
      prev = tok;
    }
    CHECK(std::abs(total - h.score) <= 1e-8);
    CHECK(h.attn.size() == h.tokens.size());
  }
}

TEST_CASE("batched decoding equals single decoding") {
  auto v = toy_vocabs();
  auto cfg = toy_config(v, 16, 2);
  cfg.copy = true;
  Seq2Seq m(cfg, 21);
  for (double& w : m.param("gen.W").data()) w *= 10.0;
  const std::vector<std::string> lines{"a b c", "d", "e f a b c d", "q r a", "b b", "c a f e",
                                       "d e f", "a"};
  std::vector<Example> exs;
  for (const auto& l : lines) exs.push_back(source(v, l));
  DecodeOptions o;
  o.beam_size = 3;
  o.n_best = 2;
  o.max_len = 7;
  o.length_alpha = 0.6;
  o.coverage_beta = 0.2;
  auto batched = translate_batch(m, exs, o);
  REQUIRE(batched.size() == exs.size());
  for (std::size_t i = 0; i < exs.size(); ++i) {
    auto single = beam_search(m, exs[i], o);
    REQUIRE(batched[i].hyps.size() == single.hyps.size());
    for (std::size_t k = 0; k < single.hyps.size(); ++k) {
      CHECK(batched[i].hyps[k].tokens == single.hyps[k].tokens);
      CHECK(batched[i].hyps[k].score == single.hyps[k].score);
      CHECK(batched[i].hyps[k].attn == single.hyps[k].attn);
    }
  }
  CHECK(translate_batch(m, std::vector<Example>{}, o).empty());
}

TEST_CASE("per-sentence errors") {
  auto v = toy_vocabs();
  Seq2Seq m(toy_config(v, 8, 1), 2);
  std::vector<Example> exs{source(v, "a b"), Example{}, source(v, "c")};
  auto r = translate_batch(m, exs, DecodeOptions{});
  CHECK(r[0].error.empty());
  CHECK(!r[1].error.empty());
  CHECK(r[2].error.empty());
  CHECK_THROWS_AS(beam_search(m, Example{}, DecodeOptions{}), DecodeError);
}

TEST_CASE("hypothesis filters") {
  auto v = toy_vocabs();
  SUBCASE("max_unk_count falls back when nothing else is possible") {
    Seq2Seq m = forced_model(v, kUnkId, 1e6);
    DecodeOptions o;
    o.max_len = 3;
    o.filters.push_back(max_unk_count(0));
    // Every other token has probability exp(-1e6), which is zero in double.
    auto r = beam_search(m, source(v, "a"), o);
    CHECK(r.constraint_unsatisfied);
    CHECK(r.hyps[0].tokens.front() == kUnkId);
  }
  SUBCASE("max_unk_count prunes unknowns") {
    auto d = random_toy_decoder(5, 5);
    DecodeOptions o;
    o.beam_size = 6;
    o.max_len = 4;
    o.filters.push_back(max_unk_count(0));
    auto r = beam_search(d.model, d.src, o);
    CHECK_FALSE(r.constraint_unsatisfied);
    for (const auto& h : r.hyps) {
      CHECK(std::count(h.tokens.begin(), h.tokens.end(), kUnkId) == 0);
    }
  }
  SUBCASE("must_contain equals constrained enumeration") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      auto d = random_toy_decoder(seed, 5);
      const int word = d.vocabs.tgt.id("t1");
      DecodeOptions o;
      o.max_len = 3;
      o.beam_size = int_pow(5, 3);
      o.filters.push_back(must_contain({word}));
      auto r = beam_search(d.model, d.src, o);
      auto best = brute_force_best(d.model, d.src, 3, 0.0, 0.0, o.filters);
      CHECK(r.hyps[0].tokens == best.tokens);
      CHECK(std::find(r.hyps[0].tokens.begin(), r.hyps[0].tokens.end(), word) !=
            r.hyps[0].tokens.end());
    }
  }
  SUBCASE("no filters is the identity") {
    auto d = random_toy_decoder(8, 4);
    DecodeOptions a, b;
    b.filters.push_back([](const Hypothesis&) { return true; });
    CHECK(beam_search(d.model, d.src, a).hyps[0].tokens ==
          beam_search(d.model, d.src, b).hyps[0].tokens);
  }
}

TEST_CASE("unknown replacement") {
  const std::vector<std::string> src{"le", "chat", "noir"};
  std::vector<std::vector<double>> attn{{0.1, 0.8, 0.1}, {0.2, 0.3, 0.5}, {0.5, 0.5, 0.0}};
  CHECK(replace_unknowns({"the", "cat", "black"}, attn, src, {}) ==
        std::vector<std::string>{"the", "cat", "black"});
  CHECK(replace_unknowns({"the", "<unk>", "<unk>"}, attn, src, {}) ==
        std::vector<std::string>{"the", "noir", "le"});
  CHECK(replace_unknowns({"<unk>", "x", "<unk>"}, attn, src, {{"chat", "cat"}}) ==
        std::vector<std::string>{"cat", "x", "le"});
  const std::vector<std::vector<double>> one_hot{{1.0, 0.0, 0.0}, {0.0, 0.0, 1.0}};
  CHECK(replace_unknowns({"the", "<unk>"}, one_hot, src, {}) ==
        std::vector<std::string>{"the", "noir"});
}

TEST_CASE("token strings and copied words") {
  auto v = toy_vocabs();
  Hypothesis h;
  h.tokens = {v.tgt.id("x"), static_cast<int>(v.tgt.size()) + 1, kEosId};
  const std::vector<std::string> oov{"q", "r"};
  CHECK(hypothesis_tokens(h, v.tgt, oov) == std::vector<std::string>{"x", "r"});
  h.tokens = {static_cast<int>(v.tgt.size()) + 5};
  CHECK_THROWS_AS(hypothesis_tokens(h, v.tgt, oov), DecodeError);
}
