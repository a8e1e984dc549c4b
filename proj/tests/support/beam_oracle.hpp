#pragma once

// Random small decoders and an exhaustive search over their output space.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "minimt/beam.hpp"
#include "minimt/dropout.hpp"
#include "minimt/vocab.hpp"

namespace minimt::testing {

struct ToyDecoder {
  Vocabs vocabs;
  Seq2Seq model;
  Example src;
  std::size_t expandable = 0;  // ids a hypothesis may emit: <unk>, </s> and words
};

// `expandable` in [3, 5]: <unk>, </s> and expandable - 2 target words.
inline ToyDecoder random_toy_decoder(std::uint64_t seed, std::size_t expandable) {
  ToyDecoder d;
  Rng rng = make_rng({seed, 0xbeef});
  std::vector<std::string> src_words{"a", "b", "c", "d", "e"};
  std::vector<std::string> tgt_words;
  for (std::size_t i = 0; i + 2 < expandable; ++i) tgt_words.push_back("t" + std::to_string(i));
  d.vocabs.src = build_vocab(std::vector<std::vector<std::string>>{src_words}, 100);
  d.vocabs.tgt = build_vocab(std::vector<std::vector<std::string>>{tgt_words}, 100);
  d.expandable = expandable;

  ModelConfig c;
  c.rnn_size = 8;
  c.emb_size = 6;
  c.enc_layers = c.dec_layers = 1 + static_cast<std::size_t>(uniform01(rng) * 2.0);
  c.src_vocab = d.vocabs.src.size();
  c.tgt_vocab = d.vocabs.tgt.size();
  c.dropout = 0.0;
  d.model = Seq2Seq(c, seed);
  // Sharpen the output distribution so that search decisions matter.
  const double sharpen = 2.0 + 30.0 * uniform01(rng);
  for (double& w : d.model.param("gen.W").data()) w *= sharpen;
  for (double& w : d.model.param("gen.b").data()) w = 2.0 * uniform01(rng) - 1.0;

  RawExample raw;
  const std::size_t len = 1 + static_cast<std::size_t>(uniform01(rng) * 4.0);
  for (std::size_t i = 0; i < len; ++i) {
    raw.src.push_back(src_words[static_cast<std::size_t>(uniform01(rng) * 5.0)]);
  }
  d.src = numericalize(raw, d.vocabs, 0);
  return d;
}

// Visits every output sequence of at most max_len tokens: those ending in
// </s> (finished) and those of exactly max_len tokens without it.
inline void enumerate_outputs(const Seq2Seq& model, const Example& src, std::size_t max_len,
                              const std::function<void(const Hypothesis&)>& visit) {
  Tape tape(false);
  const Batch batch = collate(std::vector<Example>{src});
  const EncoderOutput enc = model.encode(tape, batch);
  const std::size_t S = src.src.size();
  std::function<void(const Hypothesis&, const DecoderState&)> dfs =
      [&](const Hypothesis& h, const DecoderState& state) {
        const int prev = h.tokens.empty() ? kBosId : h.tokens.back();
        auto [lp, out] = model.decode_step(tape, {prev}, state, enc, 0);
        std::vector<double> row;
        if (out.attn.defined()) {
          for (std::size_t s = 0; s < S; ++s) row.push_back(out.attn.data()[s]);
        }
        for (std::size_t w = 0; w < lp.dim(1); ++w) {
          if (w == kPadId || w == kBosId || !(std::exp(lp.data()[w]) > 0.0)) continue;
          Hypothesis next = h;
          next.tokens.push_back(static_cast<int>(w));
          next.score = h.score + lp.data()[w];
          next.attn.push_back(row);
          next.finished = w == kEosId;
          if (next.finished || next.tokens.size() == max_len) {
            visit(next);
          } else {
            dfs(next, out.state);
          }
        }
      };
  dfs(Hypothesis{}, model.init_state(enc));
}

// Best output under final_score: finished sequences win over truncated
// ones, as in the decoder's ranking.
inline Hypothesis brute_force_best(const Seq2Seq& model, const Example& src, std::size_t max_len,
                                   double alpha, double beta,
                                   const std::vector<HypothesisFilter>& filters = {}) {
  Hypothesis best;
  bool have = false;
  enumerate_outputs(model, src, max_len, [&](const Hypothesis& h) {
    for (std::size_t k = 1; k <= h.tokens.size(); ++k) {
      Hypothesis prefix;
      prefix.tokens.assign(h.tokens.begin(), h.tokens.begin() + static_cast<std::ptrdiff_t>(k));
      prefix.finished = k == h.tokens.size() && h.finished;
      for (const auto& f : filters) {
        if (!f(prefix)) return;
      }
    }
    Hypothesis c = h;
    c.normalized = final_score(c, alpha, beta);
    if (!have || (c.finished && !best.finished) ||
        (c.finished == best.finished && c.normalized > best.normalized)) {
      best = std::move(c);
      have = true;
    }
  });
  return best;
}

inline std::size_t int_pow(std::size_t b, std::size_t e) {
  std::size_t r = 1;
  for (std::size_t i = 0; i < e; ++i) r *= b;
  return r;
}

}  // namespace minimt::testing
