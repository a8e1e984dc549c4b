#include "minimt/beam.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "minimt/vocab.hpp"

namespace minimt {

HypothesisFilter max_unk_count(std::size_t n) {
  return [n](const Hypothesis& h) {
    return static_cast<std::size_t>(std::count(h.tokens.begin(), h.tokens.end(), kUnkId)) <= n;
  };
}

HypothesisFilter must_contain(std::vector<int> seq) {
  return [seq = std::move(seq)](const Hypothesis& h) {
    if (!h.finished || seq.empty()) return true;
    return std::search(h.tokens.begin(), h.tokens.end(), seq.begin(), seq.end()) !=
           h.tokens.end();
  };
}

void DecodeOptions::validate() const {
  if (beam_size == 0) throw DecodeError("beam_size must be at least 1");
  if (max_len == 0) throw DecodeError("max_len must be at least 1");
  if (n_best == 0 || n_best > beam_size) throw DecodeError("n_best must lie in [1, beam_size]");
  if (!(length_alpha >= 0.0) || !(coverage_beta >= 0.0)) {
    throw DecodeError("length_alpha and coverage_beta must be non-negative");
  }
}

double length_penalty(std::size_t len, double alpha) {
  if (alpha == 0.0) return 1.0;
  return std::pow(5.0 + static_cast<double>(len), alpha) / std::pow(6.0, alpha);
}

double coverage_penalty(const std::vector<std::vector<double>>& attn, double beta) {
  if (beta == 0.0 || attn.empty() || attn.front().empty()) return 0.0;
  double total = 0.0;
  for (std::size_t s = 0; s < attn.front().size(); ++s) {
    double cover = 0.0;
    for (const auto& row : attn) cover += row[s];
    total += std::log(std::min(cover, 1.0));
  }
  return beta * total;
}

double final_score(const Hypothesis& h, double alpha, double beta) {
  return h.score / length_penalty(h.tokens.size(), alpha) + coverage_penalty(h.attn, beta);
}

namespace {

struct Candidate {
  double score;
  int parent;
  int token;
};

bool better(const Candidate& a, const Candidate& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.parent != b.parent) return a.parent < b.parent;
  return a.token < b.token;
}

bool ranks_before(const Hypothesis& a, const Hypothesis& b) {
  if (a.normalized != b.normalized) return a.normalized > b.normalized;
  if (a.score != b.score) return a.score > b.score;
  return a.tokens < b.tokens;
}

struct Search {
  std::size_t column = 0;   // batch column of the source
  std::size_t src_len = 0;
  std::size_t id_limit = 0;  // tgt vocab + this sentence's copy words
  std::vector<Hypothesis> live;
  std::vector<Hypothesis> bank;
  std::vector<Hypothesis> truncated;
  bool done = false;
  bool fallback = false;
};

// Picks the next live beam and banked hypotheses from sorted candidates.
// Finished hypotheses do not take beam slots, but only those ranked above
// the last kept live candidate are banked.
void choose(Search& s, std::vector<Candidate>& cands, const std::vector<double>& step_attn,
            std::size_t attn_stride, std::size_t row0, const DecodeOptions& opts, bool filter,
            std::vector<Hypothesis>& live, std::vector<int>& parents,
            std::vector<Hypothesis>& banked) {
  const std::size_t n = cands.size();
  std::size_t sorted = std::min(n, std::max<std::size_t>(4 * opts.beam_size, 16));
  std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(sorted),
                    cands.end(), better);
  for (std::size_t i = 0; i < n && live.size() < opts.beam_size; ++i) {
    if (i == sorted) {
      std::sort(cands.begin() + static_cast<std::ptrdiff_t>(i), cands.end(), better);
      sorted = n;
    }
    const Candidate& c = cands[i];
    const Hypothesis& parent = s.live[static_cast<std::size_t>(c.parent)];
    Hypothesis h;
    h.tokens = parent.tokens;
    h.tokens.push_back(c.token);
    h.score = c.score;
    h.attn = parent.attn;
    std::vector<double> row;
    if (!step_attn.empty()) {
      row.resize(s.src_len);
      const std::size_t r = row0 + static_cast<std::size_t>(c.parent);
      for (std::size_t j = 0; j < s.src_len; ++j) row[j] = step_attn[j * attn_stride + r];
    }
    h.attn.push_back(std::move(row));
    h.finished = c.token == kEosId;
    if (filter) {
      bool keep = true;
      for (const auto& f : opts.filters) {
        if (!f(h)) {
          keep = false;
          break;
        }
      }
      if (!keep) continue;
    }
    if (h.finished) {
      h.normalized = final_score(h, opts.length_alpha, opts.coverage_beta);
      banked.push_back(std::move(h));
    } else {
      live.push_back(std::move(h));
      parents.push_back(c.parent);
    }
  }
}

DecodeResult finish(Search& s, const DecodeOptions& opts) {
  DecodeResult r;
  r.constraint_unsatisfied = s.fallback;
  std::sort(s.bank.begin(), s.bank.end(), ranks_before);
  for (auto& h : s.truncated) h.normalized = final_score(h, opts.length_alpha, opts.coverage_beta);
  std::sort(s.truncated.begin(), s.truncated.end(), ranks_before);
  for (auto& h : s.bank) {
    if (r.hyps.size() == opts.n_best) break;
    r.hyps.push_back(std::move(h));
  }
  for (auto& h : s.truncated) {
    if (r.hyps.size() == opts.n_best) break;
    r.hyps.push_back(std::move(h));
  }
  if (r.hyps.empty()) r.error = "no hypothesis survived decoding";
  return r;
}

}  // namespace

std::vector<DecodeResult> translate_batch(const Seq2Seq& model, std::span<const Example> srcs,
                                          const DecodeOptions& opts) {
  opts.validate();
  std::vector<DecodeResult> results(srcs.size());
  std::vector<const Example*> valid;
  std::vector<std::size_t> where;
  for (std::size_t i = 0; i < srcs.size(); ++i) {
    if (srcs[i].src.empty()) {
      results[i].error = "empty source";
      continue;
    }
    if (srcs[i].src_feats.size() != model.config().src_features.size()) {
      results[i].error = "source has " + std::to_string(srcs[i].src_feats.size()) +
                         " feature streams, the model expects " +
                         std::to_string(model.config().src_features.size());
      continue;
    }
    valid.push_back(&srcs[i]);
    where.push_back(i);
  }
  if (valid.empty()) return results;

  const ModelConfig& cfg = model.config();
  const Batch batch = collate(std::span<const Example* const>(valid));
  const std::size_t extra = cfg.copy ? static_cast<std::size_t>(batch.max_oov) : 0;
  Tape tape(false);
  const EncoderOutput enc = model.encode(tape, batch);

  std::vector<Search> searches(valid.size());
  std::vector<int> row_cols;
  for (std::size_t b = 0; b < valid.size(); ++b) {
    Search& s = searches[b];
    s.column = b;
    s.src_len = valid[b]->src.size();
    s.id_limit = cfg.tgt_vocab + (cfg.copy ? static_cast<std::size_t>(valid[b]->n_oov) : 0);
    s.live.emplace_back();
    row_cols.push_back(static_cast<int>(b));
  }
  DecoderState state = model.select(tape, model.init_state(enc), row_cols);

  const double lp_max = length_penalty(opts.max_len, opts.length_alpha);
  std::vector<Candidate> cands;
  for (std::size_t step = 1; !row_cols.empty(); ++step) {
    const std::size_t R = row_cols.size();
    std::vector<int> prev(R);
    {
      std::size_t r = 0;
      for (const auto& s : searches) {
        if (s.done) continue;
        for (const auto& h : s.live) prev[r++] = h.tokens.empty() ? kBosId : h.tokens.back();
      }
    }
    const EncoderOutput rows_enc = model.select(tape, enc, row_cols);
    auto [lp, out] = model.decode_step(tape, prev, state, rows_enc, extra);
    const std::size_t W = lp.dim(1);
    auto lpd = lp.data();
    std::vector<double> step_attn;
    if (out.attn.defined()) {
      auto a = out.attn.data();
      step_attn.assign(a.begin(), a.end());
    }

    std::vector<int> next_rows;
    std::vector<int> next_cols;
    std::size_t row0 = 0;
    for (auto& s : searches) {
      if (s.done) continue;
      const std::size_t n_live = s.live.size();
      cands.clear();
      for (std::size_t k = 0; k < n_live; ++k) {
        const double base = s.live[k].score;
        const double* row = lpd.data() + (row0 + k) * W;
        for (std::size_t w = 0; w < std::min(W, s.id_limit); ++w) {
          // Tokens whose probability underflows to zero are impossible.
          if (w == kPadId || w == kBosId || !(std::exp(row[w]) > 0.0)) continue;
          cands.push_back({base + row[w], static_cast<int>(k), static_cast<int>(w)});
        }
      }
      std::vector<Hypothesis> live, banked;
      std::vector<int> parents;
      choose(s, cands, step_attn, R, row0, opts, !opts.filters.empty(), live, parents, banked);
      if (live.empty() && banked.empty() && !opts.filters.empty() && !cands.empty()) {
        s.fallback = true;
        choose(s, cands, step_attn, R, row0, opts, false, live, parents, banked);
      }
      for (auto& h : banked) s.bank.push_back(std::move(h));
      for (int& p : parents) p += static_cast<int>(row0);
      row0 += n_live;
      s.live = std::move(live);

      if (step >= opts.max_len) {
        for (auto& h : s.live) s.truncated.push_back(std::move(h));
        s.live.clear();
        s.done = true;
      } else if (s.live.empty()) {
        s.done = true;
      } else if (s.bank.size() >= opts.n_best) {
        std::vector<double> scores;
        for (const auto& h : s.bank) scores.push_back(h.normalized);
        std::nth_element(scores.begin(), scores.begin() + static_cast<std::ptrdiff_t>(opts.n_best - 1),
                         scores.end(), std::greater<>());
        // Log-probabilities only fall and the penalties only lower a live
        // hypothesis's prospects, so nothing live can overtake this.
        if (scores[opts.n_best - 1] >= s.live.front().score / lp_max) s.done = true;
      }
      if (s.done) {
        s.live.clear();
        continue;
      }
      for (int p : parents) {
        next_rows.push_back(p);
        next_cols.push_back(static_cast<int>(s.column));
      }
    }
    if (next_rows.empty()) break;
    state = model.select(tape, out.state, next_rows);
    row_cols = std::move(next_cols);
  }

  for (std::size_t b = 0; b < searches.size(); ++b) {
    results[where[b]] = finish(searches[b], opts);
  }
  return results;
}

DecodeResult beam_search(const Seq2Seq& model, const Example& src, const DecodeOptions& opts) {
  if (src.src.empty()) throw DecodeError("cannot decode an empty source");
  auto r = translate_batch(model, std::span<const Example>(&src, 1), opts);
  if (!r[0].error.empty()) throw DecodeError(r[0].error);
  return std::move(r[0]);
}

std::vector<std::string> hypothesis_tokens(const Hypothesis& h, const Vocab& tgt,
                                           std::span<const std::string> oov_words) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < h.tokens.size(); ++i) {
    const int id = h.tokens[i];
    if (id == kEosId && i + 1 == h.tokens.size()) break;
    const auto u = static_cast<std::size_t>(id);
    if (u >= tgt.size()) {
      const std::size_t k = u - tgt.size();
      if (k >= oov_words.size()) throw DecodeError("copied id beyond the copy dictionary");
      out.push_back(oov_words[k]);
    } else {
      out.push_back(tgt.token(id));
    }
  }
  return out;
}

std::vector<std::string> replace_unknowns(
    const std::vector<std::string>& tokens, const std::vector<std::vector<double>>& attn,
    std::span<const std::string> src,
    const std::unordered_map<std::string, std::string>& phrase_table) {
  std::vector<std::string> out = tokens;
  for (std::size_t t = 0; t < out.size(); ++t) {
    if (out[t] != kUnkToken || t >= attn.size() || attn[t].empty()) continue;
    const auto& row = attn[t];
    std::size_t best = 0;
    for (std::size_t j = 1; j < row.size() && j < src.size(); ++j) {
      if (row[j] > row[best]) best = j;
    }
    if (best >= src.size()) continue;
    auto it = phrase_table.find(src[best]);
    out[t] = it != phrase_table.end() ? it->second : src[best];
  }
  return out;
}

}  // namespace minimt
