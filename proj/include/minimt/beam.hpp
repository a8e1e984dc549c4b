#pragma once

#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "minimt/data.hpp"
#include "minimt/model.hpp"

namespace minimt {

class DecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Hypothesis {
  std::vector<int> tokens;  // generated ids, ending in </s> when finished
  double score = 0.0;       // sum of step log-probabilities
  std::vector<std::vector<double>> attn;  // one row of source weights per token
  bool finished = false;
  double normalized = 0.0;  // final_score, filled in when ranked
};

// Pruning predicate applied to every candidate before top-k selection.
// Returning false removes the candidate.
using HypothesisFilter = std::function<bool(const Hypothesis&)>;

// At most n <unk> tokens.
HypothesisFilter max_unk_count(std::size_t n);
// Finished hypotheses must contain `seq` contiguously; live ones pass.
HypothesisFilter must_contain(std::vector<int> seq);

struct DecodeOptions {
  std::size_t beam_size = 5;
  std::size_t max_len = 100;  // generated tokens, </s> included
  std::size_t n_best = 1;
  double length_alpha = 0.0;
  double coverage_beta = 0.0;
  bool replace_unk = false;
  std::unordered_map<std::string, std::string> phrase_table;
  std::vector<HypothesisFilter> filters;

  void validate() const;
};

// ((5 + len)^alpha) / (6^alpha)
double length_penalty(std::size_t len, double alpha);
// beta * sum_s log(min(sum_t a[t][s], 1)); 0 when there is no attention.
double coverage_penalty(const std::vector<std::vector<double>>& attn, double beta);
double final_score(const Hypothesis& h, double alpha, double beta);

struct DecodeResult {
  std::vector<Hypothesis> hyps;  // ranked by normalized score
  // Some expansion step had every candidate pruned by the filters and fell
  // back to the unfiltered candidates.
  bool constraint_unsatisfied = false;
  std::string error;  // non-empty when this sentence could not be decoded
};

// Beam search for one sentence; throws DecodeError on an empty source.
DecodeResult beam_search(const Seq2Seq& model, const Example& src, const DecodeOptions& opts);

// Decodes sentences together. Each result equals decoding that sentence
// alone; failures are reported per sentence in DecodeResult::error.
std::vector<DecodeResult> translate_batch(const Seq2Seq& model, std::span<const Example> srcs,
                                          const DecodeOptions& opts);

// Maps ids to strings, dropping a trailing </s>. Ids past the target
// vocabulary index `oov_words` (the example's copy dictionary).
std::vector<std::string> hypothesis_tokens(const Hypothesis& h, const Vocab& tgt,
                                           std::span<const std::string> oov_words);

// Replaces each <unk> by phrase_table[src_j] or src_j itself, where j is the
// most attended source position at that step (lowest j on ties).
std::vector<std::string> replace_unknowns(const std::vector<std::string>& tokens,
                                          const std::vector<std::vector<double>>& attn,
                                          std::span<const std::string> src,
                                          const std::unordered_map<std::string, std::string>&
                                              phrase_table);

}  // namespace minimt
