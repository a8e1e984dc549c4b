#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "minimt/autograd.hpp"
#include "minimt/data.hpp"
#include "minimt/dropout.hpp"

namespace minimt {

enum class CellType { kLstm, kGru };
enum class AttentionType { kGeneral, kDot, kConcat, kNone };

std::string to_string(CellType c);
std::string to_string(AttentionType a);
CellType parse_cell(std::string_view s);
AttentionType parse_attention(std::string_view s);

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct FeatureSpec {
  std::size_t vocab_size = 0;
  std::size_t emb_size = 0;
};

// min(64, ceil(vocab^0.7))
std::size_t feature_emb_size(std::size_t vocab_size);

struct ModelConfig {
  CellType cell = CellType::kLstm;
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 2;
  std::size_t rnn_size = 500;
  std::size_t emb_size = 300;
  bool bidirectional = false;
  AttentionType attention = AttentionType::kGeneral;
  bool input_feed = true;
  bool copy = false;
  double dropout = 0.1;
  std::size_t src_vocab = 0;
  std::size_t tgt_vocab = 0;
  std::vector<FeatureSpec> src_features;

  // Throws ConfigError on the first violated constraint.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

bool operator==(const FeatureSpec& a, const FeatureSpec& b);

struct Parameter {
  std::string name;
  Tensor value;
};

struct EncoderOutput {
  std::size_t src_len = 0;     // S
  std::size_t batch_size = 0;  // B
  Tensor memory;               // [S*B, rnn_size], row s*B + b
  Tensor memory_proj;          // concat attention: memory projected once
  Tensor mask_bias;            // [S, B]: 0 at real positions, -inf at pads
  std::vector<int> src_map;    // S*B extended ids for copying, -1 at pads
  std::vector<std::size_t> lengths;
  std::vector<Tensor> final_h;  // per layer, [B, rnn_size]
  std::vector<Tensor> final_c;  // LSTM only
};

struct DecoderState {
  std::vector<Tensor> h;
  std::vector<Tensor> c;
  Tensor feed;  // previous attentional vector, [B, rnn_size]
};

struct StepOutput {
  Tensor h_tilde;  // [B, rnn_size]
  Tensor attn;     // [S, B]; undefined when attention is none
  DecoderState state;
};

struct LossResult {
  Tensor nll;  // scalar sum over non-pad target tokens
  std::size_t tokens = 0;
  std::size_t correct = 0;  // argmax hits, for teacher-forced accuracy
};

class Seq2Seq {
 public:
  Seq2Seq() = default;
  // Weights drawn from uniform(-0.1, 0.1), embeddings with unit variance;
  // LSTM forget biases start at 1.
  Seq2Seq(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }
  const Tensor& param(const std::string& name) const;
  Tensor& param(const std::string& name);
  std::size_t num_weights() const;
  Seq2Seq clone() const;

  // A null rng means inference: dropout off.
  EncoderOutput encode(Tape& t, const Batch& batch, Rng* rng = nullptr) const;
  EncoderOutput encode(Tape& t, const std::vector<int>& src, std::size_t src_len,
                       std::size_t batch_size, const std::vector<std::uint8_t>& src_mask,
                       const std::vector<std::vector<int>>& feats,
                       const std::vector<int>& src_map, Rng* rng = nullptr) const;

  DecoderState init_state(const EncoderOutput& enc) const;

  // One decoder step without the output layer. Ids beyond the target
  // vocabulary (copied words) are fed as <unk>.
  StepOutput step(Tape& t, const std::vector<int>& prev_ids, const DecoderState& state,
                  const EncoderOutput& enc, Rng* rng = nullptr) const;

  // Log-probabilities over the target vocabulary, or over the extended
  // vocabulary of width V + extra_width when copying.
  Tensor log_probs(Tape& t, const StepOutput& out, const EncoderOutput& enc,
                   std::size_t extra_width) const;

  // step followed by log_probs.
  std::pair<Tensor, StepOutput> decode_step(Tape& t, const std::vector<int>& prev_ids,
                                            const DecoderState& state,
                                            const EncoderOutput& enc,
                                            std::size_t extra_width) const;

  // Teacher-forced negative log-likelihood summed over target tokens.
  LossResult forward_loss(Tape& t, const Batch& batch, Rng* rng = nullptr) const;

  // Gathers rows of an encoder output / state so that row j of the result
  // is row rows[j] of the input; used to expand and reorder beams.
  EncoderOutput select(Tape& t, const EncoderOutput& enc, const std::vector<int>& rows) const;
  DecoderState select(Tape& t, const DecoderState& state, const std::vector<int>& rows) const;

 private:
  struct Cell {
    const Tensor* w;
    const Tensor* u;
    const Tensor* b;
    std::size_t hidden;
  };

  void add_param(std::string name, Shape shape);
  void build_index();
  Cell cell(const std::string& prefix) const;
  // Runs one direction of one encoder layer over precomputed input
  // projections, freezing the state past each sequence's end.
  std::vector<Tensor> run_direction(Tape& t, const Cell& c, const std::vector<Tensor>& xw,
                                    const std::vector<std::vector<int>>& live, bool reverse,
                                    std::size_t batch, Tensor* final_h,
                                    Tensor* final_c) const;
  std::pair<Tensor, Tensor> cell_step(Tape& t, const Cell& c, const Tensor& xw,
                                      const Tensor& h, const Tensor& cstate) const;
  Tensor maybe_dropout(Tape& t, const Tensor& x, Rng* rng) const;
  Tensor attention_scores(Tape& t, const Tensor& query, const EncoderOutput& enc) const;
  Tensor copy_mixture(Tape& t, const Tensor& h_tilde, const Tensor& p_vocab,
                      const Tensor& attn_ext) const;

  ModelConfig config_;
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Free-standing attention pieces over a [S*B, H] memory bank.
// kind general uses w ([H, H]); concat uses w ([H, A] for the query),
// w_mem ([H, A] for memory) and v ([A, 1]); dot needs equal widths.
Tensor attention_score(Tape& t, const Tensor& query, const Tensor& memory, AttentionType kind,
                       const Tensor* w = nullptr, const Tensor* w_mem = nullptr,
                       const Tensor* v = nullptr);

// Softmax over source positions with pads excluded, then the weighted
// memory sum. mask holds S*B flags (1 = real). Returns (context, weights).
std::pair<Tensor, Tensor> attend(Tape& t, const Tensor& scores, const Tensor& memory,
                                 const std::vector<std::uint8_t>& mask);

// p(w) = g * p_vocab(w) + (1 - g) * sum of attention on source positions
// whose extended id is w. gen_log_probs [B, V], attn [S, B], gate [B, 1].
Tensor copy_log_probs(Tape& t, const Tensor& gen_log_probs, const Tensor& attn,
                      const Tensor& gate, const std::vector<int>& src_map,
                      std::size_t extra_width);

// -inf where the mask is 0.
Tensor mask_bias(const std::vector<std::uint8_t>& mask, std::size_t src_len,
                 std::size_t batch_size);

}  // namespace minimt
