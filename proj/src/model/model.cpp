#include "minimt/model.hpp"

#include <cmath>
#include <limits>

namespace minimt {

namespace {

std::size_t gates(CellType c) { return c == CellType::kLstm ? 4 : 3; }

bool all_set(const std::vector<int>& flags) {
  for (int f : flags) {
    if (f == 0) return false;
  }
  return true;
}

}  // namespace

std::string to_string(CellType c) { return c == CellType::kLstm ? "lstm" : "gru"; }

std::string to_string(AttentionType a) {
  switch (a) {
    case AttentionType::kGeneral: return "general";
    case AttentionType::kDot: return "dot";
    case AttentionType::kConcat: return "concat";
    case AttentionType::kNone: return "none";
  }
  return "general";
}

CellType parse_cell(std::string_view s) {
  if (s == "lstm" || s == "LSTM") return CellType::kLstm;
  if (s == "gru" || s == "GRU") return CellType::kGru;
  throw ConfigError("unknown cell type: " + std::string(s));
}

AttentionType parse_attention(std::string_view s) {
  if (s == "general") return AttentionType::kGeneral;
  if (s == "dot") return AttentionType::kDot;
  if (s == "concat") return AttentionType::kConcat;
  if (s == "none") return AttentionType::kNone;
  throw ConfigError("unknown attention type: " + std::string(s));
}

bool operator==(const FeatureSpec& a, const FeatureSpec& b) {
  return a.vocab_size == b.vocab_size && a.emb_size == b.emb_size;
}

std::size_t feature_emb_size(std::size_t vocab_size) {
  const double w = std::ceil(std::pow(static_cast<double>(vocab_size), 0.7));
  return std::min<std::size_t>(64, static_cast<std::size_t>(w));
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError(what); };
  if (rnn_size == 0) fail("rnn_size must be positive");
  if (emb_size == 0) fail("emb_size must be positive");
  if (enc_layers < 1 || enc_layers > 16) fail("enc_layers must lie in [1, 16]");
  if (dec_layers < 1 || dec_layers > 16) fail("dec_layers must lie in [1, 16]");
  if (enc_layers != dec_layers) {
    fail("enc_layers and dec_layers must match; decoder layers start from encoder states");
  }
  if (bidirectional && rnn_size % 2 != 0) fail("bidirectional encoders need an even rnn_size");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
  if (src_vocab <= kNumReserved || tgt_vocab <= kNumReserved) {
    fail("vocabularies must hold at least one token beyond the reserved ones");
  }
  if (copy && attention == AttentionType::kNone) fail("copy requires an attention mechanism");
  for (const auto& f : src_features) {
    if (f.vocab_size == 0 || f.emb_size == 0) fail("feature vocab and width must be positive");
  }
}

// ---------------------------------------------------------------------------
// Free-standing attention

Tensor mask_bias(const std::vector<std::uint8_t>& mask, std::size_t src_len,
                 std::size_t batch_size) {
  if (mask.size() != src_len * batch_size) throw ShapeError("mask size disagrees with S x B");
  Tensor bias = Tensor::zeros({src_len, batch_size});
  auto d = bias.data();
  for (std::size_t b = 0; b < batch_size; ++b) {
    bool any = false;
    for (std::size_t s = 0; s < src_len; ++s) {
      if (mask[s * batch_size + b]) {
        any = true;
      } else {
        d[s * batch_size + b] = -std::numeric_limits<double>::infinity();
      }
    }
    if (!any) throw ShapeError("attention column " + std::to_string(b) + " is fully masked");
  }
  return bias;
}

Tensor attention_score(Tape& t, const Tensor& query, const Tensor& memory, AttentionType kind,
                       const Tensor* w, const Tensor* w_mem, const Tensor* v) {
  const std::size_t B = query.dim(0);
  const std::size_t S = memory.dim(0) / B;
  switch (kind) {
    case AttentionType::kDot:
      if (query.dim(1) != memory.dim(1)) {
        throw ShapeError("dot attention needs equal query and memory widths");
      }
      return ops::bank_dot(t, memory, query);
    case AttentionType::kGeneral:
      if (!w) throw ShapeError("general attention needs a weight matrix");
      return ops::bank_dot(t, memory, ops::matmul(t, query, *w));
    case AttentionType::kConcat: {
      if (!w || !w_mem || !v) throw ShapeError("concat attention needs W_q, W_mem and v");
      Tensor mem = ops::matmul(t, memory, *w_mem);
      Tensor q = ops::tile_rows(t, ops::matmul(t, query, *w), S);
      Tensor e = ops::matmul(t, ops::tanh(t, ops::add(t, q, mem)), *v);
      return ops::reshape(t, e, {S, B});
    }
    case AttentionType::kNone: break;
  }
  throw ShapeError("attention type none has no scores");
}

std::pair<Tensor, Tensor> attend(Tape& t, const Tensor& scores, const Tensor& memory,
                                 const std::vector<std::uint8_t>& mask) {
  Tensor bias = mask_bias(mask, scores.dim(0), scores.dim(1));
  Tensor weights = ops::softmax(t, ops::add(t, scores, bias), 0);
  return {ops::bank_weighted_sum(t, weights, memory), weights};
}

Tensor copy_log_probs(Tape& t, const Tensor& gen_log_probs, const Tensor& attn,
                      const Tensor& gate, const std::vector<int>& src_map,
                      std::size_t extra_width) {
  const std::size_t width = gen_log_probs.dim(1) + extra_width;
  if (src_map.size() != attn.numel()) throw ShapeError("src_map disagrees with attention");
  Tensor p_vocab = ops::pad_cols(t, ops::exp(t, gen_log_probs), extra_width);
  Tensor p_copy = ops::scatter_cols(t, attn, src_map, width);
  Tensor mix = ops::add(t, ops::scale_rows(t, p_vocab, gate),
                        ops::scale_rows(t, p_copy, ops::affine(t, gate, -1.0, 1.0)));
  return ops::log(t, mix);
}

// ---------------------------------------------------------------------------
// Parameters

void Seq2Seq::add_param(std::string name, Shape shape) {
  params_.push_back({std::move(name), Tensor::zeros(std::move(shape), true)});
}

void Seq2Seq::build_index() {
  index_.clear();
  for (std::size_t i = 0; i < params_.size(); ++i) index_[params_[i].name] = i;
}

Seq2Seq::Seq2Seq(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  const auto& c = config_;
  const std::size_t H = c.rnn_size;
  const std::size_t G = gates(c.cell);
  const std::size_t dir_h = c.bidirectional ? H / 2 : H;

  add_param("src_emb", {c.src_vocab, c.emb_size});
  std::size_t enc_in = c.emb_size;
  for (std::size_t k = 0; k < c.src_features.size(); ++k) {
    add_param("feat" + std::to_string(k) + "_emb",
              {c.src_features[k].vocab_size, c.src_features[k].emb_size});
    enc_in += c.src_features[k].emb_size;
  }
  add_param("tgt_emb", {c.tgt_vocab, c.emb_size});

  for (std::size_t l = 0; l < c.enc_layers; ++l) {
    const std::size_t in = l == 0 ? enc_in : H;
    for (const char* dir : {"fwd", "bwd"}) {
      if (!c.bidirectional && std::string(dir) == "bwd") continue;
      const std::string p = "enc." + std::to_string(l) + "." + dir + ".";
      add_param(p + "W", {in, G * dir_h});
      add_param(p + "U", {dir_h, G * dir_h});
      add_param(p + "b", {G * dir_h});
    }
    if (c.bidirectional) {
      const std::string p = "bridge." + std::to_string(l) + ".";
      add_param(p + "h.W", {H, H});
      add_param(p + "h.b", {H});
      if (c.cell == CellType::kLstm) {
        add_param(p + "c.W", {H, H});
        add_param(p + "c.b", {H});
      }
    }
  }
  for (std::size_t l = 0; l < c.dec_layers; ++l) {
    const std::size_t in = l == 0 ? c.emb_size + (c.input_feed ? H : 0) : H;
    const std::string p = "dec." + std::to_string(l) + ".";
    add_param(p + "W", {in, G * H});
    add_param(p + "U", {H, G * H});
    add_param(p + "b", {G * H});
  }
  switch (c.attention) {
    case AttentionType::kGeneral: add_param("attn.W", {H, H}); break;
    case AttentionType::kConcat:
      add_param("attn.Wq", {H, H});
      add_param("attn.Wm", {H, H});
      add_param("attn.v", {H, 1});
      break;
    case AttentionType::kDot:
    case AttentionType::kNone: break;
  }
  if (c.attention != AttentionType::kNone) add_param("attn.Wc", {2 * H, H});
  add_param("gen.W", {H, c.tgt_vocab});
  add_param("gen.b", {c.tgt_vocab});
  if (c.copy) {
    add_param("copy.W", {H, 1});
    add_param("copy.b", {1});
  }
  build_index();

  Rng rng(seed);
  // Weights uniform in [-0.1, 0.1]; embeddings uniform with unit variance,
  // otherwise small models barely pass token identity through two layers.
  const double emb_bound = std::sqrt(3.0);
  for (auto& p : params_) {
    const double bound = p.name.ends_with("_emb") ? emb_bound : 0.1;
    for (double& v : p.value.data()) v = (uniform01(rng) * 2.0 - 1.0) * bound;
  }
  if (c.cell == CellType::kLstm) {
    for (auto& p : params_) {
      const bool is_bias = p.name.size() > 2 && p.name.ends_with(".b") &&
                           (p.name.starts_with("enc.") || p.name.starts_with("dec."));
      if (!is_bias) continue;
      const std::size_t h = p.value.numel() / 4;
      auto d = p.value.data();
      for (std::size_t i = h; i < 2 * h; ++i) d[i] += 1.0;
    }
  }
}

const Tensor& Seq2Seq::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return params_[it->second].value;
}

Tensor& Seq2Seq::param(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return params_[it->second].value;
}

std::size_t Seq2Seq::num_weights() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

Seq2Seq Seq2Seq::clone() const {
  Seq2Seq m;
  m.config_ = config_;
  for (const auto& p : params_) {
    Tensor v = p.value.clone();
    v.set_requires_grad(true);
    m.params_.push_back({p.name, v});
  }
  m.build_index();
  return m;
}

Seq2Seq::Cell Seq2Seq::cell(const std::string& prefix) const {
  const Tensor& u = param(prefix + "U");
  return {&param(prefix + "W"), &u, &param(prefix + "b"), u.dim(0)};
}

// ---------------------------------------------------------------------------
// Recurrence

Tensor Seq2Seq::maybe_dropout(Tape& t, const Tensor& x, Rng* rng) const {
  if (!rng || config_.dropout == 0.0) return x;
  return ops::dropout(t, x, dropout_mask(x.shape(), config_.dropout, *rng));
}

std::pair<Tensor, Tensor> Seq2Seq::cell_step(Tape& t, const Cell& c, const Tensor& xw,
                                             const Tensor& h, const Tensor& cstate) const {
  const std::size_t n = c.hidden;
  Tensor hu = ops::matmul(t, h, *c.u);
  if (config_.cell == CellType::kLstm) {
    Tensor g = ops::add(t, xw, hu);
    Tensor i = ops::sigmoid(t, ops::slice(t, g, 1, 0, n));
    Tensor f = ops::sigmoid(t, ops::slice(t, g, 1, n, 2 * n));
    Tensor z = ops::tanh(t, ops::slice(t, g, 1, 2 * n, 3 * n));
    Tensor o = ops::sigmoid(t, ops::slice(t, g, 1, 3 * n, 4 * n));
    Tensor c_new = ops::add(t, ops::mul(t, f, cstate), ops::mul(t, i, z));
    Tensor h_new = ops::mul(t, o, ops::tanh(t, c_new));
    return {h_new, c_new};
  }
  // GRU: r and z gates, candidate n = tanh(W_n x + b_n + r * (U_n h)).
  Tensor rz = ops::sigmoid(t, ops::add(t, ops::slice(t, xw, 1, 0, 2 * n),
                                       ops::slice(t, hu, 1, 0, 2 * n)));
  Tensor r = ops::slice(t, rz, 1, 0, n);
  Tensor z = ops::slice(t, rz, 1, n, 2 * n);
  Tensor cand = ops::tanh(t, ops::add(t, ops::slice(t, xw, 1, 2 * n, 3 * n),
                                      ops::mul(t, r, ops::slice(t, hu, 1, 2 * n, 3 * n))));
  Tensor h_new = ops::add(t, cand, ops::mul(t, z, ops::sub(t, h, cand)));
  return {h_new, Tensor()};
}

std::vector<Tensor> Seq2Seq::run_direction(Tape& t, const Cell& c, const std::vector<Tensor>& xw,
                                           const std::vector<std::vector<int>>& live,
                                           bool reverse, std::size_t batch, Tensor* final_h,
                                           Tensor* final_c) const {
  const std::size_t S = xw.size();
  const bool lstm = config_.cell == CellType::kLstm;
  Tensor h = Tensor::zeros({batch, c.hidden});
  Tensor cs = lstm ? Tensor::zeros({batch, c.hidden}) : Tensor();
  std::vector<Tensor> out(S);
  for (std::size_t k = 0; k < S; ++k) {
    const std::size_t s = reverse ? S - 1 - k : k;
    auto [h_new, c_new] = cell_step(t, c, xw[s], h, cs);
    if (all_set(live[s])) {
      h = h_new;
      cs = c_new;
    } else {
      h = ops::select_rows(t, h_new, h, live[s]);
      if (lstm) cs = ops::select_rows(t, c_new, cs, live[s]);
    }
    out[s] = h;
  }
  *final_h = h;
  if (final_c) *final_c = cs;
  return out;
}

EncoderOutput Seq2Seq::encode(Tape& t, const Batch& batch, Rng* rng) const {
  std::vector<int> src(batch.src.begin(), batch.src.end());
  std::vector<std::vector<int>> feats;
  for (const auto& f : batch.src_feats) feats.emplace_back(f.begin(), f.end());
  std::vector<int> src_map(batch.src_map.begin(), batch.src_map.end());
  return encode(t, src, batch.src_len, batch.batch_size, batch.src_mask, feats, src_map, rng);
}

EncoderOutput Seq2Seq::encode(Tape& t, const std::vector<int>& src, std::size_t S,
                              std::size_t B, const std::vector<std::uint8_t>& src_mask,
                              const std::vector<std::vector<int>>& feats,
                              const std::vector<int>& src_map, Rng* rng) const {
  const auto& c = config_;
  if (src.size() != S * B || src_mask.size() != S * B) {
    throw ShapeError("source ids do not form an S x B matrix");
  }
  if (feats.size() != c.src_features.size()) {
    throw ShapeError("batch has " + std::to_string(feats.size()) + " source features, model " +
                     std::to_string(c.src_features.size()));
  }
  EncoderOutput enc;
  enc.src_len = S;
  enc.batch_size = B;
  enc.src_map = src_map;
  enc.lengths.assign(B, 0);
  std::vector<std::vector<int>> live(S, std::vector<int>(B));
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t b = 0; b < B; ++b) {
      live[s][b] = src_mask[s * B + b];
      enc.lengths[b] += src_mask[s * B + b];
    }
  }
  enc.mask_bias = mask_bias(src_mask, S, B);

  std::vector<Tensor> pieces{ops::embedding_lookup(t, param("src_emb"), src)};
  for (std::size_t k = 0; k < feats.size(); ++k) {
    pieces.push_back(ops::embedding_lookup(t, param("feat" + std::to_string(k) + "_emb"),
                                           feats[k]));
  }
  Tensor x = pieces.size() == 1 ? pieces[0] : ops::concat(t, pieces, 1);

  const bool lstm = c.cell == CellType::kLstm;
  for (std::size_t l = 0; l < c.enc_layers; ++l) {
    if (l > 0) x = maybe_dropout(t, x, rng);
    std::vector<std::vector<Tensor>> dir_out;
    std::vector<Tensor> fin_h, fin_c;
    for (const char* dir : {"fwd", "bwd"}) {
      const bool bwd = std::string(dir) == "bwd";
      if (bwd && !c.bidirectional) continue;
      const Cell cl = cell("enc." + std::to_string(l) + "." + dir + ".");
      Tensor xw_all = ops::add(t, ops::matmul(t, x, *cl.w), *cl.b);
      std::vector<Tensor> xw(S);
      for (std::size_t s = 0; s < S; ++s) xw[s] = ops::slice(t, xw_all, 0, s * B, (s + 1) * B);
      Tensor fh, fc;
      dir_out.push_back(run_direction(t, cl, xw, live, bwd, B, &fh, lstm ? &fc : nullptr));
      fin_h.push_back(fh);
      fin_c.push_back(fc);
    }
    std::vector<Tensor> steps(S);
    for (std::size_t s = 0; s < S; ++s) {
      steps[s] = c.bidirectional
                     ? ops::concat(t, std::vector<Tensor>{dir_out[0][s], dir_out[1][s]}, 1)
                     : dir_out[0][s];
    }
    x = S == 1 ? steps[0] : ops::concat(t, steps, 0);
    if (c.bidirectional) {
      const std::string p = "bridge." + std::to_string(l) + ".";
      auto bridge = [&](const std::vector<Tensor>& fin, const std::string& which) {
        Tensor cat = ops::concat(t, fin, 1);
        return ops::add(t, ops::matmul(t, cat, param(p + which + ".W")), param(p + which + ".b"));
      };
      enc.final_h.push_back(bridge(fin_h, "h"));
      if (lstm) enc.final_c.push_back(bridge(fin_c, "c"));
    } else {
      enc.final_h.push_back(fin_h[0]);
      if (lstm) enc.final_c.push_back(fin_c[0]);
    }
  }
  enc.memory = x;
  if (c.attention == AttentionType::kConcat) {
    enc.memory_proj = ops::matmul(t, enc.memory, param("attn.Wm"));
  }
  return enc;
}

DecoderState Seq2Seq::init_state(const EncoderOutput& enc) const {
  DecoderState st;
  st.h = enc.final_h;
  st.c = enc.final_c;
  st.feed = Tensor::zeros({enc.batch_size, config_.rnn_size});
  return st;
}

Tensor Seq2Seq::attention_scores(Tape& t, const Tensor& query, const EncoderOutput& enc) const {
  const std::size_t S = enc.src_len;
  const std::size_t B = enc.batch_size;
  switch (config_.attention) {
    case AttentionType::kDot: return ops::bank_dot(t, enc.memory, query);
    case AttentionType::kGeneral:
      return ops::bank_dot(t, enc.memory, ops::matmul(t, query, param("attn.W")));
    case AttentionType::kConcat: {
      Tensor q = ops::tile_rows(t, ops::matmul(t, query, param("attn.Wq")), S);
      Tensor e = ops::matmul(t, ops::tanh(t, ops::add(t, q, enc.memory_proj)), param("attn.v"));
      return ops::reshape(t, e, {S, B});
    }
    case AttentionType::kNone: break;
  }
  throw ShapeError("attention type none has no scores");
}

StepOutput Seq2Seq::step(Tape& t, const std::vector<int>& prev_ids, const DecoderState& state,
                         const EncoderOutput& enc, Rng* rng) const {
  const auto& c = config_;
  const std::size_t B = enc.batch_size;
  if (prev_ids.size() != B || state.h.size() != c.dec_layers || !state.feed.defined()) {
    throw ShapeError("decoder state is not initialized for this batch");
  }
  std::vector<int> ids(prev_ids);
  for (int& id : ids) {
    if (id < 0) throw ShapeError("negative target id");
    if (static_cast<std::size_t>(id) >= c.tgt_vocab) id = kUnkId;
  }
  Tensor x = ops::embedding_lookup(t, param("tgt_emb"), ids);
  if (c.input_feed) x = ops::concat(t, std::vector<Tensor>{x, state.feed}, 1);

  StepOutput out;
  const bool lstm = c.cell == CellType::kLstm;
  for (std::size_t l = 0; l < c.dec_layers; ++l) {
    if (l > 0) x = maybe_dropout(t, x, rng);
    const Cell cl = cell("dec." + std::to_string(l) + ".");
    Tensor xw = ops::add(t, ops::matmul(t, x, *cl.w), *cl.b);
    auto [h, cs] = cell_step(t, cl, xw, state.h[l], lstm ? state.c[l] : Tensor());
    out.state.h.push_back(h);
    if (lstm) out.state.c.push_back(cs);
    x = h;
  }
  Tensor top = x;
  if (c.attention == AttentionType::kNone) {
    out.h_tilde = top;
  } else {
    Tensor scores = ops::add(t, attention_scores(t, top, enc), enc.mask_bias);
    out.attn = ops::softmax(t, scores, 0);
    Tensor context = ops::bank_weighted_sum(t, out.attn, enc.memory);
    out.h_tilde = ops::tanh(
        t, ops::matmul(t, ops::concat(t, std::vector<Tensor>{context, top}, 1), param("attn.Wc")));
  }
  out.h_tilde = maybe_dropout(t, out.h_tilde, rng);
  out.state.feed = out.h_tilde;
  return out;
}

Tensor Seq2Seq::copy_mixture(Tape& t, const Tensor& h_tilde, const Tensor& p_vocab,
                             const Tensor& attn_ext) const {
  const std::size_t extra = attn_ext.dim(1) - p_vocab.dim(1);
  Tensor gate = ops::sigmoid(t, ops::add(t, ops::matmul(t, h_tilde, param("copy.W")),
                                         param("copy.b")));
  return ops::add(t, ops::scale_rows(t, ops::pad_cols(t, p_vocab, extra), gate),
                  ops::scale_rows(t, attn_ext, ops::affine(t, gate, -1.0, 1.0)));
}

Tensor Seq2Seq::log_probs(Tape& t, const StepOutput& out, const EncoderOutput& enc,
                          std::size_t extra_width) const {
  Tensor logits = ops::add(t, ops::matmul(t, out.h_tilde, param("gen.W")), param("gen.b"));
  if (!config_.copy) return ops::log_softmax(t, logits, 1);
  Tensor p_vocab = ops::softmax(t, logits, 1);
  Tensor attn_ext =
      ops::scatter_cols(t, out.attn, enc.src_map, config_.tgt_vocab + extra_width);
  return ops::log(t, copy_mixture(t, out.h_tilde, p_vocab, attn_ext));
}

std::pair<Tensor, StepOutput> Seq2Seq::decode_step(Tape& t, const std::vector<int>& prev_ids,
                                                   const DecoderState& state,
                                                   const EncoderOutput& enc,
                                                   std::size_t extra_width) const {
  StepOutput out = step(t, prev_ids, state, enc, nullptr);
  Tensor lp = log_probs(t, out, enc, extra_width);
  return {lp, std::move(out)};
}

LossResult Seq2Seq::forward_loss(Tape& t, const Batch& batch, Rng* rng) const {
  const auto& c = config_;
  const std::size_t B = batch.batch_size;
  const std::size_t T = batch.tgt_len;
  if (T < 2) throw ShapeError("target batch must hold at least <s> and </s>");
  EncoderOutput enc = encode(t, batch, rng);
  DecoderState state = init_state(enc);
  const std::size_t width = c.tgt_vocab + static_cast<std::size_t>(batch.max_oov);

  std::vector<Tensor> h_tildes, attn_ext;
  std::vector<int> prev(B);
  for (std::size_t step_i = 0; step_i + 1 < T; ++step_i) {
    for (std::size_t b = 0; b < B; ++b) prev[b] = batch.tgt[step_i * B + b];
    StepOutput out = step(t, prev, state, enc, rng);
    h_tildes.push_back(out.h_tilde);
    if (c.copy) attn_ext.push_back(ops::scatter_cols(t, out.attn, enc.src_map, width));
    state = std::move(out.state);
  }
  const std::size_t N = (T - 1) * B;
  std::vector<int> targets(N);
  const auto& tgt_ids = c.copy ? batch.tgt_ext : batch.tgt;
  for (std::size_t i = 0; i < N; ++i) targets[i] = tgt_ids[B + i];

  Tensor all_h = h_tildes.size() == 1 ? h_tildes[0] : ops::concat(t, h_tildes, 0);
  Tensor logits = ops::add(t, ops::matmul(t, all_h, param("gen.W")), param("gen.b"));
  Tensor scores;  // per-row distribution used for accuracy
  Tensor token_ll;
  if (!c.copy) {
    scores = ops::log_softmax(t, logits, 1);
    token_ll = ops::pick(t, scores, targets, kPadId);
  } else {
    Tensor p_vocab = ops::softmax(t, logits, 1);
    Tensor ext = attn_ext.size() == 1 ? attn_ext[0] : ops::concat(t, attn_ext, 0);
    scores = copy_mixture(t, all_h, p_vocab, ext);
    // Pick before the log; pads get probability 1 so they add log(1) = 0.
    Tensor pad_one = Tensor::zeros({N});
    for (std::size_t i = 0; i < N; ++i) {
      if (targets[i] == kPadId) pad_one.data()[i] = 1.0;
    }
    token_ll = ops::log(t, ops::add(t, ops::pick(t, scores, targets, kPadId), pad_one));
  }
  LossResult r;
  r.nll = ops::affine(t, ops::sum(t, token_ll), -1.0, 0.0);
  const std::size_t W = scores.dim(1);
  auto sd = scores.data();
  for (std::size_t i = 0; i < N; ++i) {
    if (targets[i] == kPadId) continue;
    ++r.tokens;
    const double* row = sd.data() + i * W;
    std::size_t best = 0;
    for (std::size_t k = 1; k < W; ++k) {
      if (row[k] > row[best]) best = k;
    }
    if (static_cast<int>(best) == targets[i]) ++r.correct;
  }
  return r;
}

EncoderOutput Seq2Seq::select(Tape& t, const EncoderOutput& enc,
                              const std::vector<int>& rows) const {
  const std::size_t S = enc.src_len;
  const std::size_t B = enc.batch_size;
  const std::size_t R = rows.size();
  for (int r : rows) {
    if (r < 0 || static_cast<std::size_t>(r) >= B) throw ShapeError("row index out of range");
  }
  EncoderOutput out;
  out.src_len = S;
  out.batch_size = R;
  std::vector<int> mem_rows(S * R);
  std::vector<int> map(S * R);
  Tensor bias = Tensor::zeros({S, R});
  auto src_bias = enc.mask_bias.data();
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t j = 0; j < R; ++j) {
      const std::size_t from = s * B + static_cast<std::size_t>(rows[j]);
      mem_rows[s * R + j] = static_cast<int>(from);
      map[s * R + j] = enc.src_map.empty() ? -1 : enc.src_map[from];
      bias.data()[s * R + j] = src_bias[from];
    }
  }
  out.memory = ops::embedding_lookup(t, enc.memory, mem_rows);
  if (enc.memory_proj.defined()) {
    out.memory_proj = ops::embedding_lookup(t, enc.memory_proj, mem_rows);
  }
  out.mask_bias = bias;
  if (!enc.src_map.empty()) out.src_map = std::move(map);
  for (int r : rows) out.lengths.push_back(enc.lengths[static_cast<std::size_t>(r)]);
  for (const auto& h : enc.final_h) out.final_h.push_back(ops::embedding_lookup(t, h, rows));
  for (const auto& c : enc.final_c) out.final_c.push_back(ops::embedding_lookup(t, c, rows));
  return out;
}

DecoderState Seq2Seq::select(Tape& t, const DecoderState& state,
                             const std::vector<int>& rows) const {
  DecoderState out;
  for (const auto& h : state.h) out.h.push_back(ops::embedding_lookup(t, h, rows));
  for (const auto& c : state.c) out.c.push_back(ops::embedding_lookup(t, c, rows));
  out.feed = ops::embedding_lookup(t, state.feed, rows);
  return out;
}

}  // namespace minimt
