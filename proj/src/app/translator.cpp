#include "minimt/translator.hpp"

#include <charconv>

#include "json.hpp"
#include "minimt/io.hpp"
#include "minimt/tokenizer.hpp"

namespace minimt {

using json = nlohmann::json;

std::vector<std::string> TextPipeline::encode(std::string_view line) const {
  std::vector<std::string> tokens;
  if (tokenize) {
    TokenizerOptions o;
    o.joiner = joiner;
    tokens = minimt::tokenize(line, o);
  } else {
    tokens = split_whitespace(line);
  }
  if (!bpe) return tokens;
  if (tokenize) return bpe_segment(*bpe, tokens, joiner);
  std::vector<std::string> pieces;
  for (const auto& t : tokens) {
    for (auto& p : bpe_apply(*bpe, t, joiner)) pieces.push_back(std::move(p));
  }
  return pieces;
}

std::string TextPipeline::decode(std::span<const std::string> tokens) const {
  if (tokenize) {
    TokenizerOptions o;
    o.joiner = joiner;
    return detokenize(tokens, o);
  }
  if (bpe) {
    const auto words = bpe_merge_pieces(tokens, joiner);
    return join_tokens(words);
  }
  return join_tokens(tokens);
}

std::string TextPipeline::to_json() const {
  json j = {{"tokenize", tokenize},
            {"joiner", joiner},
            {"max_len", max_len},
            {"n_feats", n_feats},
            {"bpe", bpe ? json(bpe_to_text(*bpe)) : json(nullptr)}};
  return j.dump();
}

TextPipeline TextPipeline::from_json(std::string_view text) {
  TextPipeline p;
  try {
    const json j = json::parse(text);
    j.at("tokenize").get_to(p.tokenize);
    j.at("joiner").get_to(p.joiner);
    j.at("max_len").get_to(p.max_len);
    j.at("n_feats").get_to(p.n_feats);
    if (!j.at("bpe").is_null()) p.bpe = bpe_from_text(j.at("bpe").get<std::string>());
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed text pipeline: ") + e.what());
  }
  return p;
}

Translator::Translator(Seq2Seq model, Vocabs vocabs, TextPipeline pipeline, std::string name)
    : model_(std::move(model)),
      vocabs_(std::move(vocabs)),
      pipeline_(std::move(pipeline)),
      name_(std::move(name)) {}

Translator Translator::load(const std::filesystem::path& checkpoint) {
  Checkpoint ck = load_checkpoint(checkpoint);
  if (!ck.vocabs) throw FormatError(checkpoint.string() + " carries no vocabularies");
  const std::filesystem::path sidecar = checkpoint.string() + ".json";
  if (std::filesystem::exists(sidecar)) {
    json side;
    try {
      side = json::parse(read_file(sidecar));
    } catch (const json::exception& e) {
      throw FormatError("malformed sidecar " + sidecar.string() + ": " + e.what());
    }
    const std::string hash = minimt::config_hash(ck.model.config());
    if (side.value("config_hash", hash) != hash) {
      throw FormatError("config hash of " + checkpoint.string() + " disagrees with its sidecar");
    }
    const std::string src_hash = hex64(fnv1a64(vocab_to_text(ck.vocabs->src)));
    const std::string tgt_hash = hex64(fnv1a64(vocab_to_text(ck.vocabs->tgt)));
    if (side.value("src_vocab_hash", src_hash) != src_hash ||
        side.value("tgt_vocab_hash", tgt_hash) != tgt_hash) {
      throw FormatError("vocabularies of " + checkpoint.string() + " disagree with its sidecar");
    }
  }
  TextPipeline pipeline;
  pipeline.n_feats = ck.vocabs->feats.size();
  if (!ck.metadata.empty()) {
    const json meta = json::parse(ck.metadata);
    if (meta.contains("pipeline")) pipeline = TextPipeline::from_json(meta.at("pipeline").dump());
  }
  return Translator(std::move(ck.model), std::move(*ck.vocabs), std::move(pipeline),
                    checkpoint.filename().string());
}

namespace {

// Sentences decoded together; any size gives the same output.
constexpr std::size_t kChunk = 32;

struct Prepared {
  RawExample raw;
  Example ex;
  std::vector<std::string> oov_words;
};

Prepared prepare(const TextPipeline& pipeline, const Vocabs& vocabs, const std::string& line) {
  Prepared p;
  const auto tokens = pipeline.encode(line);
  if (tokens.size() > pipeline.max_len) {
    throw DecodeError("input has " + std::to_string(tokens.size()) +
                      " tokens, more than max_len " + std::to_string(pipeline.max_len));
  }
  p.raw = parse_example(join_tokens(tokens), "", pipeline.n_feats);
  p.ex = numericalize(p.raw, vocabs, 0);
  source_copy_map(p.raw.src, vocabs.tgt, &p.oov_words);
  return p;
}

}  // namespace

std::vector<Translation> Translator::translate(std::span<const std::string> lines,
                                               const DecodeOptions& opts) const {
  opts.validate();
  std::vector<Translation> out(lines.size());
  for (std::size_t begin = 0; begin < lines.size(); begin += kChunk) {
    const std::size_t end = std::min(lines.size(), begin + kChunk);
    std::vector<Prepared> prepared;
    std::vector<std::size_t> slot;
    for (std::size_t i = begin; i < end; ++i) {
      if (split_whitespace(lines[i]).empty()) {
        out[i].n_best.push_back({});
        continue;
      }
      try {
        prepared.push_back(prepare(pipeline_, vocabs_, lines[i]));
        slot.push_back(i);
      } catch (const std::exception& e) {
        out[i].error = e.what();
      }
    }
    std::vector<Example> examples;
    for (const auto& p : prepared) examples.push_back(p.ex);
    const auto results = translate_batch(model_, examples, opts);
    for (std::size_t k = 0; k < results.size(); ++k) {
      Translation& t = out[slot[k]];
      const DecodeResult& r = results[k];
      const Prepared& p = prepared[k];
      t.src_tokens = p.raw.src;
      if (!r.error.empty() || r.hyps.empty()) {
        t.error = r.error.empty() ? "no hypothesis" : r.error;
        continue;
      }
      t.constraint_unsatisfied = r.constraint_unsatisfied;
      try {
        for (std::size_t n = 0; n < r.hyps.size(); ++n) {
          const Hypothesis& h = r.hyps[n];
          auto toks = hypothesis_tokens(h, vocabs_.tgt, p.oov_words);
          if (opts.replace_unk) toks = replace_unknowns(toks, h.attn, p.raw.src, opts.phrase_table);
          NBestEntry e{pipeline_.decode(toks), h.normalized, h.score};
          if (n == 0) {
            t.tgt = e.tgt;
            t.normalized = h.normalized;
            t.score = h.score;
            t.tgt_tokens = std::move(toks);
            t.attn = h.attn;
          }
          t.n_best.push_back(std::move(e));
        }
      } catch (const std::exception& e) {
        t = Translation{};
        t.error = e.what();
      }
    }
  }
  return out;
}

std::string format_score(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::string nbest_lines(const Translation& t) {
  std::string out;
  for (std::size_t n = 0; n < t.n_best.size(); ++n) {
    const auto& e = t.n_best[n];
    out += std::to_string(n + 1) + " ||| " + e.tgt + " ||| " + format_score(e.normalized) +
           " ||| " + format_score(e.score) + "\n";
  }
  return out;
}

}  // namespace minimt
