#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "minimt/beam.hpp"
#include "minimt/bpe.hpp"
#include "minimt/trainer.hpp"

namespace minimt {

// Raw text to model tokens and back. The same settings apply to both sides.
struct TextPipeline {
  bool tokenize = false;
  std::string joiner{kDefaultJoiner};
  std::optional<BpeModel> bpe;
  std::size_t max_len = kDefaultMaxLen;  // longest accepted input, in model tokens
  std::size_t n_feats = 0;

  std::vector<std::string> encode(std::string_view line) const;
  std::string decode(std::span<const std::string> tokens) const;
  bool identity() const { return !tokenize && !bpe; }

  std::string to_json() const;
  static TextPipeline from_json(std::string_view text);
};

struct NBestEntry {
  std::string tgt;
  double normalized = 0.0;
  double score = 0.0;
};

struct Translation {
  std::string tgt;         // detokenized best hypothesis
  double normalized = 0.0;  // its final score
  double score = 0.0;       // its log-probability
  std::vector<std::string> src_tokens;
  std::vector<std::string> tgt_tokens;
  std::vector<std::vector<double>> attn;  // T x S, one row per generated token
  std::vector<NBestEntry> n_best;
  bool constraint_unsatisfied = false;
  std::string error;  // non-empty when the line could not be translated
};

// Checkpoint plus text pipeline, immutable once loaded; translate() may run
// concurrently.
class Translator {
 public:
  // Checks the checkpoint against its sidecar and requires embedded
  // vocabularies.
  static Translator load(const std::filesystem::path& checkpoint);
  Translator(Seq2Seq model, Vocabs vocabs, TextPipeline pipeline, std::string name = {});

  // One result per line; a blank line translates to an empty string with
  // score 0.
  std::vector<Translation> translate(std::span<const std::string> lines,
                                     const DecodeOptions& opts) const;

  const Seq2Seq& model() const { return model_; }
  const Vocabs& vocabs() const { return vocabs_; }
  const TextPipeline& pipeline() const { return pipeline_; }
  const std::string& name() const { return name_; }
  std::string config_hash() const { return minimt::config_hash(model_.config()); }

 private:
  Seq2Seq model_;
  Vocabs vocabs_;
  TextPipeline pipeline_;
  std::string name_;
};

// Shortest text that parses back to the same double.
std::string format_score(double v);

// "rank ||| text ||| normalized ||| raw" lines, rank from 1.
std::string nbest_lines(const Translation& t);

}  // namespace minimt
