#include "minimt/commands.hpp"

#include <pthread.h>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <csignal>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <thread>

#include "CLI11.hpp"
#include "minimt/io.hpp"
#include "minimt/server.hpp"
#include "minimt/translator.hpp"

namespace minimt {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path with_suffix(const fs::path& prefix, const std::string& suffix) {
  return fs::path(prefix.string() + suffix);
}

// Removes scratch files however the command ends.
struct ScratchFiles {
  std::vector<fs::path> paths;
  ~ScratchFiles() {
    std::error_code ec;
    for (const auto& p : paths) fs::remove(p, ec);
  }
};

std::ifstream open_input(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  return in;
}

// Runs both sides of a corpus through the pipeline line by line, keeping
// the two outputs line-aligned.
void transform_pair(const fs::path& src_in, const fs::path& tgt_in, const fs::path& src_out,
                    const fs::path& tgt_out, const TextPipeline& pipeline) {
  auto a = open_input(src_in);
  auto b = open_input(tgt_in);
  std::ofstream oa(src_out, std::ios::binary), ob(tgt_out, std::ios::binary);
  if (!oa || !ob) throw DataError("cannot write " + src_out.parent_path().string());
  std::string ls, lt;
  std::size_t n = 0;
  for (;;) {
    const bool ha = static_cast<bool>(std::getline(a, ls));
    const bool hb = static_cast<bool>(std::getline(b, lt));
    if (!ha && !hb) break;
    if (ha != hb) {
      throw DataError("line-count mismatch: line " + std::to_string(n + 1) + " exists in " +
                      (ha ? src_in : tgt_in).string() + " but not in " +
                      (ha ? tgt_in : src_in).string());
    }
    ++n;
    oa << join_tokens(pipeline.encode(ls)) << '\n';
    ob << join_tokens(pipeline.encode(lt)) << '\n';
  }
  oa.close();
  ob.close();
  if (!oa || !ob) throw DataError("failed writing " + src_out.string());
}

// Tokenized training words on both sides, the material BPE is learned from.
std::vector<std::string> bpe_training_tokens(const fs::path& src, const fs::path& tgt,
                                             const TextPipeline& tokenizer) {
  std::vector<std::string> tokens;
  for (const auto& p : {src, tgt}) {
    auto in = open_input(p);
    std::string line;
    while (std::getline(in, line)) {
      for (auto& t : tokenizer.encode(line)) tokens.push_back(std::move(t));
    }
  }
  return tokens;
}

std::string shard_name(const std::string& stem, const std::string& kind, std::size_t i) {
  return stem + "." + kind + "." + std::to_string(i) + ".shard";
}

std::vector<std::string> shard_names(const std::string& stem, const std::string& kind,
                                     std::size_t n) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < n; ++i) names.push_back(shard_name(stem, kind, i));
  return names;
}

// Numericalizes and writes one corpus, appending each shard size to `sizes`.
ShardingStats write_shards(const fs::path& src, const fs::path& tgt, const fs::path& dir,
                           const std::string& stem, const std::string& kind,
                           const Config& cfg, const Vocabs& vocabs,
                           std::vector<std::size_t>* sizes) {
  std::int64_t index = 0;
  return shard_corpus(src, tgt, cfg.size("shard_size"), cfg.size("max_len"),
                      cfg.size("src_features"), [&](std::size_t i, std::vector<RawExample>&& raw) {
                        Shard s;
                        s.index = i;
                        for (const auto& r : raw) s.examples.push_back(numericalize(r, vocabs, index++));
                        write_shard(dir / shard_name(stem, kind, i), s);
                        sizes->push_back(s.examples.size());
                      });
}

bool same_vocabs(const Vocabs& a, const Vocabs& b) {
  return a.src == b.src && a.tgt == b.tgt && a.feats == b.feats;
}

}  // namespace

PreprocessResult cmd_preprocess(const Config& cfg, std::ostream& log) {
  for (const char* key : {"train_src", "train_tgt", "save_data"}) {
    if (cfg.str(key).empty()) throw ConfigError(std::string(key) + " is required");
  }
  if (cfg.str("valid_src").empty() != cfg.str("valid_tgt").empty()) {
    throw ConfigError("valid_src and valid_tgt go together");
  }
  if (cfg.size("shard_size") == 0) throw ConfigError("shard_size must be positive");
  const std::size_t n_feats = cfg.size("src_features");

  TextPipeline pipeline;
  pipeline.tokenize = cfg.flag("tokenize");
  pipeline.max_len = cfg.size("max_len");
  pipeline.n_feats = n_feats;
  const std::size_t merges = cfg.size("bpe_merges");
  if (n_feats > 0 && (pipeline.tokenize || merges > 0)) {
    throw ConfigError("source features need pre-tokenized input: disable tokenize and bpe_merges");
  }

  const fs::path save = cfg.str("save_data");
  const fs::path dir = save.parent_path().empty() ? fs::path(".") : save.parent_path();
  const std::string stem = save.filename().string();
  fs::create_directories(dir);

  fs::path train_src = cfg.str("train_src"), train_tgt = cfg.str("train_tgt");
  fs::path valid_src = cfg.str("valid_src"), valid_tgt = cfg.str("valid_tgt");
  const bool has_valid = !valid_src.empty();
  ShardManifest m;
  if (merges > 0) {
    const auto tokens = bpe_training_tokens(train_src, train_tgt, pipeline);
    pipeline.bpe = bpe_learn(tokens, merges, pipeline.joiner);
    save_bpe(with_suffix(save, ".bpe"), *pipeline.bpe);
    log << "learned " << pipeline.bpe->size() << " BPE merges\n";
  }
  ScratchFiles scratch;
  if (!pipeline.identity()) {
    const auto tmp = [&](const std::string& what) {
      scratch.paths.push_back(with_suffix(save, ".tmp." + what));
      return scratch.paths.back();
    };
    const fs::path ts = tmp("train.src"), tt = tmp("train.tgt");
    transform_pair(train_src, train_tgt, ts, tt, pipeline);
    train_src = ts;
    train_tgt = tt;
    if (has_valid) {
      const fs::path vs = tmp("valid.src"), vt = tmp("valid.tgt");
      transform_pair(valid_src, valid_tgt, vs, vt, pipeline);
      valid_src = vs;
      valid_tgt = vt;
    }
  }

  // Vocabularies come from the training pairs that survive filtering.
  const bool shared = cfg.flag("share_vocab");
  VocabCounter src_count, tgt_count;
  std::vector<VocabCounter> feat_count(n_feats);
  shard_corpus(train_src, train_tgt, cfg.size("shard_size"), pipeline.max_len, n_feats,
               [&](std::size_t, std::vector<RawExample>&& raw) {
                 for (const auto& r : raw) {
                   src_count.add(r.src);
                   (shared ? src_count : tgt_count).add(r.tgt);
                   for (std::size_t k = 0; k < n_feats; ++k) feat_count[k].add(r.src_feats[k]);
                 }
               });
  Vocabs vocabs;
  const auto min_freq = static_cast<std::uint64_t>(cfg.size("words_min_frequency"));
  vocabs.src = src_count.build(cfg.size("src_vocab_size"), min_freq);
  vocabs.tgt = shared ? vocabs.src : tgt_count.build(cfg.size("tgt_vocab_size"), min_freq);
  for (auto& c : feat_count) vocabs.feats.push_back(c.build(std::numeric_limits<std::size_t>::max(), 1));

  m.shared_vocab = shared;
  m.src_vocab = stem + (shared ? ".vocab" : ".src.vocab");
  m.tgt_vocab = stem + (shared ? ".vocab" : ".tgt.vocab");
  save_vocab(dir / m.src_vocab, vocabs.src);
  if (!shared) save_vocab(dir / m.tgt_vocab, vocabs.tgt);
  for (std::size_t k = 0; k < n_feats; ++k) {
    m.feat_vocabs.push_back(stem + ".feat" + std::to_string(k) + ".vocab");
    save_vocab(dir / m.feat_vocabs.back(), vocabs.feats[k]);
  }

  PreprocessResult result;
  result.train = write_shards(train_src, train_tgt, dir, stem, "train", cfg, vocabs, &m.train_sizes);
  if (result.train.kept == 0) throw DataError("no training pair survives filtering");
  m.train_shards = shard_names(stem, "train", m.train_sizes.size());
  if (has_valid) {
    result.valid = write_shards(valid_src, valid_tgt, dir, stem, "valid", cfg, vocabs, &m.valid_sizes);
    m.valid_shards = shard_names(stem, "valid", m.valid_sizes.size());
  }
  m.max_len = pipeline.max_len;
  m.shard_size = cfg.size("shard_size");
  m.seed = static_cast<std::uint64_t>(cfg.integer("seed"));
  m.dropped = result.train.dropped;
  m.pipeline = pipeline.to_json();
  m.config = cfg.values.dump();
  result.manifest = with_suffix(save, ".manifest.json");
  save_manifest(result.manifest, m);
  log << "train: read " << result.train.read << ", kept " << result.train.kept << ", dropped "
      << result.train.dropped << " in " << m.train_shards.size() << " shard(s)\n";
  if (has_valid) {
    log << "valid: read " << result.valid.read << ", kept " << result.valid.kept << ", dropped "
        << result.valid.dropped << "\n";
  }
  log << "vocab: src " << vocabs.src.size() << ", tgt " << vocabs.tgt.size() << "\n";
  log << "manifest: " << result.manifest.string() << "\n";
  return result;
}

fs::path resolve_manifest(const std::string& data) {
  if (data.empty()) throw ConfigError("data is required");
  if (fs::is_regular_file(data)) return data;
  const fs::path alt = data + ".manifest.json";
  if (fs::is_regular_file(alt)) return alt;
  throw DataError("missing manifest: " + data);
}

void cmd_train(const Config& cfg, std::ostream& log) {
  const fs::path manifest_path = fs::absolute(resolve_manifest(cfg.str("data")));
  const ShardManifest m = load_manifest(manifest_path);
  const Vocabs vocabs = load_vocabs(manifest_path, m);
  const ShardSet train = ShardSet::from_manifest(manifest_path, "train");
  const ShardSet valid = ShardSet::from_manifest(manifest_path, "valid");

  TextPipeline pipeline;
  if (!m.pipeline.empty()) {
    pipeline = TextPipeline::from_json(m.pipeline);
  } else {
    pipeline.max_len = m.max_len;
    pipeline.n_feats = m.feat_vocabs.size();
  }
  const json metadata = {{"pipeline", json::parse(pipeline.to_json())}, {"config", cfg.values}};

  TrainOptions options = train_options_from(cfg);
  if (options.save_model.empty()) throw ConfigError("save_model is required");
  std::optional<Trainer> trainer;
  if (!cfg.str("from").empty()) {
    Checkpoint ck = load_checkpoint(cfg.str("from"));
    if (ck.vocabs && !same_vocabs(*ck.vocabs, vocabs)) {
      throw DataError("checkpoint " + cfg.str("from") + " was trained with other vocabularies");
    }
    // Resume with the stored options; keys given explicitly win.
    json o = json::parse(train_options_to_json(ck.options));
    const json fresh = json::parse(train_options_to_json(options));
    for (const auto& key : cfg.explicit_keys) {
      if (o.contains(key)) o[key] = fresh.at(key);
    }
    options = train_options_from_json(o.dump());
    options.validate();
    log << "resuming from " << cfg.str("from") << " at step " << ck.state.step << "\n";
    trainer.emplace(std::move(ck.model), options, std::move(ck.optim), ck.state);
  } else {
    trainer.emplace(Seq2Seq(model_config_from(cfg, vocabs), options.seed), options);
  }
  trainer->set_checkpoint_extras(vocabs, manifest_path.string(), metadata.dump());
  log << "model: " << trainer->model().num_weights() << " weights, config "
      << config_hash(trainer->model().config()) << "\n";
  trainer->fit(train, valid.count() ? &valid : nullptr, &log);
}

void cmd_translate(const Config& cfg, std::ostream& out, std::ostream& log) {
  if (cfg.str("model").empty()) throw ConfigError("model is required");
  if (cfg.str("src").empty()) throw ConfigError("src is required");
  const Translator tr = Translator::load(cfg.str("model"));
  const DecodeOptions opts = decode_options_from(cfg);
  const auto lines = read_lines(cfg.str("src"));
  const auto results = tr.translate(lines, opts);

  std::size_t failed = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    if (!results[i].error.empty()) {
      log << "line " << i + 1 << ": " << results[i].error << "\n";
      ++failed;
    } else if (results[i].constraint_unsatisfied) {
      log << "line " << i + 1 << ": constraints could not be satisfied\n";
    }
  }
  if (failed) throw DecodeError(std::to_string(failed) + " line(s) could not be translated");

  const bool nbest = opts.n_best > 1 || cfg.flag("print_scores");
  std::string text;
  for (const auto& r : results) text += nbest ? nbest_lines(r) : r.tgt + "\n";
  if (!cfg.str("dump_beam").empty()) {
    json dump = json::array();
    for (std::size_t i = 0; i < results.size(); ++i) {
      const auto& r = results[i];
      json n_best = json::array();
      for (const auto& e : r.n_best) {
        n_best.push_back({{"tgt", e.tgt}, {"score", e.normalized}, {"raw_score", e.score}});
      }
      dump.push_back({{"id", i + 1},
                      {"src", r.src_tokens},
                      {"tgt", r.tgt_tokens},
                      {"attn", r.attn},
                      {"n_best", n_best}});
    }
    write_file_atomic(cfg.str("dump_beam"), dump.dump() + "\n");
  }
  if (cfg.str("output").empty()) {
    out << text << std::flush;
  } else {
    write_file_atomic(cfg.str("output"), text);
  }
  log << "translated " << results.size() << " line(s)\n";
}

namespace {

const char* embedding_param(const std::string& side) {
  if (side == "src") return "src_emb";
  if (side == "tgt") return "tgt_emb";
  throw ConfigError("side must be src or tgt, got " + side);
}

Checkpoint load_for_embeddings(const Config& cfg) {
  if (cfg.str("model").empty()) throw ConfigError("model is required");
  if (cfg.str("vectors").empty()) throw ConfigError("vectors is required");
  Checkpoint ck = load_checkpoint(cfg.str("model"));
  if (!ck.vocabs) throw FormatError(cfg.str("model") + " carries no vocabularies");
  return ck;
}

}  // namespace

void cmd_embeddings_export(const Config& cfg) {
  const Checkpoint ck = load_for_embeddings(cfg);
  const std::string side = cfg.str("side");
  const Vocab& vocab = side == "tgt" ? ck.vocabs->tgt : ck.vocabs->src;
  const Tensor& emb = ck.model.param(embedding_param(side));
  const std::size_t d = emb.dim(1);
  std::string text;
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    text += vocab.tokens()[i];
    for (std::size_t j = 0; j < d; ++j) text += " " + format_score(emb.data()[i * d + j]);
    text += "\n";
  }
  write_file_atomic(cfg.str("vectors"), text);
}

ImportReport cmd_embeddings_import(const Config& cfg) {
  Checkpoint ck = load_for_embeddings(cfg);
  const std::string side = cfg.str("side");
  const Vocab& vocab = side == "tgt" ? ck.vocabs->tgt : ck.vocabs->src;
  const std::string name = embedding_param(side);
  auto& params = ck.model.params();
  auto slot = std::find_if(params.begin(), params.end(), [&](const Parameter& p) { return p.name == name; });
  if (slot == params.end()) throw FormatError("checkpoint has no " + name);
  Tensor& emb = slot->value;
  const std::size_t d = emb.dim(1);

  std::unordered_map<std::string, std::vector<double>> vectors;
  std::size_t n = 0;
  for (const auto& line : read_lines(cfg.str("vectors"))) {
    ++n;
    auto fields = split_whitespace(line);
    if (fields.empty()) continue;
    if (fields.size() - 1 != d) {
      throw ConfigError("vectors line " + std::to_string(n) + " has " +
                        std::to_string(fields.size() - 1) + " values, expected " +
                        std::to_string(d));
    }
    std::vector<double> v(d);
    for (std::size_t j = 0; j < d; ++j) {
      const auto& f = fields[j + 1];
      auto [p, ec] = std::from_chars(f.data(), f.data() + f.size(), v[j]);
      if (ec != std::errc() || p != f.data() + f.size()) {
        throw ConfigError("vectors line " + std::to_string(n) + ": bad number '" + f + "'");
      }
    }
    if (!vectors.emplace(fields[0], std::move(v)).second) {
      throw ConfigError("vectors line " + std::to_string(n) + ": duplicate word " + fields[0]);
    }
  }

  ImportReport report;
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    auto it = vectors.find(vocab.tokens()[i]);
    if (it == vectors.end()) {
      ++report.kept;
      continue;
    }
    std::copy(it->second.begin(), it->second.end(), emb.data().begin() + static_cast<std::ptrdiff_t>(i * d));
    ++report.loaded;
  }
  const std::string target = cfg.str("output").empty() ? cfg.str("model") : cfg.str("output");
  save_checkpoint(target, ck.model, ck.optim, ck.state, ck.options, &*ck.vocabs, ck.data_path,
                  ck.metadata);
  return report;
}

void cmd_serve(const Config& cfg, std::ostream& log) {
  if (cfg.str("model").empty()) throw ConfigError("model is required");
  const long long port = cfg.integer("port");
  if (port < 0 || port > 65535) throw ConfigError("port must lie in [0, 65535]");
  const Translator tr = Translator::load(cfg.str("model"));
  const TranslationService service(tr, decode_options_from(cfg));
  HttpServer server(service, cfg.size("threads"));

  // Signals are taken by a dedicated thread; every other thread keeps them
  // blocked.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  std::atomic<bool> done{false};
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&set, &sig);
    if (!done) server.stop();
  });
  struct Join {
    std::thread& t;
    std::atomic<bool>& done;
    ~Join() {
      done = true;
      pthread_kill(t.native_handle(), SIGTERM);
      t.join();
    }
  } join{waiter, done};

  const int bound = server.bind(cfg.str("host"), static_cast<int>(port));
  log << "serving " << tr.name() << " on " << cfg.str("host") << ":" << bound << std::endl;
  server.listen();
  log << "shut down\n";
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"minimt: minimal neural machine translation"};
  app.require_subcommand(1);
  const json defaults = default_config();

  struct Sub {
    CLI::App* app;
    std::string config_path;
    std::map<std::string, std::string> raw;
    std::string action;
  };
  std::map<std::string, Sub> subs;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"preprocess", "Build vocabularies and shards from parallel text"},
      {"train", "Train a model on preprocessed data"},
      {"translate", "Translate a file with a trained model"},
      {"embeddings", "Import or export word embeddings of a checkpoint"},
      {"serve", "Serve translations over HTTP"}};
  for (const auto& [name, help] : commands) {
    Sub& s = subs[name];
    s.app = app.add_subcommand(name, help);
    s.app->add_option("--config", s.config_path, "JSON config file");
    if (name == "embeddings") {
      s.app->add_option("action", s.action, "import or export")
          ->required()
          ->check(CLI::IsMember({"import", "export"}));
    }
    for (const auto& [key, value] : defaults.items()) {
      auto* opt = s.app->add_option("--" + key, s.raw[key], "default: " + value.dump());
      if (value.is_boolean()) opt->expected(0, 1);
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    for (auto& [name, s] : subs) {
      if (!s.app->parsed()) continue;
      std::optional<json> file;
      if (!s.config_path.empty()) file = read_config_file(s.config_path);
      std::vector<std::pair<std::string, std::string>> flags;
      for (const auto& [key, text] : s.raw) {
        if (s.app->count("--" + key) > 0) flags.emplace_back(key, text);
      }
      const Config cfg = resolve_config(file ? &*file : nullptr, flags);
      if (name == "preprocess") {
        cmd_preprocess(cfg, err);
      } else if (name == "train") {
        cmd_train(cfg, err);
      } else if (name == "translate") {
        cmd_translate(cfg, out, err);
      } else if (name == "embeddings") {
        if (s.action == "export") {
          cmd_embeddings_export(cfg);
          err << "exported " << cfg.str("side") << " embeddings to " << cfg.str("vectors") << "\n";
        } else {
          const auto r = cmd_embeddings_import(cfg);
          err << r.loaded << " loaded, " << r.kept << " kept\n";
        }
      } else {
        cmd_serve(cfg, err);
      }
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace minimt
