#include "minimt/config.hpp"

#include <charconv>

#include "minimt/io.hpp"

namespace minimt {

using json = nlohmann::json;

json default_config() {
  return json{
      // preprocess
      {"train_src", ""},
      {"train_tgt", ""},
      {"valid_src", ""},
      {"valid_tgt", ""},
      {"save_data", ""},
      {"src_vocab_size", 50000},
      {"tgt_vocab_size", 50000},
      {"words_min_frequency", 1},
      {"share_vocab", false},
      {"src_features", 0},
      {"max_len", 50},
      {"shard_size", 100000},
      {"tokenize", false},
      {"bpe_merges", 0},
      // model
      {"cell", "lstm"},
      {"layers", 2},
      {"rnn_size", 500},
      {"emb_size", 300},
      {"bidirectional", false},
      {"attention", "general"},
      {"input_feed", true},
      {"copy", false},
      {"dropout", 0.1},
      // train
      {"data", ""},
      {"save_model", ""},
      {"from", ""},
      {"epochs", 13},
      {"batch_size", 64},
      {"optim", "sgd"},
      {"learning_rate", 1.0},
      {"decay_factor", 0.5},
      {"start_decay_at", 9},
      {"clip_norm", 5.0},
      {"replicas", 1},
      {"mode", "sync"},
      {"staleness_bound", 1},
      {"seed", 1},
      {"report_every", 50},
      {"max_steps", 0},
      {"checkpoint_dtype", "f64"},
      // translate
      {"model", ""},
      {"src", ""},
      {"output", ""},
      {"beam_size", 5},
      {"n_best", 1},
      {"decode_max_len", 100},
      {"length_alpha", 0.0},
      {"coverage_beta", 0.0},
      {"replace_unk", false},
      {"phrase_table", ""},
      {"max_unk_count", -1},
      {"print_scores", false},
      {"dump_beam", ""},
      // embeddings
      {"side", "src"},
      {"vectors", ""},
      // serve
      {"host", "127.0.0.1"},
      {"port", 5000},
      {"threads", 4},
  };
}

json bpe_preset() {
  json j = default_config();
  j["tokenize"] = true;
  j["bpe_merges"] = 32000;
  j["max_len"] = 100;
  return j;
}

std::string Config::str(const std::string& key) const { return values.at(key).get<std::string>(); }

std::size_t Config::size(const std::string& key) const {
  const long long v = integer(key);
  if (v < 0) throw ConfigError(key + " must be non-negative");
  return static_cast<std::size_t>(v);
}

long long Config::integer(const std::string& key) const { return values.at(key).get<long long>(); }

double Config::number(const std::string& key) const { return values.at(key).get<double>(); }

bool Config::flag(const std::string& key) const { return values.at(key).get<bool>(); }

namespace {

const json& default_for(const std::string& key) {
  static const json defaults = default_config();
  auto it = defaults.find(key);
  if (it == defaults.end()) throw ConfigError("unknown config key: " + key);
  return *it;
}

// Values from a file must have the default's type; integers are accepted
// for floating-point keys.
void check_type(const std::string& key, const json& v) {
  const json& d = default_for(key);
  const bool ok = (d.is_boolean() && v.is_boolean()) || (d.is_string() && v.is_string()) ||
                  (d.is_number_integer() && v.is_number_integer()) ||
                  (d.is_number_float() && v.is_number());
  if (!ok) throw ConfigError("config key " + key + " has the wrong type");
}

}  // namespace

json read_config_file(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse config " + path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config " + path.string() + " is not a JSON object");
  for (const auto& [k, v] : j.items()) check_type(k, v);
  return j;
}

json parse_flag_value(const std::string& key, const std::string& text) {
  const json& d = default_for(key);
  if (d.is_string()) return text;
  if (d.is_boolean()) {
    if (text.empty() || text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError("--" + key + " expects true or false, got '" + text + "'");
  }
  if (d.is_number_integer()) {
    long long v = 0;
    auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || p != text.data() + text.size()) {
      throw ConfigError("--" + key + " expects an integer, got '" + text + "'");
    }
    return v;
  }
  double v = 0.0;
  auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || p != text.data() + text.size()) {
    throw ConfigError("--" + key + " expects a number, got '" + text + "'");
  }
  return v;
}

Config resolve_config(const json* file, const std::vector<std::pair<std::string, std::string>>& flags) {
  Config c;
  c.values = default_config();
  if (file) {
    for (const auto& [k, v] : file->items()) {
      check_type(k, v);
      c.values[k] = v.is_number() && c.values[k].is_number_float() ? json(v.get<double>()) : v;
      c.explicit_keys.insert(k);
    }
  }
  for (const auto& [k, text] : flags) {
    c.values[k] = parse_flag_value(k, text);
    c.explicit_keys.insert(k);
  }
  return c;
}

ModelConfig model_config_from(const Config& cfg, const Vocabs& vocabs) {
  ModelConfig m;
  m.cell = parse_cell(cfg.str("cell"));
  m.enc_layers = m.dec_layers = cfg.size("layers");
  m.rnn_size = cfg.size("rnn_size");
  m.emb_size = cfg.size("emb_size");
  m.bidirectional = cfg.flag("bidirectional");
  m.attention = parse_attention(cfg.str("attention"));
  m.input_feed = cfg.flag("input_feed");
  m.copy = cfg.flag("copy");
  m.dropout = cfg.number("dropout");
  m.src_vocab = vocabs.src.size();
  m.tgt_vocab = vocabs.tgt.size();
  for (const auto& f : vocabs.feats) m.src_features.push_back({f.size(), feature_emb_size(f.size())});
  m.validate();
  return m;
}

TrainOptions train_options_from(const Config& cfg) {
  TrainOptions o;
  o.epochs = cfg.size("epochs");
  o.batch_size = cfg.size("batch_size");
  o.optim = parse_optim(cfg.str("optim"));
  o.learning_rate = cfg.is_explicit("learning_rate") ? cfg.number("learning_rate") : 0.0;
  o.decay_factor = cfg.number("decay_factor");
  o.start_decay_at = cfg.size("start_decay_at");
  o.clip_norm = cfg.number("clip_norm");
  o.replicas = cfg.size("replicas");
  o.mode = parse_mode(cfg.str("mode"));
  o.staleness_bound = cfg.size("staleness_bound");
  o.seed = static_cast<std::uint64_t>(cfg.integer("seed"));
  o.report_every = cfg.size("report_every");
  o.max_steps = cfg.size("max_steps");
  o.save_model = cfg.str("save_model");
  const std::string dtype = cfg.str("checkpoint_dtype");
  if (dtype == "f32") {
    o.checkpoint_dtype = DType::kF32;
  } else if (dtype != "f64") {
    throw ConfigError("checkpoint_dtype must be f32 or f64, got " + dtype);
  }
  o.validate();
  return o;
}

std::unordered_map<std::string, std::string> load_phrase_table(const std::filesystem::path& path) {
  std::unordered_map<std::string, std::string> table;
  std::size_t n = 0;
  for (const auto& line : read_lines(path)) {
    ++n;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw ConfigError("phrase table line " + std::to_string(n) + " has no tab");
    }
    table.emplace(line.substr(0, tab), line.substr(tab + 1));
  }
  return table;
}

DecodeOptions decode_options_from(const Config& cfg) {
  DecodeOptions d;
  d.beam_size = cfg.size("beam_size");
  d.n_best = cfg.size("n_best");
  d.max_len = cfg.size("decode_max_len");
  d.length_alpha = cfg.number("length_alpha");
  d.coverage_beta = cfg.number("coverage_beta");
  d.replace_unk = cfg.flag("replace_unk");
  if (!cfg.str("phrase_table").empty()) d.phrase_table = load_phrase_table(cfg.str("phrase_table"));
  if (cfg.integer("max_unk_count") >= 0) d.filters.push_back(max_unk_count(cfg.size("max_unk_count")));
  d.validate();
  return d;
}

}  // namespace minimt
