#pragma once

#include <filesystem>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "minimt/beam.hpp"
#include "minimt/trainer.hpp"

namespace minimt {

// Every recognized key with its default. The shipped configs/default.json
// holds the same object.
nlohmann::json default_config();
// Defaults for subword-segmented data: BPE on, longer max_len.
nlohmann::json bpe_preset();

struct Config {
  nlohmann::json values;
  // Keys set by a config file or a flag rather than left at the default.
  std::set<std::string> explicit_keys;

  bool is_explicit(const std::string& key) const { return explicit_keys.count(key) > 0; }
  std::string str(const std::string& key) const;
  std::size_t size(const std::string& key) const;
  long long integer(const std::string& key) const;
  double number(const std::string& key) const;
  bool flag(const std::string& key) const;
};

// Reads a JSON object whose keys must all be known.
nlohmann::json read_config_file(const std::filesystem::path& path);

// Parses a flag's text into the JSON type of the key's default.
nlohmann::json parse_flag_value(const std::string& key, const std::string& text);

// Precedence: flags over the file over the defaults.
Config resolve_config(const nlohmann::json* file,
                      const std::vector<std::pair<std::string, std::string>>& flags);

// Model shape from the config plus the vocabularies it will be trained on.
ModelConfig model_config_from(const Config& cfg, const Vocabs& vocabs);
// Adam gets its own default learning rate unless learning_rate was set.
TrainOptions train_options_from(const Config& cfg);
// Reads the phrase table file when one is named.
DecodeOptions decode_options_from(const Config& cfg);

// "src<TAB>tgt" per line.
std::unordered_map<std::string, std::string> load_phrase_table(const std::filesystem::path& path);

}  // namespace minimt
