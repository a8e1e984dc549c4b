#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "minimt/config.hpp"

namespace minimt {

struct PreprocessResult {
  std::filesystem::path manifest;
  ShardingStats train;
  ShardingStats valid;
};

PreprocessResult cmd_preprocess(const Config& cfg, std::ostream& log);

// `data` may name the manifest or the save_data prefix it was written under.
std::filesystem::path resolve_manifest(const std::string& data);

void cmd_train(const Config& cfg, std::ostream& log);

// Translations go to `output`, or to `out` when no output file is set.
void cmd_translate(const Config& cfg, std::ostream& out, std::ostream& log);

struct ImportReport {
  std::size_t loaded = 0;  // vocabulary rows overwritten
  std::size_t kept = 0;    // rows left as they were
};

void cmd_embeddings_export(const Config& cfg);
ImportReport cmd_embeddings_import(const Config& cfg);

// Blocks until SIGINT or SIGTERM.
void cmd_serve(const Config& cfg, std::ostream& log);

// The `minimt` command line; returns the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace minimt
