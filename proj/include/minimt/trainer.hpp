#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "minimt/data.hpp"
#include "minimt/model.hpp"
#include "minimt/optim.hpp"

namespace minimt {

enum class ParallelMode { kSync, kAsync };

std::string to_string(ParallelMode m);
ParallelMode parse_mode(std::string_view s);

struct TrainOptions {
  std::size_t epochs = 13;
  std::size_t batch_size = kDefaultBatchSize;
  OptimMethod optim = OptimMethod::kSgd;
  double learning_rate = 0.0;  // 0 selects the optimizer's default
  double decay_factor = 0.5;
  std::size_t start_decay_at = 9;
  double clip_norm = 5.0;
  std::size_t replicas = 1;
  ParallelMode mode = ParallelMode::kSync;
  std::size_t staleness_bound = 1;
  std::uint64_t seed = 1;
  std::size_t report_every = 50;
  std::size_t window_batches = kWindowBatches;
  std::size_t max_steps = 0;  // stop after this many updates; 0 = no limit
  std::string save_model;     // checkpoint prefix; empty disables saving
  DType checkpoint_dtype = DType::kF64;

  void validate() const;
};

// Position in the schedule; everything needed to continue bitwise.
struct TrainerState {
  std::size_t epoch = 0;         // 0-based epoch in progress
  std::size_t batch_offset = 0;  // batches already consumed in that epoch
  std::uint64_t step = 0;        // master updates so far
  std::vector<double> val_ppl;   // one entry per finished epoch
  double best_val_ppl = std::numeric_limits<double>::infinity();
};

struct StepStats {
  std::uint64_t step = 0;
  double nll = 0.0;
  std::size_t tokens = 0;
  std::size_t correct = 0;
  double grad_norm = 0.0;
  double learning_rate = 0.0;
  std::size_t staleness = 0;  // async only
};

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  std::size_t steps = 0;
  std::size_t tokens = 0;
  double nll = 0.0;
  double seconds = 0.0;
  bool completed = false;  // false when max_steps cut the epoch short
  double ppl() const;
};

struct EvalStats {
  double nll = 0.0;
  std::size_t tokens = 0;
  std::size_t correct = 0;
  double ppl() const;
  double accuracy() const;
};

class Trainer {
 public:
  Trainer(Seq2Seq model, TrainOptions options);
  Trainer(Seq2Seq model, TrainOptions options, OptimState optim, TrainerState state);

  const Seq2Seq& model() const { return master_; }
  Seq2Seq& model() { return master_; }
  const OptimState& optim() const { return optim_; }
  OptimState& optim() { return optim_; }
  const TrainerState& state() const { return state_; }
  const TrainOptions& options() const { return options_; }

  // Called after every master update.
  void on_step(std::function<void(const StepStats&)> fn) { step_hook_ = std::move(fn); }
  // Called after every finished epoch (after validation and decay).
  void on_epoch(std::function<void(const EpochStats&, const EvalStats*)> fn) {
    epoch_hook_ = std::move(fn);
  }

  // One synchronous update: batch k goes to replica k, gradients are summed
  // in replica order and divided by the total target token count.
  StepStats train_step(std::span<const Batch> batches);

  // Gradient of the summed loss over `batches`, divided by their total token
  // count, without touching the parameters.
  Gradients normalized_gradient(std::span<const Batch> batches, std::uint64_t step);

  // Continues the current epoch from state().batch_offset.
  EpochStats train_epoch(const ShardSet& train, std::ostream* log = nullptr);

  EvalStats evaluate(const ShardSet& data, std::size_t batch_size = 0) const;

  // Runs the remaining schedule: epochs, validation, decay, checkpoints.
  void fit(const ShardSet& train, const ShardSet* valid, std::ostream* log = nullptr);

  bool reached_max_steps() const;

  // Adds the vocabularies, data path and a JSON metadata object written
  // alongside checkpoints.
  void set_checkpoint_extras(Vocabs vocabs, std::string data_path, std::string metadata = {}) {
    vocabs_ = std::move(vocabs);
    data_path_ = std::move(data_path);
    metadata_ = std::move(metadata);
  }
  void save(const std::filesystem::path& path) const;

 private:
  struct Replica {
    Seq2Seq model;
    Tape tape;
  };

  EpochStats train_epoch_sync(const ShardSet& train, std::ostream* log);
  EpochStats train_epoch_async(const ShardSet& train, std::ostream* log);
  // Runs forward/backward for one batch on a replica; grads land in the
  // replica's parameter grad buffers.
  LossResult replica_pass(Replica& r, const Batch& batch, std::uint64_t step, std::size_t k);
  void broadcast();
  void report(std::ostream* log, const StepStats& s);

  Seq2Seq master_;
  TrainOptions options_;
  OptimState optim_;
  TrainerState state_;
  std::vector<Replica> replicas_;
  std::function<void(const StepStats&)> step_hook_;
  std::function<void(const EpochStats&, const EvalStats*)> epoch_hook_;
  std::optional<Vocabs> vocabs_;
  std::string data_path_;
  std::string metadata_;
  std::vector<LossResult> last_results_;
  // Report interval accumulators.
  double interval_nll_ = 0.0;
  std::size_t interval_tokens_ = 0;
  double interval_start_ = 0.0;
};

// Hash of every parameter's bytes, used to confirm broadcasts.
std::uint64_t parameter_checksum(const std::vector<Parameter>& params);

struct Checkpoint {
  Seq2Seq model;
  OptimState optim;
  TrainerState state;
  TrainOptions options;
  std::optional<Vocabs> vocabs;
  std::string data_path;
  std::string metadata;  // JSON object supplied by the caller, may be empty
};

// Container holding f64 (or f32) parameters, Adam moments, the model
// config and trainer state; a JSON sidecar at path + ".json" repeats the
// metadata in readable form.
void save_checkpoint(const std::filesystem::path& path, const Seq2Seq& model,
                     const OptimState& optim, const TrainerState& state,
                     const TrainOptions& options, const Vocabs* vocabs = nullptr,
                     const std::string& data_path = {}, const std::string& metadata = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(std::string_view text);
std::string train_options_to_json(const TrainOptions& o);
TrainOptions train_options_from_json(std::string_view text);
// Short stable hash of the model configuration.
std::string config_hash(const ModelConfig& c);

}  // namespace minimt
