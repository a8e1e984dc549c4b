#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "minimt/model.hpp"

namespace minimt {

enum class OptimMethod { kSgd, kAdam };

std::string to_string(OptimMethod m);
OptimMethod parse_optim(std::string_view s);
double default_learning_rate(OptimMethod m);

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct OptimState {
  OptimMethod method = OptimMethod::kSgd;
  double learning_rate = 1.0;
  double decay_factor = 0.5;
  std::size_t start_decay_at = 9;  // 1-based epoch
  double clip_norm = 5.0;          // 0 disables clipping
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  bool decaying = false;  // once started, decay continues every epoch
  // Adam moments, aligned with the model's parameter list.
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  void validate() const;
};

using Gradients = std::vector<std::vector<double>>;

double global_norm(const Gradients& grads);

// Throws TrainError naming the first parameter with a non-finite gradient.
void check_finite(const std::vector<Parameter>& params, const Gradients& grads);

// Global-norm clipping followed by an SGD or Adam update. Returns the
// gradient norm before clipping.
double clip_and_step(std::vector<Parameter>& params, Gradients& grads, OptimState& state);

// Halves (by decay_factor) the learning rate once epoch >= start_decay_at or
// when the latest validation perplexity is no better than the one before.
void maybe_decay(OptimState& state, const std::vector<double>& val_ppl_history,
                 std::size_t epoch);

}  // namespace minimt
