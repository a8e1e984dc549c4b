#include "minimt/optim.hpp"

#include <cmath>

namespace minimt {

std::string to_string(OptimMethod m) { return m == OptimMethod::kSgd ? "sgd" : "adam"; }

OptimMethod parse_optim(std::string_view s) {
  if (s == "sgd" || s == "SGD") return OptimMethod::kSgd;
  if (s == "adam" || s == "Adam") return OptimMethod::kAdam;
  throw TrainError("unknown optimizer: " + std::string(s));
}

double default_learning_rate(OptimMethod m) { return m == OptimMethod::kSgd ? 1.0 : 0.001; }

void OptimState::validate() const {
  if (!(learning_rate > 0.0)) throw TrainError("learning_rate must be positive");
  if (!(decay_factor > 0.0 && decay_factor <= 1.0)) {
    throw TrainError("decay_factor must lie in (0, 1]");
  }
  if (clip_norm < 0.0) throw TrainError("clip_norm must be non-negative");
}

double global_norm(const Gradients& grads) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (double x : g) sq += x * x;
  }
  return std::sqrt(sq);
}

void check_finite(const std::vector<Parameter>& params, const Gradients& grads) {
  for (std::size_t p = 0; p < grads.size(); ++p) {
    for (std::size_t i = 0; i < grads[p].size(); ++i) {
      if (!std::isfinite(grads[p][i])) {
        throw TrainError("non-finite gradient in " + params[p].name + " at index " +
                         std::to_string(i) + " (value " + std::to_string(grads[p][i]) + ")");
      }
    }
  }
}

double clip_and_step(std::vector<Parameter>& params, Gradients& grads, OptimState& s) {
  if (grads.size() != params.size()) throw TrainError("gradient count differs from parameters");
  check_finite(params, grads);
  const double norm = global_norm(grads);
  if (s.clip_norm > 0.0 && norm > s.clip_norm) {
    const double scale = s.clip_norm / norm;
    for (auto& g : grads) {
      for (double& x : g) x *= scale;
    }
  }
  ++s.step;
  if (s.method == OptimMethod::kAdam) {
    if (s.m.size() != params.size()) {
      s.m.assign(params.size(), {});
      s.v.assign(params.size(), {});
      for (std::size_t p = 0; p < params.size(); ++p) {
        s.m[p].assign(params[p].value.numel(), 0.0);
        s.v[p].assign(params[p].value.numel(), 0.0);
      }
    }
    const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
    const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto w = params[p].value.data();
      auto& m = s.m[p];
      auto& v = s.v[p];
      if (m.size() != w.size()) throw TrainError("Adam moment shape mismatch for " + params[p].name);
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double g = grads[p][i];
        m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g;
        v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g * g;
        w[i] -= s.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + s.epsilon);
      }
    }
  } else {
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto w = params[p].value.data();
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= s.learning_rate * grads[p][i];
    }
  }
  for (const auto& p : params) {
    for (double x : p.value.data()) {
      if (!std::isfinite(x)) throw TrainError("update produced a non-finite value in " + p.name);
    }
  }
  return norm;
}

void maybe_decay(OptimState& s, const std::vector<double>& history, std::size_t epoch) {
  if (s.method != OptimMethod::kSgd) return;
  const bool stalled = history.size() >= 2 && history.back() >= history[history.size() - 2];
  if (epoch >= s.start_decay_at || stalled) s.decaying = true;
  if (s.decaying) s.learning_rate *= s.decay_factor;
}

}  // namespace minimt
