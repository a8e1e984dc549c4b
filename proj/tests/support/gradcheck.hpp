#pragma once

// Central finite-difference oracle for autograd tests. Independent of the
// backward pass: it only evaluates the forward function.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "minimt/autograd.hpp"

namespace minimt::testing {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

// Relative error with a floor on the denominator; the floor only matters
// for gradients whose true magnitude is below it.
inline double rel_err(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

using LossFn = std::function<Tensor(Tape&)>;

inline GradCheckResult grad_check(std::vector<Tensor> leaves, const LossFn& f,
                                  double eps = 1e-5, double floor = 1e-6,
                                  std::size_t max_per_leaf = 0) {
  for (auto& leaf : leaves) leaf.clear_grad();
  Tape tape;
  Tensor loss = f(tape);
  backward(tape, loss);

  GradCheckResult result;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor leaf = leaves[li];
    std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
    auto data = leaf.data();
    const std::size_t n = data.size();
    const std::size_t stride =
        (max_per_leaf == 0 || n <= max_per_leaf) ? 1 : n / max_per_leaf;
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = data[i];
      data[i] = saved + eps;
      Tape plus(false);
      const double fp = f(plus).item();
      data[i] = saved - eps;
      Tape minus(false);
      const double fm = f(minus).item();
      data[i] = saved;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double err = rel_err(analytic[i], numeric, floor);
      ++result.checked;
      if (err > result.max_rel_err) {
        result.max_rel_err = err;
        result.worst = "leaf " + std::to_string(li) + "[" + std::to_string(i) +
                       "] analytic=" + std::to_string(analytic[i]) +
                       " numeric=" + std::to_string(numeric);
      }
    }
  }
  return result;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0, bool requires_grad = true) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

}  // namespace minimt::testing
