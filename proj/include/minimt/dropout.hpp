#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <utility>
#include <vector>

#include "minimt/tensor.hpp"

namespace minimt {

using Rng = std::mt19937_64;

// Uniform double in [0, 1) from the top 53 bits of one draw; identical on
// every standard library, unlike std::uniform_real_distribution.
double uniform01(Rng& rng);

// Generator keyed on a tuple such as (seed, epoch) or (seed, step, replica).
Rng make_rng(std::initializer_list<std::uint64_t> keys);

// Fisher-Yates shuffle driven only by raw draws, so the permutation does not
// depend on the standard library's distribution implementations.
template <typename T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(v[i - 1], v[j]);
  }
}

// Inverted-dropout mask: each entry is 0 with probability `rate`, otherwise
// 1/(1-rate). Outside training the mask is all ones and no draws are made.
Tensor dropout_mask(const Shape& shape, double rate, Rng& rng,
                    bool training = true);

}  // namespace minimt
