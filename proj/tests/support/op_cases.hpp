#pragma once

// One randomized gradient-check case per op kind. Each loss is
// sum(op(inputs) * R) with a fixed random R so that every output element
// carries a distinct upstream gradient.

#include <random>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "minimt/autograd.hpp"
#include "minimt/dropout.hpp"

namespace minimt::testing {

struct OpCase {
  OpKind kind;
  std::vector<Tensor> leaves;
  LossFn loss;
};

inline Tensor weighted_sum(Tape& t, const Tensor& y, const Tensor& weights) {
  return ops::sum(t, ops::mul(t, y, weights));
}

inline std::vector<OpCase> all_op_cases(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<OpCase> cases;
  auto rt = [&](Shape s, double lo = -1.0, double hi = 1.0) {
    return random_tensor(std::move(s), rng, lo, hi);
  };
  auto fixed = [&](Shape s) { return random_tensor(std::move(s), rng, -1.0, 1.0, false); };

  auto add_case = [&](OpKind kind, std::vector<Tensor> leaves, Shape out,
                      std::function<Tensor(Tape&, const std::vector<Tensor>&)> build) {
    Tensor r = fixed(std::move(out));
    auto captured = leaves;
    cases.push_back({kind, leaves, [captured, r, build](Tape& t) {
                       return weighted_sum(t, build(t, captured), r);
                     }});
  };

  add_case(OpKind::kMatmul, {rt({3, 4}), rt({4, 5})}, {3, 5},
           [](Tape& t, const auto& x) { return ops::matmul(t, x[0], x[1]); });
  add_case(OpKind::kAdd, {rt({3, 4}), rt({4})}, {3, 4},
           [](Tape& t, const auto& x) { return ops::add(t, x[0], x[1]); });
  add_case(OpKind::kSub, {rt({3, 4}), rt({3, 4})}, {3, 4},
           [](Tape& t, const auto& x) { return ops::sub(t, x[0], x[1]); });
  add_case(OpKind::kMul, {rt({3, 4}), rt({3, 4})}, {3, 4},
           [](Tape& t, const auto& x) { return ops::mul(t, x[0], x[1]); });
  add_case(OpKind::kConcat, {rt({2, 3}), rt({2, 2}), rt({2, 1})}, {2, 6},
           [](Tape& t, const auto& x) { return ops::concat(t, x, 1); });
  add_case(OpKind::kSlice, {rt({4, 5})}, {4, 2},
           [](Tape& t, const auto& x) { return ops::slice(t, x[0], 1, 2, 4); });
  add_case(OpKind::kTanh, {rt({3, 4}, -2, 2)}, {3, 4},
           [](Tape& t, const auto& x) { return ops::tanh(t, x[0]); });
  add_case(OpKind::kSigmoid, {rt({3, 4}, -3, 3)}, {3, 4},
           [](Tape& t, const auto& x) { return ops::sigmoid(t, x[0]); });
  {
    // Keep relu inputs away from the kink.
    Tensor x = rt({3, 4});
    for (double& v : x.data()) v = v >= 0 ? v + 0.1 : v - 0.1;
    add_case(OpKind::kRelu, {x}, {3, 4},
             [](Tape& t, const auto& in) { return ops::relu(t, in[0]); });
  }
  add_case(OpKind::kExp, {rt({3, 4})}, {3, 4},
           [](Tape& t, const auto& x) { return ops::exp(t, x[0]); });
  add_case(OpKind::kLog, {rt({3, 4}, 0.5, 2.0)}, {3, 4},
           [](Tape& t, const auto& x) { return ops::log(t, x[0]); });
  add_case(OpKind::kAffine, {rt({3, 4})}, {3, 4},
           [](Tape& t, const auto& x) { return ops::affine(t, x[0], -1.5, 0.25); });
  add_case(OpKind::kSoftmax, {rt({3, 5}, -2, 2)}, {3, 5},
           [](Tape& t, const auto& x) { return ops::softmax(t, x[0], 0); });
  add_case(OpKind::kLogSoftmax, {rt({3, 5}, -2, 2)}, {3, 5},
           [](Tape& t, const auto& x) { return ops::log_softmax(t, x[0], 1); });
  add_case(OpKind::kEmbeddingLookup, {rt({6, 3})}, {5, 3},
           [](Tape& t, const auto& x) {
             return ops::embedding_lookup(t, x[0], {4, 0, 4, 2, 5});
           });
  {
    Rng mask_rng(seed + 1);
    Tensor mask = dropout_mask({3, 4}, 0.3, mask_rng);
    add_case(OpKind::kDropout, {rt({3, 4})}, {3, 4},
             [mask](Tape& t, const auto& x) { return ops::dropout(t, x[0], mask); });
  }
  {
    Tensor x = rt({3, 4});
    Tensor r = fixed({3, 4});
    cases.push_back({OpKind::kSum, {x}, [x, r](Tape& t) {
                       return ops::sum(t, ops::mul(t, ops::tanh(t, x), r));
                     }});
  }
  {
    Tensor x = rt({3, 4});
    Tensor r = fixed({3, 4});
    cases.push_back({OpKind::kMean, {x}, [x, r](Tape& t) {
                       return ops::mean(t, ops::mul(t, ops::tanh(t, x), r));
                     }});
  }
  add_case(OpKind::kReshape, {rt({3, 4})}, {2, 6},
           [](Tape& t, const auto& x) { return ops::reshape(t, x[0], {2, 6}); });
  add_case(OpKind::kPick, {rt({4, 5})}, {4},
           [](Tape& t, const auto& x) { return ops::pick(t, x[0], {1, 0, 4, 3}, 0); });
  add_case(OpKind::kTileRows, {rt({2, 3})}, {6, 3},
           [](Tape& t, const auto& x) { return ops::tile_rows(t, x[0], 3); });
  add_case(OpKind::kBankDot, {rt({6, 4}), rt({2, 4})}, {3, 2},
           [](Tape& t, const auto& x) { return ops::bank_dot(t, x[0], x[1]); });
  add_case(OpKind::kBankWeightedSum, {rt({3, 2}), rt({6, 4})}, {2, 4},
           [](Tape& t, const auto& x) { return ops::bank_weighted_sum(t, x[0], x[1]); });
  add_case(OpKind::kScaleRows, {rt({3, 4}), rt({3, 1})}, {3, 4},
           [](Tape& t, const auto& x) { return ops::scale_rows(t, x[0], x[1]); });
  add_case(OpKind::kPadCols, {rt({3, 4})}, {3, 6},
           [](Tape& t, const auto& x) { return ops::pad_cols(t, x[0], 2); });
  add_case(OpKind::kScatterCols, {rt({3, 2})}, {2, 4},
           [](Tape& t, const auto& x) {
             return ops::scatter_cols(t, x[0], {0, 3, 2, 3, 0, -1}, 4);
           });
  add_case(OpKind::kSelectRows, {rt({3, 4}), rt({3, 4})}, {3, 4},
           [](Tape& t, const auto& x) { return ops::select_rows(t, x[0], x[1], {1, 0, 1}); });
  return cases;
}

}  // namespace minimt::testing
