#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "minimt/tensor.hpp"

namespace minimt {

// Shape rules (B = rows, "row" = leading index of a rank-2 tensor):
//   matmul            [m,k] x [k,n] -> [m,n]
//   add               same shapes, or [m,n] + [n] (bias row)
//   sub, mul          same shapes
//   concat            equal shapes except along attrs.axis
//   slice             [start,end) along attrs.axis
//   tanh sigmoid relu exp log affine dropout   elementwise; dropout uses attrs.mask
//   softmax log_softmax  normalized along attrs.axis
//   embedding_lookup  table [V,d], attrs.ids (n) -> [n,d]
//   sum mean          any -> [1]
//   reshape           attrs.shape, same element count
//   pick              [n,m], attrs.ids (n) -> [n]; ids equal to
//                     attrs.ignore_index yield 0
//   tile_rows         [b,d] -> [count*b, d], row s*b+i copies row i
//   bank_dot          memory [S*B,d], query [B,d] -> [S,B]
//   bank_weighted_sum weights [S,B], memory [S*B,d] -> [B,d]
//   scale_rows        [n,m], [n,1] -> [n,m]
//   pad_cols          [n,m] -> [n,m+count], zero filled
//   scatter_cols      weights [S,B], attrs.ids (S*B target columns, -1 skips),
//                     attrs.count columns -> [B,count]
//   select_rows       a [n,m], b [n,m], attrs.ids (n flags) -> row i of a
//                     where flag != 0 else row i of b
enum class OpKind {
  kMatmul,
  kAdd,
  kSub,
  kMul,
  kConcat,
  kSlice,
  kTanh,
  kSigmoid,
  kRelu,
  kExp,
  kLog,
  kAffine,
  kSoftmax,
  kLogSoftmax,
  kEmbeddingLookup,
  kDropout,
  kSum,
  kMean,
  kReshape,
  kPick,
  kTileRows,
  kBankDot,
  kBankWeightedSum,
  kScaleRows,
  kPadCols,
  kScatterCols,
  kSelectRows,
};

std::string_view op_name(OpKind kind);

struct OpAttrs {
  std::size_t axis = 0;
  std::size_t start = 0;
  std::size_t end = 0;
  std::size_t count = 0;
  std::vector<int> ids;
  Shape shape;
  Tensor mask;
  double scale = 1.0;
  double shift = 0.0;
  int ignore_index = -1;
};

class AxisError : public ShapeError {
 public:
  using ShapeError::ShapeError;
};

class BackwardError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using GradientMap = std::unordered_map<std::uint64_t, std::vector<double>>;

// Records operations for reverse-mode differentiation. Output buffers of
// dropped nodes return to a size-keyed pool on reset(), so a tape reused
// across training steps allocates little after its first step.
class Tape {
 public:
  struct Node {
    OpKind kind;
    std::vector<Tensor> inputs;
    Tensor output;
    OpAttrs attrs;
  };

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

  void reset();

  std::vector<double> acquire(std::size_t n);
  void release(std::vector<double>&& buffer);
  std::size_t pooled_buffers() const;

 private:
  friend Tensor apply(Tape&, OpKind, std::span<const Tensor>, const OpAttrs&);
  friend GradientMap backward(Tape&, const Tensor&);

  bool recording_;
  std::vector<Node> nodes_;
  std::unordered_map<std::uint64_t, std::size_t> producer_;
  std::unordered_map<std::size_t, std::vector<std::vector<double>>> pool_;
  // Shapes vary between batches, so the pool is capped (32M doubles).
  static constexpr std::size_t kMaxPooledDoubles = std::size_t{1} << 25;
  std::size_t pooled_doubles_ = 0;
};

Tensor apply(Tape& tape, OpKind kind, std::span<const Tensor> inputs,
             const OpAttrs& attrs = {});

// Accumulates d(loss)/d(leaf) into the grad buffer of every requires_grad
// leaf reachable from loss, and returns this call's contribution per leaf id.
GradientMap backward(Tape& tape, const Tensor& loss);

namespace ops {
Tensor matmul(Tape& t, const Tensor& a, const Tensor& b);
Tensor add(Tape& t, const Tensor& a, const Tensor& b);
Tensor sub(Tape& t, const Tensor& a, const Tensor& b);
Tensor mul(Tape& t, const Tensor& a, const Tensor& b);
Tensor concat(Tape& t, std::span<const Tensor> xs, std::size_t axis);
Tensor slice(Tape& t, const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t end);
Tensor tanh(Tape& t, const Tensor& x);
Tensor sigmoid(Tape& t, const Tensor& x);
Tensor relu(Tape& t, const Tensor& x);
Tensor exp(Tape& t, const Tensor& x);
Tensor log(Tape& t, const Tensor& x);
Tensor affine(Tape& t, const Tensor& x, double scale, double shift);
Tensor softmax(Tape& t, const Tensor& x, std::size_t axis);
Tensor log_softmax(Tape& t, const Tensor& x, std::size_t axis);
Tensor embedding_lookup(Tape& t, const Tensor& table, std::vector<int> ids);
Tensor dropout(Tape& t, const Tensor& x, const Tensor& mask);
Tensor sum(Tape& t, const Tensor& x);
Tensor mean(Tape& t, const Tensor& x);
Tensor reshape(Tape& t, const Tensor& x, Shape shape);
Tensor pick(Tape& t, const Tensor& x, std::vector<int> ids,
            int ignore_index = -1);
Tensor tile_rows(Tape& t, const Tensor& x, std::size_t repeats);
Tensor bank_dot(Tape& t, const Tensor& memory, const Tensor& query);
Tensor bank_weighted_sum(Tape& t, const Tensor& weights, const Tensor& memory);
Tensor scale_rows(Tape& t, const Tensor& x, const Tensor& factors);
Tensor pad_cols(Tape& t, const Tensor& x, std::size_t extra);
Tensor scatter_cols(Tape& t, const Tensor& weights, std::vector<int> columns,
                    std::size_t width);
Tensor select_rows(Tape& t, const Tensor& a, const Tensor& b,
                   std::vector<int> flags);
}  // namespace ops

}  // namespace minimt
