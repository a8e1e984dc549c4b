#include "minimt/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "minimt/kernels.hpp"

namespace minimt {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kMatmul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kTanh: return "tanh";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kRelu: return "relu";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kAffine: return "affine";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLogSoftmax: return "log_softmax";
    case OpKind::kEmbeddingLookup: return "embedding_lookup";
    case OpKind::kDropout: return "dropout";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kReshape: return "reshape";
    case OpKind::kPick: return "pick";
    case OpKind::kTileRows: return "tile_rows";
    case OpKind::kBankDot: return "bank_dot";
    case OpKind::kBankWeightedSum: return "bank_weighted_sum";
    case OpKind::kScaleRows: return "scale_rows";
    case OpKind::kPadCols: return "pad_cols";
    case OpKind::kScatterCols: return "scatter_cols";
    case OpKind::kSelectRows: return "select_rows";
  }
  return "unknown";
}

namespace {

[[noreturn]] void shape_fail(OpKind kind, const std::string& what) {
  throw ShapeError(std::string(op_name(kind)) + ": " + what);
}

void expect_arity(OpKind kind, std::span<const Tensor> in, std::size_t n) {
  if (in.size() != n) {
    shape_fail(kind, "expected " + std::to_string(n) + " inputs, got " +
                         std::to_string(in.size()));
  }
  for (const auto& t : in) {
    if (!t.defined()) shape_fail(kind, "undefined input tensor");
  }
}

void expect_rank(OpKind kind, const Tensor& t, std::size_t rank,
                 const char* which) {
  if (t.rank() != rank) {
    shape_fail(kind, std::string(which) + " must have rank " +
                         std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

void expect_same(OpKind kind, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    shape_fail(kind, "shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(OpKind kind, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw AxisError(std::string(op_name(kind)) + ": axis " +
                    std::to_string(axis) + " out of range for shape " +
                    shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// Output shape and validation for every kind.
Shape infer_shape(OpKind kind, std::span<const Tensor> in, const OpAttrs& at) {
  switch (kind) {
    case OpKind::kMatmul: {
      expect_arity(kind, in, 2);
      expect_rank(kind, in[0], 2, "lhs");
      expect_rank(kind, in[1], 2, "rhs");
      if (in[0].dim(1) != in[1].dim(0)) {
        shape_fail(kind, "inner dimensions differ: " + shape_str(in[0].shape()) +
                             " x " + shape_str(in[1].shape()));
      }
      return {in[0].dim(0), in[1].dim(1)};
    }
    case OpKind::kAdd: {
      expect_arity(kind, in, 2);
      if (in[0].shape() == in[1].shape()) return in[0].shape();
      if (in[0].rank() == 2 && in[1].rank() == 1 &&
          in[1].dim(0) == in[0].dim(1)) {
        return in[0].shape();
      }
      shape_fail(kind, "cannot add " + shape_str(in[0].shape()) + " and " +
                           shape_str(in[1].shape()) +
                           " (only equal shapes or a bias row are allowed)");
    }
    case OpKind::kSub:
    case OpKind::kMul:
      expect_arity(kind, in, 2);
      expect_same(kind, in[0], in[1]);
      return in[0].shape();
    case OpKind::kConcat: {
      if (in.empty()) shape_fail(kind, "needs at least one input");
      const Shape& first = in[0].shape();
      split_axis(kind, first, at.axis);
      Shape out = first;
      out[at.axis] = 0;
      for (const auto& t : in) {
        if (!t.defined()) shape_fail(kind, "undefined input tensor");
        if (t.rank() != first.size()) {
          shape_fail(kind, "rank mismatch " + shape_str(first) + " vs " +
                               shape_str(t.shape()));
        }
        for (std::size_t d = 0; d < first.size(); ++d) {
          if (d != at.axis && t.shape()[d] != first[d]) {
            shape_fail(kind, "dimension " + std::to_string(d) + " differs: " +
                                 shape_str(first) + " vs " +
                                 shape_str(t.shape()));
          }
        }
        out[at.axis] += t.shape()[at.axis];
      }
      return out;
    }
    case OpKind::kSlice: {
      expect_arity(kind, in, 1);
      auto sp = split_axis(kind, in[0].shape(), at.axis);
      if (at.start >= at.end || at.end > sp.len) {
        shape_fail(kind, "range [" + std::to_string(at.start) + "," +
                             std::to_string(at.end) + ") invalid for axis of " +
                             std::to_string(sp.len));
      }
      Shape out = in[0].shape();
      out[at.axis] = at.end - at.start;
      return out;
    }
    case OpKind::kTanh:
    case OpKind::kSigmoid:
    case OpKind::kRelu:
    case OpKind::kExp:
    case OpKind::kLog:
    case OpKind::kAffine:
      expect_arity(kind, in, 1);
      return in[0].shape();
    case OpKind::kSoftmax:
    case OpKind::kLogSoftmax:
      expect_arity(kind, in, 1);
      split_axis(kind, in[0].shape(), at.axis);
      return in[0].shape();
    case OpKind::kEmbeddingLookup: {
      expect_arity(kind, in, 1);
      expect_rank(kind, in[0], 2, "table");
      if (at.ids.empty()) shape_fail(kind, "empty id list");
      const auto vocab = static_cast<long long>(in[0].dim(0));
      for (int id : at.ids) {
        if (id < 0 || id >= vocab) {
          shape_fail(kind, "id " + std::to_string(id) +
                               " out of range for table " +
                               shape_str(in[0].shape()));
        }
      }
      return {at.ids.size(), in[0].dim(1)};
    }
    case OpKind::kDropout:
      expect_arity(kind, in, 1);
      if (!at.mask.defined()) shape_fail(kind, "missing mask");
      expect_same(kind, in[0], at.mask);
      return in[0].shape();
    case OpKind::kSum:
    case OpKind::kMean:
      expect_arity(kind, in, 1);
      return {1};
    case OpKind::kReshape:
      expect_arity(kind, in, 1);
      if (at.shape.empty() || shape_numel(at.shape) != in[0].numel()) {
        shape_fail(kind, "cannot reshape " + shape_str(in[0].shape()) + " to " +
                             shape_str(at.shape));
      }
      return at.shape;
    case OpKind::kPick: {
      expect_arity(kind, in, 1);
      expect_rank(kind, in[0], 2, "input");
      if (at.ids.size() != in[0].dim(0)) {
        shape_fail(kind, std::to_string(at.ids.size()) + " ids for " +
                             shape_str(in[0].shape()));
      }
      const auto cols = static_cast<long long>(in[0].dim(1));
      for (int id : at.ids) {
        if (id != at.ignore_index && (id < 0 || id >= cols)) {
          shape_fail(kind, "column " + std::to_string(id) + " out of range for " +
                               shape_str(in[0].shape()));
        }
      }
      return {in[0].dim(0)};
    }
    case OpKind::kTileRows:
      expect_arity(kind, in, 1);
      expect_rank(kind, in[0], 2, "input");
      if (at.count == 0) shape_fail(kind, "repeat count must be positive");
      return {in[0].dim(0) * at.count, in[0].dim(1)};
    case OpKind::kBankDot: {
      expect_arity(kind, in, 2);
      expect_rank(kind, in[0], 2, "memory");
      expect_rank(kind, in[1], 2, "query");
      const std::size_t b = in[1].dim(0);
      if (in[0].dim(1) != in[1].dim(1) || in[0].dim(0) % b != 0) {
        shape_fail(kind, "memory " + shape_str(in[0].shape()) +
                             " incompatible with query " +
                             shape_str(in[1].shape()));
      }
      return {in[0].dim(0) / b, b};
    }
    case OpKind::kBankWeightedSum: {
      expect_arity(kind, in, 2);
      expect_rank(kind, in[0], 2, "weights");
      expect_rank(kind, in[1], 2, "memory");
      if (in[0].numel() != in[1].dim(0)) {
        shape_fail(kind, "weights " + shape_str(in[0].shape()) +
                             " incompatible with memory " +
                             shape_str(in[1].shape()));
      }
      return {in[0].dim(1), in[1].dim(1)};
    }
    case OpKind::kScaleRows:
      expect_arity(kind, in, 2);
      expect_rank(kind, in[0], 2, "input");
      if (in[1].shape() != Shape{in[0].dim(0), 1}) {
        shape_fail(kind, "factors " + shape_str(in[1].shape()) +
                             " do not match rows of " +
                             shape_str(in[0].shape()));
      }
      return in[0].shape();
    case OpKind::kPadCols:
      expect_arity(kind, in, 1);
      expect_rank(kind, in[0], 2, "input");
      return {in[0].dim(0), in[0].dim(1) + at.count};
    case OpKind::kScatterCols: {
      expect_arity(kind, in, 1);
      expect_rank(kind, in[0], 2, "weights");
      if (at.ids.size() != in[0].numel()) {
        shape_fail(kind, std::to_string(at.ids.size()) +
                             " column ids for weights " +
                             shape_str(in[0].shape()));
      }
      if (at.count == 0) shape_fail(kind, "width must be positive");
      for (int id : at.ids) {
        if (id >= static_cast<long long>(at.count) || id < -1) {
          shape_fail(kind, "column " + std::to_string(id) + " outside width " +
                               std::to_string(at.count));
        }
      }
      return {in[0].dim(1), at.count};
    }
    case OpKind::kSelectRows:
      expect_arity(kind, in, 2);
      expect_rank(kind, in[0], 2, "lhs");
      expect_same(kind, in[0], in[1]);
      if (at.ids.size() != in[0].dim(0)) {
        shape_fail(kind, std::to_string(at.ids.size()) + " flags for " +
                             shape_str(in[0].shape()));
      }
      return in[0].shape();
  }
  shape_fail(kind, "unsupported op");
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void log_softmax_forward(const double* x, double* y, const AxisSplit& s) {
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) mx = std::max(mx, x[base + l * s.inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) total += std::exp(x[base + l * s.inner] - mx);
      const double lse = mx + std::log(total);
      for (std::size_t l = 0; l < s.len; ++l) y[base + l * s.inner] = x[base + l * s.inner] - lse;
    }
  }
}

void softmax_forward(const double* x, double* y, const AxisSplit& s) {
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) mx = std::max(mx, x[base + l * s.inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        const double e = std::exp(x[base + l * s.inner] - mx);
        y[base + l * s.inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < s.len; ++l) y[base + l * s.inner] /= total;
    }
  }
}

void forward(OpKind kind, std::span<const Tensor> in, const OpAttrs& at,
             double* y, const Shape& out_shape) {
  const std::size_t n_out = shape_numel(out_shape);
  switch (kind) {
    case OpKind::kMatmul: {
      const auto& a = in[0];
      const auto& b = in[1];
      kernels::gemm_nn(a.data().data(), b.data().data(), y, a.dim(0), a.dim(1),
                       b.dim(1), false);
      return;
    }
    case OpKind::kAdd: {
      auto a = in[0].data();
      auto b = in[1].data();
      if (b.size() == a.size()) {
        for (std::size_t i = 0; i < n_out; ++i) y[i] = a[i] + b[i];
      } else {
        const std::size_t cols = b.size();
        for (std::size_t i = 0; i < n_out; ++i) y[i] = a[i] + b[i % cols];
      }
      return;
    }
    case OpKind::kSub: {
      auto a = in[0].data();
      auto b = in[1].data();
      for (std::size_t i = 0; i < n_out; ++i) y[i] = a[i] - b[i];
      return;
    }
    case OpKind::kMul: {
      auto a = in[0].data();
      auto b = in[1].data();
      for (std::size_t i = 0; i < n_out; ++i) y[i] = a[i] * b[i];
      return;
    }
    case OpKind::kConcat: {
      auto sp = split_axis(kind, out_shape, at.axis);
      std::size_t offset = 0;
      for (const auto& t : in) {
        const std::size_t chunk = t.shape()[at.axis] * sp.inner;
        auto src = t.data();
        for (std::size_t o = 0; o < sp.outer; ++o) {
          std::copy_n(src.data() + o * chunk, chunk,
                      y + o * sp.len * sp.inner + offset);
        }
        offset += chunk;
      }
      return;
    }
    case OpKind::kSlice: {
      auto sp = split_axis(kind, in[0].shape(), at.axis);
      const std::size_t chunk = (at.end - at.start) * sp.inner;
      auto src = in[0].data();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        std::copy_n(src.data() + o * sp.len * sp.inner + at.start * sp.inner,
                    chunk, y + o * chunk);
      }
      return;
    }
    case OpKind::kTanh: {
      auto x = in[0].data();
      for (std::size_t i = 0; i < n_out; ++i) y[i] = std::tanh(x[i]);
      return;
    }
    case OpKind::kSigmoid: {
      auto x = in[0].data();
      for (std::size_t i = 0; i < n_out; ++i) y[i] = sigmoid_scalar(x[i]);
      return;
    }
    case OpKind::kRelu: {
      auto x = in[0].data();
      for (std::size_t i = 0; i < n_out; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
      return;
    }
    case OpKind::kExp: {
      auto x = in[0].data();
      for (std::size_t i = 0; i < n_out; ++i) y[i] = std::exp(x[i]);
      return;
    }
    case OpKind::kLog: {
      auto x = in[0].data();
      for (std::size_t i = 0; i < n_out; ++i) y[i] = std::log(x[i]);
      return;
    }
    case OpKind::kAffine: {
      auto x = in[0].data();
      for (std::size_t i = 0; i < n_out; ++i) y[i] = at.scale * x[i] + at.shift;
      return;
    }
    case OpKind::kLogSoftmax:
      log_softmax_forward(in[0].data().data(), y,
                          split_axis(kind, in[0].shape(), at.axis));
      return;
    case OpKind::kSoftmax:
      softmax_forward(in[0].data().data(), y,
                      split_axis(kind, in[0].shape(), at.axis));
      return;
    case OpKind::kEmbeddingLookup: {
      const std::size_t d = in[0].dim(1);
      auto table = in[0].data();
      for (std::size_t r = 0; r < at.ids.size(); ++r) {
        std::copy_n(table.data() + static_cast<std::size_t>(at.ids[r]) * d, d,
                    y + r * d);
      }
      return;
    }
    case OpKind::kDropout: {
      auto x = in[0].data();
      auto m = at.mask.data();
      for (std::size_t i = 0; i < n_out; ++i) y[i] = x[i] * m[i];
      return;
    }
    case OpKind::kSum:
    case OpKind::kMean: {
      double total = 0.0;
      for (double v : in[0].data()) total += v;
      y[0] = kind == OpKind::kMean ? total / static_cast<double>(in[0].numel())
                                   : total;
      return;
    }
    case OpKind::kReshape:
      std::copy_n(in[0].data().data(), n_out, y);
      return;
    case OpKind::kPick: {
      const std::size_t cols = in[0].dim(1);
      auto x = in[0].data();
      for (std::size_t r = 0; r < at.ids.size(); ++r) {
        const int id = at.ids[r];
        y[r] = id == at.ignore_index ? 0.0 : x[r * cols + static_cast<std::size_t>(id)];
      }
      return;
    }
    case OpKind::kTileRows: {
      const std::size_t block = in[0].numel();
      for (std::size_t s = 0; s < at.count; ++s) {
        std::copy_n(in[0].data().data(), block, y + s * block);
      }
      return;
    }
    case OpKind::kBankDot: {
      const std::size_t b = in[1].dim(0);
      const std::size_t d = in[1].dim(1);
      const std::size_t steps = in[0].dim(0) / b;
      auto mem = in[0].data();
      auto q = in[1].data();
      for (std::size_t s = 0; s < steps; ++s) {
        for (std::size_t j = 0; j < b; ++j) {
          const double* mrow = mem.data() + (s * b + j) * d;
          const double* qrow = q.data() + j * d;
          double acc = 0.0;
          for (std::size_t h = 0; h < d; ++h) acc += mrow[h] * qrow[h];
          y[s * b + j] = acc;
        }
      }
      return;
    }
    case OpKind::kBankWeightedSum: {
      const std::size_t steps = in[0].dim(0);
      const std::size_t b = in[0].dim(1);
      const std::size_t d = in[1].dim(1);
      auto w = in[0].data();
      auto mem = in[1].data();
      std::fill(y, y + n_out, 0.0);
      for (std::size_t s = 0; s < steps; ++s) {
        for (std::size_t j = 0; j < b; ++j) {
          const double ws = w[s * b + j];
          const double* mrow = mem.data() + (s * b + j) * d;
          double* yrow = y + j * d;
          for (std::size_t h = 0; h < d; ++h) yrow[h] += ws * mrow[h];
        }
      }
      return;
    }
    case OpKind::kScaleRows: {
      const std::size_t cols = in[0].dim(1);
      auto x = in[0].data();
      auto f = in[1].data();
      for (std::size_t i = 0; i < n_out; ++i) y[i] = x[i] * f[i / cols];
      return;
    }
    case OpKind::kPadCols: {
      const std::size_t rows = in[0].dim(0);
      const std::size_t cols = in[0].dim(1);
      const std::size_t width = cols + at.count;
      auto x = in[0].data();
      std::fill(y, y + n_out, 0.0);
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(x.data() + r * cols, cols, y + r * width);
      }
      return;
    }
    case OpKind::kScatterCols: {
      const std::size_t b = in[0].dim(1);
      auto w = in[0].data();
      std::fill(y, y + n_out, 0.0);
      for (std::size_t i = 0; i < at.ids.size(); ++i) {
        if (at.ids[i] < 0) continue;
        const std::size_t row = i % b;
        y[row * at.count + static_cast<std::size_t>(at.ids[i])] += w[i];
      }
      return;
    }
    case OpKind::kSelectRows: {
      const std::size_t cols = in[0].dim(1);
      for (std::size_t r = 0; r < at.ids.size(); ++r) {
        const auto& src = at.ids[r] != 0 ? in[0] : in[1];
        std::copy_n(src.data().data() + r * cols, cols, y + r * cols);
      }
      return;
    }
  }
}

// Accumulates input gradients. grads[i] is null when input i needs none.
void backward_node(const Tape::Node& node, std::span<const double> gy,
                   std::span<double* const> grads) {
  const auto& in = node.inputs;
  const auto& at = node.attrs;
  auto y = node.output.data();
  const std::size_t n_out = y.size();
  switch (node.kind) {
    case OpKind::kMatmul: {
      const auto& a = in[0];
      const auto& b = in[1];
      const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
      if (grads[0]) kernels::gemm_nt_acc(gy.data(), b.data().data(), grads[0], m, n, k);
      if (grads[1]) kernels::gemm_tn_acc(a.data().data(), gy.data(), grads[1], m, k, n);
      return;
    }
    case OpKind::kAdd: {
      if (grads[0]) for (std::size_t i = 0; i < n_out; ++i) grads[0][i] += gy[i];
      if (grads[1]) {
        const std::size_t cols = in[1].numel();
        for (std::size_t i = 0; i < n_out; ++i) grads[1][i % cols] += gy[i];
      }
      return;
    }
    case OpKind::kSub:
      if (grads[0]) for (std::size_t i = 0; i < n_out; ++i) grads[0][i] += gy[i];
      if (grads[1]) for (std::size_t i = 0; i < n_out; ++i) grads[1][i] -= gy[i];
      return;
    case OpKind::kMul: {
      auto a = in[0].data();
      auto b = in[1].data();
      if (grads[0]) for (std::size_t i = 0; i < n_out; ++i) grads[0][i] += gy[i] * b[i];
      if (grads[1]) for (std::size_t i = 0; i < n_out; ++i) grads[1][i] += gy[i] * a[i];
      return;
    }
    case OpKind::kConcat: {
      auto sp = split_axis(node.kind, node.output.shape(), at.axis);
      std::size_t offset = 0;
      for (std::size_t k = 0; k < in.size(); ++k) {
        const std::size_t chunk = in[k].shape()[at.axis] * sp.inner;
        if (grads[k]) {
          for (std::size_t o = 0; o < sp.outer; ++o) {
            const double* src = gy.data() + o * sp.len * sp.inner + offset;
            double* dst = grads[k] + o * chunk;
            for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
          }
        }
        offset += chunk;
      }
      return;
    }
    case OpKind::kSlice: {
      if (!grads[0]) return;
      auto sp = split_axis(node.kind, in[0].shape(), at.axis);
      const std::size_t chunk = (at.end - at.start) * sp.inner;
      for (std::size_t o = 0; o < sp.outer; ++o) {
        double* dst = grads[0] + o * sp.len * sp.inner + at.start * sp.inner;
        const double* src = gy.data() + o * chunk;
        for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
      }
      return;
    }
    case OpKind::kTanh:
      for (std::size_t i = 0; i < n_out; ++i) grads[0][i] += gy[i] * (1.0 - y[i] * y[i]);
      return;
    case OpKind::kSigmoid:
      for (std::size_t i = 0; i < n_out; ++i) grads[0][i] += gy[i] * y[i] * (1.0 - y[i]);
      return;
    case OpKind::kRelu: {
      auto x = in[0].data();
      for (std::size_t i = 0; i < n_out; ++i) {
        if (x[i] > 0.0) grads[0][i] += gy[i];
      }
      return;
    }
    case OpKind::kExp:
      for (std::size_t i = 0; i < n_out; ++i) grads[0][i] += gy[i] * y[i];
      return;
    case OpKind::kLog: {
      auto x = in[0].data();
      // Entries with zero upstream gradient contribute nothing, even where
      // x == 0 and the local derivative is infinite.
      for (std::size_t i = 0; i < n_out; ++i) {
        if (gy[i] != 0.0) grads[0][i] += gy[i] / x[i];
      }
      return;
    }
    case OpKind::kAffine:
      for (std::size_t i = 0; i < n_out; ++i) grads[0][i] += gy[i] * at.scale;
      return;
    case OpKind::kSoftmax: {
      auto sp = split_axis(node.kind, in[0].shape(), at.axis);
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
          const std::size_t base = o * sp.len * sp.inner + i;
          double dot = 0.0;
          for (std::size_t l = 0; l < sp.len; ++l) {
            const std::size_t idx = base + l * sp.inner;
            dot += gy[idx] * y[idx];
          }
          for (std::size_t l = 0; l < sp.len; ++l) {
            const std::size_t idx = base + l * sp.inner;
            if (y[idx] != 0.0) grads[0][idx] += y[idx] * (gy[idx] - dot);
          }
        }
      }
      return;
    }
    case OpKind::kLogSoftmax: {
      auto sp = split_axis(node.kind, in[0].shape(), at.axis);
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
          const std::size_t base = o * sp.len * sp.inner + i;
          double total = 0.0;
          for (std::size_t l = 0; l < sp.len; ++l) total += gy[base + l * sp.inner];
          for (std::size_t l = 0; l < sp.len; ++l) {
            const std::size_t idx = base + l * sp.inner;
            grads[0][idx] += gy[idx] - std::exp(y[idx]) * total;
          }
        }
      }
      return;
    }
    case OpKind::kEmbeddingLookup: {
      const std::size_t d = in[0].dim(1);
      for (std::size_t r = 0; r < at.ids.size(); ++r) {
        double* dst = grads[0] + static_cast<std::size_t>(at.ids[r]) * d;
        const double* src = gy.data() + r * d;
        for (std::size_t h = 0; h < d; ++h) dst[h] += src[h];
      }
      return;
    }
    case OpKind::kDropout: {
      auto m = at.mask.data();
      for (std::size_t i = 0; i < n_out; ++i) grads[0][i] += gy[i] * m[i];
      return;
    }
    case OpKind::kSum:
    case OpKind::kMean: {
      const std::size_t n = in[0].numel();
      const double g = node.kind == OpKind::kMean ? gy[0] / static_cast<double>(n)
                                                  : gy[0];
      for (std::size_t i = 0; i < n; ++i) grads[0][i] += g;
      return;
    }
    case OpKind::kReshape:
      for (std::size_t i = 0; i < n_out; ++i) grads[0][i] += gy[i];
      return;
    case OpKind::kPick: {
      const std::size_t cols = in[0].dim(1);
      for (std::size_t r = 0; r < at.ids.size(); ++r) {
        const int id = at.ids[r];
        if (id == at.ignore_index) continue;
        grads[0][r * cols + static_cast<std::size_t>(id)] += gy[r];
      }
      return;
    }
    case OpKind::kTileRows: {
      const std::size_t block = in[0].numel();
      for (std::size_t s = 0; s < at.count; ++s) {
        const double* src = gy.data() + s * block;
        for (std::size_t i = 0; i < block; ++i) grads[0][i] += src[i];
      }
      return;
    }
    case OpKind::kBankDot: {
      const std::size_t b = in[1].dim(0);
      const std::size_t d = in[1].dim(1);
      const std::size_t steps = in[0].dim(0) / b;
      auto mem = in[0].data();
      auto q = in[1].data();
      for (std::size_t s = 0; s < steps; ++s) {
        for (std::size_t j = 0; j < b; ++j) {
          const double g = gy[s * b + j];
          const std::size_t mrow = (s * b + j) * d;
          if (grads[0]) for (std::size_t h = 0; h < d; ++h) grads[0][mrow + h] += g * q[j * d + h];
          if (grads[1]) for (std::size_t h = 0; h < d; ++h) grads[1][j * d + h] += g * mem[mrow + h];
        }
      }
      return;
    }
    case OpKind::kBankWeightedSum: {
      const std::size_t steps = in[0].dim(0);
      const std::size_t b = in[0].dim(1);
      const std::size_t d = in[1].dim(1);
      auto w = in[0].data();
      auto mem = in[1].data();
      for (std::size_t s = 0; s < steps; ++s) {
        for (std::size_t j = 0; j < b; ++j) {
          const std::size_t mrow = (s * b + j) * d;
          const double* g = gy.data() + j * d;
          if (grads[0]) {
            double acc = 0.0;
            for (std::size_t h = 0; h < d; ++h) acc += g[h] * mem[mrow + h];
            grads[0][s * b + j] += acc;
          }
          if (grads[1]) {
            const double ws = w[s * b + j];
            for (std::size_t h = 0; h < d; ++h) grads[1][mrow + h] += ws * g[h];
          }
        }
      }
      return;
    }
    case OpKind::kScaleRows: {
      const std::size_t cols = in[0].dim(1);
      auto x = in[0].data();
      auto f = in[1].data();
      for (std::size_t i = 0; i < n_out; ++i) {
        if (grads[0]) grads[0][i] += gy[i] * f[i / cols];
        if (grads[1]) grads[1][i / cols] += gy[i] * x[i];
      }
      return;
    }
    case OpKind::kPadCols: {
      const std::size_t rows = in[0].dim(0);
      const std::size_t cols = in[0].dim(1);
      const std::size_t width = cols + at.count;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) grads[0][r * cols + c] += gy[r * width + c];
      }
      return;
    }
    case OpKind::kScatterCols: {
      const std::size_t b = in[0].dim(1);
      for (std::size_t i = 0; i < at.ids.size(); ++i) {
        if (at.ids[i] < 0) continue;
        grads[0][i] += gy[(i % b) * at.count + static_cast<std::size_t>(at.ids[i])];
      }
      return;
    }
    case OpKind::kSelectRows: {
      const std::size_t cols = in[0].dim(1);
      for (std::size_t r = 0; r < at.ids.size(); ++r) {
        double* dst = grads[at.ids[r] != 0 ? 0 : 1];
        if (!dst) continue;
        for (std::size_t c = 0; c < cols; ++c) dst[r * cols + c] += gy[r * cols + c];
      }
      return;
    }
  }
}

}  // namespace

void Tape::reset() {
  std::vector<Tensor> outputs;
  outputs.reserve(nodes_.size());
  for (auto& node : nodes_) outputs.push_back(std::move(node.output));
  nodes_.clear();
  producer_.clear();
  for (auto& out : outputs) {
    if (out.use_count() == 1) release(std::move(out.impl().data));
  }
}

std::vector<double> Tape::acquire(std::size_t n) {
  auto it = pool_.find(n);
  if (it != pool_.end() && !it->second.empty()) {
    std::vector<double> buf = std::move(it->second.back());
    it->second.pop_back();
    pooled_doubles_ -= n;
    return buf;
  }
  return std::vector<double>(n);
}

void Tape::release(std::vector<double>&& buffer) {
  if (buffer.empty()) return;
  const std::size_t n = buffer.size();
  if (pooled_doubles_ + n > kMaxPooledDoubles) return;
  pooled_doubles_ += n;
  pool_[n].push_back(std::move(buffer));
}

std::size_t Tape::pooled_buffers() const {
  std::size_t total = 0;
  for (const auto& [size, bufs] : pool_) total += bufs.size();
  return total;
}

Tensor apply(Tape& tape, OpKind kind, std::span<const Tensor> inputs,
             const OpAttrs& attrs) {
  Shape out_shape = infer_shape(kind, inputs, attrs);
  bool needs_grad = false;
  for (const auto& t : inputs) needs_grad = needs_grad || t.requires_grad();
  const bool record = tape.recording() && needs_grad;

  std::vector<double> buffer = tape.acquire(shape_numel(out_shape));
  forward(kind, inputs, attrs, buffer.data(), out_shape);
  Tensor out = Tensor::from(std::move(out_shape), std::move(buffer), record);
  if (record) {
    tape.producer_.emplace(out.id(), tape.nodes_.size());
    tape.nodes_.push_back(Tape::Node{
        kind, std::vector<Tensor>(inputs.begin(), inputs.end()), out, attrs});
  }
  return out;
}

GradientMap backward(Tape& tape, const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw BackwardError("backward: loss must be a scalar, got " +
                        (loss.defined() ? shape_str(loss.shape()) : "undefined"));
  }
  GradientMap leaves;
  auto root = tape.producer_.find(loss.id());
  if (root == tape.producer_.end()) {
    throw BackwardError("backward: loss tensor is not on the tape");
  }

  const std::size_t n = root->second + 1;
  std::vector<std::vector<double>> node_grads(n);
  std::unordered_map<std::uint64_t, Tensor> leaf_tensors;
  node_grads[root->second].assign(1, 1.0);

  std::vector<double*> ptrs;
  for (std::size_t idx = n; idx-- > 0;) {
    auto& gy = node_grads[idx];
    if (gy.empty()) continue;
    const auto& node = tape.nodes_[idx];
    ptrs.assign(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const Tensor& x = node.inputs[k];
      if (!x.requires_grad()) continue;
      auto prod = tape.producer_.find(x.id());
      std::vector<double>* target = nullptr;
      if (prod != tape.producer_.end()) {
        target = &node_grads[prod->second];
      } else {
        target = &leaves[x.id()];
        leaf_tensors.emplace(x.id(), x);
      }
      if (target->empty()) {
        *target = tape.acquire(x.numel());
        std::fill(target->begin(), target->end(), 0.0);
      }
      ptrs[k] = target->data();
    }
    backward_node(node, gy, ptrs);
    tape.release(std::move(gy));
    gy = {};
  }

  for (auto& [id, g] : leaves) {
    Tensor leaf = leaf_tensors.at(id);
    auto dst = leaf.grad();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }
  return leaves;
}

namespace ops {
namespace {
Tensor unary(Tape& t, OpKind kind, const Tensor& x, OpAttrs at = {}) {
  const Tensor in[] = {x};
  return apply(t, kind, in, at);
}
Tensor binary(Tape& t, OpKind kind, const Tensor& a, const Tensor& b,
              OpAttrs at = {}) {
  const Tensor in[] = {a, b};
  return apply(t, kind, in, at);
}
}  // namespace

Tensor matmul(Tape& t, const Tensor& a, const Tensor& b) { return binary(t, OpKind::kMatmul, a, b); }
Tensor add(Tape& t, const Tensor& a, const Tensor& b) { return binary(t, OpKind::kAdd, a, b); }
Tensor sub(Tape& t, const Tensor& a, const Tensor& b) { return binary(t, OpKind::kSub, a, b); }
Tensor mul(Tape& t, const Tensor& a, const Tensor& b) { return binary(t, OpKind::kMul, a, b); }

Tensor concat(Tape& t, std::span<const Tensor> xs, std::size_t axis) {
  OpAttrs at;
  at.axis = axis;
  return apply(t, OpKind::kConcat, xs, at);
}

Tensor slice(Tape& t, const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t end) {
  OpAttrs at;
  at.axis = axis;
  at.start = start;
  at.end = end;
  return unary(t, OpKind::kSlice, x, std::move(at));
}

Tensor tanh(Tape& t, const Tensor& x) { return unary(t, OpKind::kTanh, x); }
Tensor sigmoid(Tape& t, const Tensor& x) { return unary(t, OpKind::kSigmoid, x); }
Tensor relu(Tape& t, const Tensor& x) { return unary(t, OpKind::kRelu, x); }
Tensor exp(Tape& t, const Tensor& x) { return unary(t, OpKind::kExp, x); }
Tensor log(Tape& t, const Tensor& x) { return unary(t, OpKind::kLog, x); }

Tensor affine(Tape& t, const Tensor& x, double scale, double shift) {
  OpAttrs at;
  at.scale = scale;
  at.shift = shift;
  return unary(t, OpKind::kAffine, x, std::move(at));
}

Tensor softmax(Tape& t, const Tensor& x, std::size_t axis) {
  OpAttrs at;
  at.axis = axis;
  return unary(t, OpKind::kSoftmax, x, std::move(at));
}

Tensor log_softmax(Tape& t, const Tensor& x, std::size_t axis) {
  OpAttrs at;
  at.axis = axis;
  return unary(t, OpKind::kLogSoftmax, x, std::move(at));
}

Tensor embedding_lookup(Tape& t, const Tensor& table, std::vector<int> ids) {
  OpAttrs at;
  at.ids = std::move(ids);
  return unary(t, OpKind::kEmbeddingLookup, table, std::move(at));
}

Tensor dropout(Tape& t, const Tensor& x, const Tensor& mask) {
  OpAttrs at;
  at.mask = mask;
  return unary(t, OpKind::kDropout, x, std::move(at));
}

Tensor sum(Tape& t, const Tensor& x) { return unary(t, OpKind::kSum, x); }
Tensor mean(Tape& t, const Tensor& x) { return unary(t, OpKind::kMean, x); }

Tensor reshape(Tape& t, const Tensor& x, Shape shape) {
  OpAttrs at;
  at.shape = std::move(shape);
  return unary(t, OpKind::kReshape, x, std::move(at));
}

Tensor pick(Tape& t, const Tensor& x, std::vector<int> ids, int ignore_index) {
  OpAttrs at;
  at.ids = std::move(ids);
  at.ignore_index = ignore_index;
  return unary(t, OpKind::kPick, x, std::move(at));
}

Tensor tile_rows(Tape& t, const Tensor& x, std::size_t repeats) {
  OpAttrs at;
  at.count = repeats;
  return unary(t, OpKind::kTileRows, x, std::move(at));
}

Tensor bank_dot(Tape& t, const Tensor& memory, const Tensor& query) {
  return binary(t, OpKind::kBankDot, memory, query);
}

Tensor bank_weighted_sum(Tape& t, const Tensor& weights, const Tensor& memory) {
  return binary(t, OpKind::kBankWeightedSum, weights, memory);
}

Tensor scale_rows(Tape& t, const Tensor& x, const Tensor& factors) {
  return binary(t, OpKind::kScaleRows, x, factors);
}

Tensor pad_cols(Tape& t, const Tensor& x, std::size_t extra) {
  if (extra == 0) return x;
  OpAttrs at;
  at.count = extra;
  return unary(t, OpKind::kPadCols, x, std::move(at));
}

Tensor scatter_cols(Tape& t, const Tensor& weights, std::vector<int> columns,
                    std::size_t width) {
  OpAttrs at;
  at.ids = std::move(columns);
  at.count = width;
  return unary(t, OpKind::kScatterCols, weights, std::move(at));
}

Tensor select_rows(Tape& t, const Tensor& a, const Tensor& b,
                   std::vector<int> flags) {
  OpAttrs at;
  at.ids = std::move(flags);
  return binary(t, OpKind::kSelectRows, a, b, std::move(at));
}

}  // namespace ops
}  // namespace minimt
