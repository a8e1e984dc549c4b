#include "minimt/tensor.hpp"

#include <atomic>
#include <sstream>

namespace minimt {

namespace {
std::atomic<std::uint64_t> next_tensor_id{1};

std::shared_ptr<detail::TensorStorage> make_storage(Shape shape,
                                                    std::vector<double> data,
                                                    bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " +
                                 shape_str(shape));
  }
  if (shape.empty()) throw ShapeError("tensor rank must be at least 1");
  if (data.size() != shape_numel(shape)) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  auto s = std::make_shared<detail::TensorStorage>();
  s->id = next_tensor_id.fetch_add(1, std::memory_order_relaxed);
  s->shape = std::move(shape);
  s->data = std::move(data);
  s->requires_grad = requires_grad;
  return s;
}
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(make_storage(std::move(shape), std::vector<double>(n, 0.0),
                             requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(make_storage(std::move(shape), std::vector<double>(n, value),
                             requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  return Tensor(make_storage(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

const detail::TensorStorage& Tensor::impl() const {
  if (!impl_) throw std::logic_error("use of undefined tensor");
  return *impl_;
}

detail::TensorStorage& Tensor::impl() {
  if (!impl_) throw std::logic_error("use of undefined tensor");
  return *impl_;
}

std::uint64_t Tensor::id() const { return impl().id; }
const Shape& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return impl().data.size(); }

std::span<double> Tensor::data() { return impl().data; }
std::span<const double> Tensor::data() const { return impl().data; }

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() requires a single-element tensor, got " +
                     shape_str(shape()));
  }
  return impl().data[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  const auto& s = impl();
  if (s.shape.size() != 2) throw ShapeError("at(row, col) requires rank 2");
  return s.data[row * s.shape[1] + col];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }
void Tensor::set_requires_grad(bool value) { impl().requires_grad = value; }

bool Tensor::has_grad() const { return !impl().grad.empty(); }

std::span<double> Tensor::grad() {
  auto& s = impl();
  if (s.grad.empty()) s.grad.assign(s.data.size(), 0.0);
  return s.grad;
}

std::span<const double> Tensor::grad() const { return impl().grad; }

void Tensor::zero_grad() {
  auto& s = impl();
  s.grad.assign(s.data.size(), 0.0);
}

void Tensor::clear_grad() {
  auto& s = impl();
  s.grad.clear();
  s.grad.shrink_to_fit();
}

Tensor Tensor::clone() const {
  const auto& s = impl();
  return Tensor(make_storage(s.shape, s.data, s.requires_grad));
}

}  // namespace minimt
