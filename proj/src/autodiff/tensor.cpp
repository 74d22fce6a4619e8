#include "mmc/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "mmc/errors.hpp"

namespace mmc {

namespace {

#if defined(__GLIBC__)
// Activation buffers are a few MB and churn every step; by default glibc maps
// and unmaps each one, paying page faults on every allocation.
const bool heap_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif
thread_local bool grad_mode_enabled = true;
}

bool GradMode::enabled() { return grad_mode_enabled; }
void GradMode::set_enabled(bool on) { grad_mode_enabled = on; }

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
  }
  if (numel(shape) != data.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  for (double v : data) {
    if (!std::isfinite(v)) throw NumericalError("non-finite value in tensor data");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->storage = std::make_shared<const Buffer>(data.begin(), data.end());
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from_buffer(Shape shape, Buffer&& data) {
  if (numel(shape) != data.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) + " values");
  }
  if (!all_finite(data)) throw NumericalError("non-finite value in tensor data");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->storage = std::make_shared<const Buffer>(std::move(data));
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = numel(shape);
  return from_data(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return from_data({}, {value}); }

const Shape& Tensor::shape() const { return impl_->shape; }

int Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) throw ShapeError("axis out of range");
  return impl_->shape[axis];
}

std::size_t Tensor::size() const { return impl_->storage->size(); }

std::span<const double> Tensor::data() const { return {*impl_->storage}; }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return (*impl_->storage)[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

const Node* Tensor::grad_fn() const { return impl_ ? impl_->grad_fn.get() : nullptr; }

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->storage = impl_->storage;
  return Tensor(std::move(impl));
}

Tensor Tensor::as_leaf() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->storage = impl_->storage;
  impl->requires_grad = true;
  return Tensor(std::move(impl));
}

bool all_finite(std::span<const double> values) {
  // Branch-free exponent test so the scan vectorises.
  constexpr std::uint64_t exponent = 0x7ff0000000000000ULL;
  std::uint64_t bad = 0;
  for (double v : values) bad |= static_cast<std::uint64_t>((std::bit_cast<std::uint64_t>(v) & exponent) == exponent);
  return bad == 0;
}

Tensor make_result(Shape shape, Buffer&& data, std::string_view op, std::vector<Tensor> inputs,
                   BackwardFn backward, bool finite_checked) {
  if (!finite_checked && !all_finite(data)) {
    throw NumericalError(std::string("non-finite output from ") + std::string(op));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->storage = std::make_shared<const Buffer>(std::move(data));
  if (GradMode::enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      impl->requires_grad = true;
      impl->grad_fn = std::make_shared<Node>(Node{op, std::move(inputs), std::move(backward)});
    }
  }
  return Tensor(std::move(impl));
}

}  // namespace mmc
