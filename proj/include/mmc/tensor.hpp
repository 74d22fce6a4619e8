#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mmc {

using Shape = std::vector<int>;

// Leaves elements uninitialised when a vector is sized without a fill value;
// op outputs are written in full, so the zero fill would be wasted.
template <typename T>
struct UninitAllocator : std::allocator<T> {
  template <typename U>
  struct rebind {
    using other = UninitAllocator<U>;
  };
  UninitAllocator() = default;
  template <typename U>
  UninitAllocator(const UninitAllocator<U>&) noexcept {}
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    if constexpr (sizeof...(Args) == 0) {
      ::new (static_cast<void*>(p)) U;
    } else {
      ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
  }
};

using Buffer = std::vector<double, UninitAllocator<double>>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

// Receives the upstream gradient and a mask of which inputs need a
// gradient; returns one entry per input (undefined where not needed).
using BackwardFn =
    std::function<std::vector<Tensor>(const Tensor& grad_out, const std::vector<bool>& needs)>;

struct Node {
  std::string_view op;
  std::vector<Tensor> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  std::shared_ptr<const Buffer> storage;
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;
};

// Immutable dense array, row-major. Copies share storage and graph history.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor from_buffer(Shape shape, Buffer&& data);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  std::span<const double> data() const;
  double item() const;
  double operator[](std::size_t flat) const { return data()[flat]; }

  bool requires_grad() const;
  const Node* grad_fn() const;

  // Same values, no history, no grad requirement.
  Tensor detach() const;
  // A fresh leaf sharing these values, marked as requiring grad.
  Tensor as_leaf() const;

  const TensorImpl* id() const { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;

  friend Tensor make_result(Shape, Buffer&&, std::string_view, std::vector<Tensor>, BackwardFn, bool);
};

// Wraps freshly computed values as an op output. Rejects non-finite data
// (unless the op already checked it) and records a graph node when grad mode
// is on and any input requires grad.
Tensor make_result(Shape shape, Buffer&& data, std::string_view op, std::vector<Tensor> inputs,
                   BackwardFn backward, bool finite_checked = false);

// True when no element is NaN or infinite.
bool all_finite(std::span<const double> values);

class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class GradModeGuard {
 public:
  explicit GradModeGuard(bool on) : previous_(GradMode::enabled()) { GradMode::set_enabled(on); }
  ~GradModeGuard() { GradMode::set_enabled(previous_); }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

struct NoGradGuard : GradModeGuard {
  NoGradGuard() : GradModeGuard(false) {}
};

}  // namespace mmc
