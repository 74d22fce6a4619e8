#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mmc/tensor.hpp"

namespace mmc {

// Ordered collection of named tensors. Used both for parameter sets and for
// the gradients computed with respect to them.
class TensorMap {
 public:
  struct Entry {
    std::string name;
    Tensor value;
  };

  void add(std::string name, Tensor value);
  const Tensor& at(std::string_view name) const;
  bool contains(std::string_view name) const;
  void set(std::string_view name, Tensor value);

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t scalar_count() const;

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  const Entry& operator[](std::size_t i) const { return entries_[i]; }

  std::vector<Tensor> tensors() const;
  // Fresh grad-requiring leaves with the same values.
  TensorMap as_leaves() const;
  TensorMap detached() const;
  // Key set and shapes identical.
  bool same_layout(const TensorMap& other) const;

 private:
  std::vector<Entry> entries_;
};

using ParamSet = TensorMap;
using GradMap = TensorMap;

// Reverse-mode gradients of a scalar loss. Unreachable inputs get zeros.
// With create_graph the backward pass is itself recorded so the returned
// gradients can be differentiated again.
std::vector<Tensor> grad(const Tensor& loss, std::span<const Tensor> inputs, bool create_graph);
GradMap grad(const Tensor& loss, const ParamSet& params, bool create_graph);

// W' = W - alpha * g as recorded ops, so W' stays differentiable through g
// when g was built with create_graph. Inputs are not modified.
ParamSet functional_sgd_step(const ParamSet& params, const GradMap& grads, double alpha);

// Elementwise arithmetic on equal shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);

enum class Activation { relu, sigmoid };
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor activation(const Tensor& x, Activation kind);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Broadcasts a one-element tensor to `shape`.
Tensor expand_scalar(const Tensor& s, const Shape& shape);

// input [N,Cin,H,W], kernel [Cout,Cin,kh,kw] with odd kh/kw, bias [Cout] or
// undefined. Cross-correlation; each output starts from its bias and then
// accumulates in (channel, kernel row, kernel col) order.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int padding);

enum class Resample { maxpool2, upsample_nearest2 };
Tensor maxpool2(const Tensor& x);
Tensor upsample_nearest2(const Tensor& x);
Tensor spatial_resample(const Tensor& x, Resample kind);

Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice_channels(const Tensor& x, int start, int count);

// Mean over elements of -[t log s(z) + (1-t) log s(-z)], evaluated as
// max(z,0) - t z + log1p(exp(-|z|)). Differentiable in both arguments.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

// Building blocks of the backward passes above. Public so the gradient
// checker can verify them as first-class differentiable ops.
namespace detail {
Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& kernel, int padding,
                         const Shape& input_shape);
Tensor conv2d_kernel_grad(const Tensor& input, const Tensor& grad_out, int padding,
                          const Shape& kernel_shape);
Tensor channel_sum(const Tensor& x);
Tensor expand_channels(const Tensor& v, const Shape& shape);
Tensor sumpool2(const Tensor& x);
Tensor embed_channels(const Tensor& x, int start, int total);
// grad * [ref > 0]; ref is treated as a constant.
Tensor relu_mask(const Tensor& grad, const Tensor& ref);
}  // namespace detail

}  // namespace mmc
