#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mmc/tensor.hpp"

namespace mmc::gradcheck {

// Gradients smaller than this are compared in absolute terms.
inline constexpr double kRelativeFloor = 1e-4;

double relative_error(double analytic, double numeric);

struct CheckResult {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t coords = 0;
  // Coordinates with a non-differentiable point inside [x - eps, x + eps].
  std::size_t skipped = 0;
  bool passed = false;
};

using ScalarFn = std::function<Tensor(std::span<const Tensor>)>;

// Central differences of f (evaluated with grad mode off) at every
// coordinate of every input, or at `max_coords` random coordinates when
// nonzero.
struct CheckOptions {
  double eps = 1e-4;
  double tol = 1e-5;
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
  // Skip coordinates whose one-sided slopes disagree (kinks in relu/max).
  bool skip_kinks = false;
};

CheckResult check_gradient(const std::string& name, const ScalarFn& f, const std::vector<Tensor>& inputs,
                           const CheckOptions& opts = {});

// Checks the gradient of <v, grad f(x)> against central differences of that
// gradient, i.e. the double-backward path.
CheckResult check_double_backward(const std::string& name, const ScalarFn& f, const std::vector<Tensor>& inputs,
                                  std::uint64_t seed, const CheckOptions& opts = {});

// Every differentiable op in the autodiff library, first and second order,
// over `seeds` random draws each.
std::vector<CheckResult> op_suite(int seeds, const CheckOptions& opts = {});

}  // namespace mmc::gradcheck
