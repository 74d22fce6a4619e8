#include "mmc/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mmc/autodiff.hpp"
#include "mmc/rng.hpp"

namespace mmc::gradcheck {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kRelativeFloor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

double evaluate(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  return f(std::span<const Tensor>(inputs)).item();
}

Tensor perturbed(const Tensor& t, std::size_t flat, double delta) {
  std::vector<double> v(t.data().begin(), t.data().end());
  v[flat] += delta;
  return Tensor::from_data(t.shape(), std::move(v));
}

}  // namespace

CheckResult check_gradient(const std::string& name, const ScalarFn& f, const std::vector<Tensor>& inputs,
                           const CheckOptions& opts) {
  std::vector<Tensor> leaves;
  for (const auto& t : inputs) leaves.push_back(t.requires_grad() ? t : t.as_leaf());
  const Tensor loss = f(std::span<const Tensor>(leaves));
  const std::vector<Tensor> grads = grad(loss, leaves, false);

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t k = 0; k < inputs[i].size(); ++k) coords.emplace_back(i, k);
  }
  if (opts.max_coords && coords.size() > opts.max_coords) {
    Rng rng(substream(opts.seed, 0xfdc0));
    rng.shuffle(coords.begin(), coords.end());
    coords.resize(opts.max_coords);
  }

  CheckResult result{name};
  std::vector<Tensor> work;
  for (const auto& t : inputs) work.push_back(t.detach());
  const double base = opts.skip_kinks ? evaluate(f, work) : 0.0;
  for (auto [i, k] : coords) {
    const Tensor original = work[i];
    work[i] = perturbed(original, k, opts.eps);
    const double plus = evaluate(f, work);
    work[i] = perturbed(original, k, -opts.eps);
    const double minus = evaluate(f, work);
    work[i] = original;
    const double numeric = (plus - minus) / (2.0 * opts.eps);
    const double analytic = grads[i][k];
    const double err = relative_error(analytic, numeric);
    if (opts.skip_kinks && err > opts.tol) {
      const double forward = (plus - base) / opts.eps;
      const double backward = (base - minus) / opts.eps;
      if (std::abs(forward - backward) > std::abs(numeric - analytic)) {
        ++result.skipped;
        continue;
      }
    }
    ++result.coords;
    result.max_rel_err = std::max(result.max_rel_err, err);
  }
  result.passed = result.max_rel_err <= opts.tol && result.coords > 0;
  return result;
}

CheckResult check_double_backward(const std::string& name, const ScalarFn& f, const std::vector<Tensor>& inputs,
                                  std::uint64_t seed, const CheckOptions& opts) {
  Rng rng(substream(seed, 0xdb));
  std::vector<Tensor> directions;
  for (const auto& t : inputs) {
    std::vector<double> v(t.size());
    for (auto& x : v) x = rng.normal();
    directions.push_back(Tensor::from_data(t.shape(), std::move(v)));
  }
  ScalarFn directional = [f, directions](std::span<const Tensor> xs) {
    GradModeGuard on(true);
    std::vector<Tensor> leaves;
    for (const auto& t : xs) leaves.push_back(t.requires_grad() ? t : t.as_leaf());
    const Tensor y = f(std::span<const Tensor>(leaves));
    const std::vector<Tensor> gs = grad(y, leaves, true);
    Tensor acc = Tensor::scalar(0.0);
    for (std::size_t i = 0; i < gs.size(); ++i) acc = add(acc, sum(mul(gs[i], directions[i])));
    return acc;
  };
  return check_gradient(name, directional, inputs, opts);
}

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double sigma = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.normal(0.0, sigma);
  return Tensor::from_data(std::move(shape), std::move(v));
}

// Values bounded away from zero so relu kinks sit outside the FD stencil.
Tensor away_from_zero(Rng& rng, Shape shape) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) {
    const double m = rng.uniform(0.05, 2.0);
    x = rng.uniform() < 0.5 ? -m : m;
  }
  return Tensor::from_data(std::move(shape), std::move(v));
}

// Distinct values at least 0.01 apart so 2x2 windows have no near-ties.
Tensor well_separated(Rng& rng, Shape shape) {
  std::vector<double> v(numel(shape));
  std::iota(v.begin(), v.end(), 0.0);
  rng.shuffle(v.begin(), v.end());
  for (auto& x : v) x = 0.05 * x - 1.0 + rng.uniform(0.0, 0.01);
  return Tensor::from_data(std::move(shape), std::move(v));
}

Tensor uniform_tensor(Rng& rng, Shape shape, double lo, double hi) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_data(std::move(shape), std::move(v));
}

struct OpCase {
  std::string name;
  std::vector<Tensor> inputs;
  std::function<Tensor(std::span<const Tensor>)> op;
  Shape out_shape;
};

std::vector<OpCase> op_cases(std::uint64_t seed) {
  Rng rng(substream(seed, 0x0c));
  std::vector<OpCase> cases;
  const Shape x4{2, 3, 6, 4};

  for (int k : {1, 3, 5}) {
    const int pad = (k - 1) / 2;
    cases.push_back({"conv2d_k" + std::to_string(k),
                     {random_tensor(rng, x4), random_tensor(rng, {4, 3, k, k}, 0.5), random_tensor(rng, {4})},
                     [pad](std::span<const Tensor> xs) { return conv2d(xs[0], xs[1], xs[2], pad); },
                     {2, 4, 6, 4}});
  }
  cases.push_back({"conv2d_valid",
                   {random_tensor(rng, x4), random_tensor(rng, {2, 3, 3, 3}, 0.5), random_tensor(rng, {2})},
                   [](std::span<const Tensor> xs) { return conv2d(xs[0], xs[1], xs[2], 0); },
                   {2, 2, 4, 2}});
  cases.push_back({"conv2d_input_grad",
                   {random_tensor(rng, {2, 4, 6, 4}), random_tensor(rng, {4, 3, 3, 3}, 0.5)},
                   [x4](std::span<const Tensor> xs) { return detail::conv2d_input_grad(xs[0], xs[1], 1, x4); },
                   x4});
  cases.push_back({"conv2d_kernel_grad",
                   {random_tensor(rng, x4), random_tensor(rng, {2, 4, 6, 4})},
                   [](std::span<const Tensor> xs) { return detail::conv2d_kernel_grad(xs[0], xs[1], 1, {4, 3, 3, 3}); },
                   {4, 3, 3, 3}});
  cases.push_back({"relu", {away_from_zero(rng, x4)}, [](std::span<const Tensor> xs) { return relu(xs[0]); }, x4});
  cases.push_back({"sigmoid", {random_tensor(rng, x4, 2.0)}, [](std::span<const Tensor> xs) { return sigmoid(xs[0]); }, x4});
  cases.push_back({"maxpool2", {well_separated(rng, x4)}, [](std::span<const Tensor> xs) { return maxpool2(xs[0]); },
                   {2, 3, 3, 2}});
  cases.push_back({"upsample_nearest2", {random_tensor(rng, x4)},
                   [](std::span<const Tensor> xs) { return upsample_nearest2(xs[0]); }, {2, 3, 12, 8}});
  cases.push_back({"sumpool2", {random_tensor(rng, x4)}, [](std::span<const Tensor> xs) { return detail::sumpool2(xs[0]); },
                   {2, 3, 3, 2}});
  cases.push_back({"concat_channels", {random_tensor(rng, x4), random_tensor(rng, {2, 2, 6, 4})},
                   [](std::span<const Tensor> xs) { return concat_channels(xs[0], xs[1]); }, {2, 5, 6, 4}});
  cases.push_back({"slice_channels", {random_tensor(rng, x4)},
                   [](std::span<const Tensor> xs) { return slice_channels(xs[0], 1, 2); }, {2, 2, 6, 4}});
  cases.push_back({"embed_channels", {random_tensor(rng, x4)},
                   [](std::span<const Tensor> xs) { return detail::embed_channels(xs[0], 1, 5); }, {2, 5, 6, 4}});
  cases.push_back({"channel_sum", {random_tensor(rng, x4)},
                   [](std::span<const Tensor> xs) { return detail::channel_sum(xs[0]); }, {3}});
  cases.push_back({"expand_channels", {random_tensor(rng, {3})},
                   [x4](std::span<const Tensor> xs) { return detail::expand_channels(xs[0], x4); }, x4});
  cases.push_back({"expand_scalar", {random_tensor(rng, {})},
                   [x4](std::span<const Tensor> xs) { return expand_scalar(xs[0], x4); }, x4});
  cases.push_back({"sum", {random_tensor(rng, x4)}, [](std::span<const Tensor> xs) { return sum(xs[0]); }, {}});
  cases.push_back({"mean", {random_tensor(rng, x4)}, [](std::span<const Tensor> xs) { return mean(xs[0]); }, {}});
  cases.push_back({"add", {random_tensor(rng, x4), random_tensor(rng, x4)},
                   [](std::span<const Tensor> xs) { return add(xs[0], xs[1]); }, x4});
  cases.push_back({"sub", {random_tensor(rng, x4), random_tensor(rng, x4)},
                   [](std::span<const Tensor> xs) { return sub(xs[0], xs[1]); }, x4});
  cases.push_back({"mul", {random_tensor(rng, x4), random_tensor(rng, x4)},
                   [](std::span<const Tensor> xs) { return mul(xs[0], xs[1]); }, x4});
  cases.push_back({"scale", {random_tensor(rng, x4)}, [](std::span<const Tensor> xs) { return scale(xs[0], -1.7); }, x4});
  cases.push_back({"add_scalar", {random_tensor(rng, x4)},
                   [](std::span<const Tensor> xs) { return add_scalar(xs[0], 0.3); }, x4});
  cases.push_back({"relu_mask", {random_tensor(rng, x4)},
                   [ref = away_from_zero(rng, x4)](std::span<const Tensor> xs) { return detail::relu_mask(xs[0], ref); },
                   x4});
  cases.push_back({"bce_with_logits", {random_tensor(rng, x4, 3.0), uniform_tensor(rng, x4, 0.05, 0.95)},
                   [](std::span<const Tensor> xs) { return bce_with_logits(xs[0], xs[1]); }, {}});
  for (auto& c : cases) {
    Tensor w = random_tensor(rng, c.out_shape);
    c.op = [op = c.op, w](std::span<const Tensor> xs) {
      const Tensor y = op(xs);
      return y.rank() == 0 ? mul(y, w) : sum(mul(y, w));
    };
  }
  return cases;
}

}  // namespace

std::vector<CheckResult> op_suite(int seeds, const CheckOptions& opts) {
  std::vector<CheckResult> merged;
  auto merge = [&merged](const CheckResult& r) {
    for (auto& m : merged) {
      if (m.name == r.name) {
        m.max_rel_err = std::max(m.max_rel_err, r.max_rel_err);
        m.coords += r.coords;
        m.skipped += r.skipped;
        m.passed = m.passed && r.passed;
        return;
      }
    }
    merged.push_back(r);
  };
  for (int s = 0; s < seeds; ++s) {
    for (const auto& c : op_cases(static_cast<std::uint64_t>(s))) {
      merge(check_gradient(c.name, c.op, c.inputs, opts));
      merge(check_double_backward(c.name + "/2nd", c.op, c.inputs, static_cast<std::uint64_t>(s), opts));
    }
  }
  return merged;
}

}  // namespace mmc::gradcheck
