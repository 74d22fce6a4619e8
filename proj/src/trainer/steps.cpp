#include <cmath>

#include "mmc/errors.hpp"
#include "mmc/trainer.hpp"

namespace mmc {

Batch make_batch(std::span<const SamplePair* const> samples, MaskSource masks) {
  return {image_batch(samples), mask_batch(samples, masks), {samples.begin(), samples.end()}};
}

TempUpdate temp_update(const SegParams& w, const MetaParams& theta, const Batch& noisy, double alpha,
                       const Corrector& corrector) {
  if (!noisy.x.defined() || noisy.x.dim(0) == 0) throw std::invalid_argument("temp_update: empty batch");
  GradModeGuard on(true);
  TempUpdate r;
  r.w_leaves = w.params.as_leaves();
  r.theta_leaves = theta.params.as_leaves();
  r.logits = seg_forward(w.config, r.w_leaves, noisy.x).logits;
  r.corrected = corrector ? corrector(r.logits, noisy.y, noisy)
                          : cnet_forward(theta.variant, r.theta_leaves, r.logits, noisy.y);
  r.loss = bce_with_logits(r.logits, r.corrected);
  r.w_prime = functional_sgd_step(r.w_leaves, grad(r.loss, r.w_leaves, true), alpha);
  return r;
}

TempUpdate forward_only(const SegParams& w, const Batch& noisy) {
  GradModeGuard on(true);
  TempUpdate r;
  r.w_leaves = w.params.as_leaves();
  r.logits = seg_forward(w.config, r.w_leaves, noisy.x).logits;
  return r;
}

Hypergradient hypergradient(const TempUpdate& temp, const SegConfig& seg, const Batch& meta) {
  if (temp.w_prime.empty()) throw std::logic_error("meta step needs the temporary update's graph");
  GradModeGuard on(true);
  const Tensor loss = bce_with_logits(seg_forward(seg, temp.w_prime, meta.x).logits, meta.y);
  return {loss.item(), grad(loss, temp.theta_leaves, false)};
}

MetaParams meta_update(const MetaParams& theta, const GradMap& hypergrad, double beta, Optimizer& opt) {
  if (beta == 0.0) return theta;
  MetaParams next = theta;
  next.params = opt.step(theta.params, hypergrad, beta);
  return next;
}

BilevelProblem mmc_problem(const SegConfig& seg, CNetVariant variant, const Batch& noisy, const Batch& meta) {
  return {[seg, variant, noisy](const ParamSet& w, const ParamSet& theta) {
            const Tensor logits = seg_forward(seg, w, noisy.x).logits;
            return bce_with_logits(logits, cnet_forward(variant, theta, logits, noisy.y));
          },
          [seg, meta](const ParamSet& w_prime) {
            return bce_with_logits(seg_forward(seg, w_prime, meta.x).logits, meta.y);
          }};
}

Hypergradient hypergradient(const BilevelProblem& problem, const ParamSet& w, const ParamSet& theta, double alpha) {
  GradModeGuard on(true);
  const ParamSet w_leaves = w.as_leaves();
  const ParamSet theta_leaves = theta.as_leaves();
  const Tensor inner = problem.inner(w_leaves, theta_leaves);
  const ParamSet w_prime = functional_sgd_step(w_leaves, grad(inner, w_leaves, true), alpha);
  const Tensor outer = problem.outer(w_prime);
  return {outer.item(), grad(outer, theta_leaves, false)};
}

double outer_after_step(const BilevelProblem& problem, const ParamSet& w, const ParamSet& theta, double alpha) {
  ParamSet w_prime;
  {
    GradModeGuard on(true);
    const ParamSet leaves = w.as_leaves();
    const Tensor inner = problem.inner(leaves, theta.detached());
    w_prime = functional_sgd_step(w.detached(), grad(inner, leaves, false), alpha);
  }
  NoGradGuard off;
  return problem.outer(w_prime).item();
}

namespace {

ParamSet perturbed(const ParamSet& theta, std::size_t tensor, std::size_t index, double delta) {
  ParamSet out = theta;
  const Tensor& t = theta[tensor].value;
  std::vector<double> v(t.data().begin(), t.data().end());
  v[index] += delta;
  out.set(theta[tensor].name, Tensor::from_data(t.shape(), std::move(v)));
  return out;
}

}  // namespace

std::vector<double> hypergrad_fd(const BilevelProblem& problem, const ParamSet& w, const ParamSet& theta,
                                 double alpha, double epsilon, std::span<const FdCoord> coords) {
  if (!(epsilon > 0)) throw std::invalid_argument("hypergrad_fd: epsilon must be > 0");
  std::vector<double> out;
  out.reserve(coords.size());
  for (const auto& c : coords) {
    const double plus = outer_after_step(problem, w, perturbed(theta, c.tensor, c.index, epsilon), alpha);
    const double minus = outer_after_step(problem, w, perturbed(theta, c.tensor, c.index, -epsilon), alpha);
    out.push_back((plus - minus) / (2 * epsilon));
  }
  return out;
}

GradMap hypergrad_fd(const BilevelProblem& problem, const ParamSet& w, const ParamSet& theta, double alpha,
                     double epsilon) {
  GradMap out;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const Tensor& t = theta[i].value;
    std::vector<FdCoord> coords;
    for (std::size_t k = 0; k < t.size(); ++k) coords.push_back({i, k});
    out.add(theta[i].name, Tensor::from_data(t.shape(), hypergrad_fd(problem, w, theta, alpha, epsilon, coords)));
  }
  return out;
}

MainStep main_update(TrainerState& state, const TempUpdate& temp, const Batch& noisy, double lr,
                     const Corrector& corrector) {
  GradModeGuard on(true);
  MainStep r;
  {
    NoGradGuard off;
    r.target = corrector ? corrector(temp.logits.detach(), noisy.y, noisy).detach()
                         : cnet_forward(state.theta, temp.logits.detach(), noisy.y);
  }
  const Tensor loss = bce_with_logits(temp.logits, r.target);
  r.loss = loss.item();
  r.grad = grad(loss, temp.w_leaves, false);
  state.w.params = state.main_opt.step(state.w.params, r.grad, lr);
  return r;
}

double supervised_step(TrainerState& state, const Batch& batch, double lr) {
  GradModeGuard on(true);
  const ParamSet leaves = state.w.params.as_leaves();
  const Tensor loss = bce_with_logits(seg_forward(state.w.config, leaves, batch.x).logits, batch.y);
  state.w.params = state.main_opt.step(state.w.params, grad(loss, leaves, false), lr);
  return loss.item();
}

}  // namespace mmc
