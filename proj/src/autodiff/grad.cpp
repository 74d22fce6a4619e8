#include <algorithm>
#include <unordered_map>
#include <unordered_set>

#include "mmc/autodiff.hpp"
#include "mmc/errors.hpp"

namespace mmc {

void TensorMap::add(std::string name, Tensor value) {
  if (contains(name)) throw std::invalid_argument("duplicate tensor name: " + name);
  entries_.push_back({std::move(name), std::move(value)});
}

const Tensor& TensorMap::at(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.value;
  }
  throw std::out_of_range("no tensor named " + std::string(name));
}

bool TensorMap::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == name; });
}

void TensorMap::set(std::string_view name, Tensor value) {
  for (auto& e : entries_) {
    if (e.name == name) {
      e.value = std::move(value);
      return;
    }
  }
  throw std::out_of_range("no tensor named " + std::string(name));
}

std::size_t TensorMap::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

std::vector<Tensor> TensorMap::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.value);
  return out;
}

TensorMap TensorMap::as_leaves() const {
  TensorMap out;
  for (const auto& e : entries_) out.add(e.name, e.value.as_leaf());
  return out;
}

TensorMap TensorMap::detached() const {
  TensorMap out;
  for (const auto& e : entries_) out.add(e.name, e.value.detach());
  return out;
}

bool TensorMap::same_layout(const TensorMap& other) const {
  if (size() != other.size()) return false;
  for (std::size_t i = 0; i < size(); ++i) {
    if (entries_[i].name != other.entries_[i].name) return false;
    if (entries_[i].value.shape() != other.entries_[i].value.shape()) return false;
  }
  return true;
}

std::vector<Tensor> grad(const Tensor& loss, std::span<const Tensor> inputs, bool create_graph) {
  if (!loss.defined() || loss.size() != 1) {
    throw ShapeError("grad() needs a scalar loss");
  }

  // Topological order (inputs before consumers) by iterative DFS.
  std::vector<const TensorImpl*> order;
  std::unordered_map<const TensorImpl*, const Tensor*> handle;
  {
    std::unordered_set<const TensorImpl*> seen;
    std::vector<std::pair<const Tensor*, std::size_t>> stack;
    stack.emplace_back(&loss, 0);
    seen.insert(loss.id());
    handle[loss.id()] = &loss;
    while (!stack.empty()) {
      auto& [t, next] = stack.back();
      const Node* node = t->grad_fn();
      if (node && next < node->inputs.size()) {
        const Tensor& in = node->inputs[next++];
        if (in.requires_grad() && seen.insert(in.id()).second) {
          handle[in.id()] = &in;
          stack.emplace_back(&in, 0);
        }
        continue;
      }
      order.push_back(t->id());
      stack.pop_back();
    }
  }

  // Only walk the part of the graph that leads to a requested input.
  std::unordered_set<const TensorImpl*> targets;
  for (const auto& in : inputs) targets.insert(in.id());
  std::unordered_map<const TensorImpl*, bool> needed;
  for (const TensorImpl* id : order) {
    bool n = targets.count(id) > 0;
    if (const Node* node = handle[id]->grad_fn()) {
      for (const auto& in : node->inputs) {
        if (in.requires_grad() && needed[in.id()]) n = true;
      }
    }
    needed[id] = n;
  }

  GradModeGuard mode(create_graph);
  std::unordered_map<const TensorImpl*, Tensor> grads;
  grads[loss.id()] = Tensor::full(loss.shape(), 1.0);
  // Without create_graph, repeated contributions are summed in place in the
  // same order the recorded add() would use.
  std::unordered_map<const TensorImpl*, Buffer> sums;
  const auto settle = [&](const TensorImpl* id, Tensor& g) {
    auto s = sums.find(id);
    if (s == sums.end()) return;
    if (!all_finite(s->second)) throw NumericalError("non-finite gradient sum");
    g = make_result(g.shape(), std::move(s->second), "grad_sum", {}, {}, true);
    sums.erase(s);
  };

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const TensorImpl* id = *it;
    if (!needed[id]) continue;
    const Node* node = handle[id]->grad_fn();
    if (!node) continue;
    auto g = grads.find(id);
    if (g == grads.end()) continue;
    settle(id, g->second);
    std::vector<bool> needs(node->inputs.size(), false);
    bool any = false;
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      const Tensor& in = node->inputs[i];
      needs[i] = in.requires_grad() && needed[in.id()];
      any = any || needs[i];
    }
    if (!any) continue;
    const Tensor upstream = g->second;
    if (!targets.count(id)) grads.erase(g);
    std::vector<Tensor> in_grads = node->backward(upstream, needs);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      if (!needs[i] || !in_grads[i].defined()) continue;
      const TensorImpl* in_id = node->inputs[i].id();
      auto existing = grads.find(in_id);
      if (existing == grads.end()) {
        grads.emplace(in_id, in_grads[i]);
      } else if (create_graph) {
        existing->second = add(existing->second, in_grads[i]);
      } else {
        if (existing->second.shape() != in_grads[i].shape()) throw ShapeError("gradient shape mismatch");
        const auto b = in_grads[i].data();
        auto s = sums.find(in_id);
        if (s == sums.end()) {
          const auto a = existing->second.data();
          Buffer sum(a.size());
          for (std::size_t k = 0; k < sum.size(); ++k) sum[k] = a[k] + b[k];
          sums.emplace(in_id, std::move(sum));
        } else {
          double* acc = s->second.data();
          for (std::size_t k = 0; k < b.size(); ++k) acc[k] += b[k];
        }
      }
    }
  }

  std::vector<Tensor> out;
  out.reserve(inputs.size());
  for (const auto& in : inputs) {
    auto g = grads.find(in.id());
    if (g != grads.end()) settle(in.id(), g->second);
    out.push_back(g != grads.end() ? g->second : Tensor::zeros(in.shape()));
  }
  return out;
}

GradMap grad(const Tensor& loss, const ParamSet& params, bool create_graph) {
  const auto tensors = params.tensors();
  const auto grads = grad(loss, tensors, create_graph);
  GradMap out;
  for (std::size_t i = 0; i < params.size(); ++i) out.add(params[i].name, grads[i]);
  return out;
}

ParamSet functional_sgd_step(const ParamSet& params, const GradMap& grads, double alpha) {
  if (!params.same_layout(grads)) throw ShapeError("functional_sgd_step: gradient keys/shapes do not match params");
  ParamSet out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    out.add(params[i].name, sub(params[i].value, scale(grads[i].value, alpha)));
  }
  return out;
}

}  // namespace mmc
