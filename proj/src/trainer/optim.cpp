#include <cmath>

#include "mmc/errors.hpp"
#include "mmc/trainer.hpp"

namespace mmc {

std::string_view optimizer_name(OptimizerKind kind) { return kind == OptimizerKind::adam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer: " + std::string(name));
}

Optimizer::Optimizer(OptimizerKind kind, AdamHyper hyper) : kind_(kind), hyper_(hyper) {}

ParamSet Optimizer::step(const ParamSet& params, const GradMap& grads, double lr) {
  if (!params.same_layout(grads)) throw ShapeError("optimizer: gradient layout does not match params");
  ++t_;
  if (kind_ == OptimizerKind::adam && m_.empty()) {
    for (const auto& e : params) {
      m_.emplace_back(e.value.size(), 0.0);
      v_.emplace_back(e.value.size(), 0.0);
    }
  }
  const double c1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(t_));
  ParamSet out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto p = params[i].value.data();
    const auto g = grads[i].value.data();
    std::vector<double> next(p.begin(), p.end());
    if (kind_ == OptimizerKind::sgd) {
      for (std::size_t k = 0; k < next.size(); ++k) next[k] -= lr * g[k];
    } else {
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < next.size(); ++k) {
        m[k] = hyper_.beta1 * m[k] + (1.0 - hyper_.beta1) * g[k];
        v[k] = hyper_.beta2 * v[k] + (1.0 - hyper_.beta2) * g[k] * g[k];
        next[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + hyper_.eps);
      }
    }
    out.add(params[i].name, Tensor::from_data(params[i].value.shape(), std::move(next)));
  }
  return out;
}

TrainConfig TrainConfig::full_scale() {
  TrainConfig c;
  c.total_epochs = 500;
  c.alpha_drop_epoch = 300;
  return c;
}

void validate(const TrainConfig& c) {
  const auto fail = [](const std::string& key, const std::string& why) { throw ConfigError(key + ": " + why); };
  if (!(c.alpha > 0)) fail("alpha", "must be > 0");
  // beta = 0 freezes the C-Net; used as an ablation.
  if (!(c.beta >= 0)) fail("beta", "must be >= 0");
  if (c.total_epochs < 1) fail("total_epochs", "must be >= 1");
  if (c.alpha_drop_epoch < 0 || c.alpha_drop_epoch > c.total_epochs) fail("alpha_drop_epoch", "must lie in [0, total_epochs]");
  if (!(c.alpha_drop_factor > 0)) fail("alpha_drop_factor", "must be > 0");
  if (c.batch_size < 1) fail("batch_size", "must be >= 1");
  if (c.meta_batch_size < 1) fail("meta_batch_size", "must be >= 1");
  if (!(c.adam.beta1 >= 0 && c.adam.beta1 < 1)) fail("adam_beta1", "must lie in [0, 1)");
  if (!(c.adam.beta2 >= 0 && c.adam.beta2 < 1)) fail("adam_beta2", "must lie in [0, 1)");
  if (!(c.adam.eps > 0)) fail("adam_eps", "must be > 0");
  if (c.seg.levels < 1 || c.seg.base_channels < 1 || c.seg.in_channels < 1) fail("seg", "levels, base_channels, in_channels must be >= 1");
  if (c.cnet_hidden < 1) fail("cnet_hidden", "must be >= 1");
  if (!(c.tau > 0 && c.tau < 1)) fail("tau", "must lie in (0, 1)");
  if (c.eval_batch_size < 1) fail("eval_batch_size", "must be >= 1");
  if (c.eval_every < 0) fail("eval_every", "must be >= 0");
  if (c.checkpoint_every < 0) fail("checkpoint_every", "must be >= 0");
  if (!(c.finetune_epoch_fraction > 0 && c.finetune_epoch_fraction <= 1)) fail("finetune_epoch_fraction", "must lie in (0, 1]");
  if (!(c.finetune_lr_factor > 0)) fail("finetune_lr_factor", "must be > 0");
}

double scheduled_alpha(const TrainConfig& cfg, int epoch) {
  return epoch >= cfg.alpha_drop_epoch ? cfg.alpha * cfg.alpha_drop_factor : cfg.alpha;
}

}  // namespace mmc
