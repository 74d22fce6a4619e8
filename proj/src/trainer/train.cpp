#include <chrono>
#include <cmath>
#include <fstream>

#include "mmc/errors.hpp"
#include "mmc/trainer.hpp"

namespace mmc {

namespace fs = std::filesystem;

std::string_view method_name(Method m) {
  switch (m) {
    case Method::mmc: return "mmc";
    case Method::noisy: return "noisy";
    case Method::clean: return "clean";
    case Method::finetune: return "finetune";
  }
  return "?";
}

Method parse_method(std::string_view name) {
  for (Method m : {Method::mmc, Method::noisy, Method::clean, Method::finetune})
    if (method_name(m) == name) return m;
  throw ConfigError("unknown method: " + std::string(name));
}

TrainerState init_state(const TrainConfig& cfg) {
  validate(cfg);
  TrainerState s{0,
                 0,
                 init_seg(cfg.seg, substream(cfg.seed, 1)),
                 init_cnet(cfg.cnet_variant, cfg.cnet_hidden, substream(cfg.seed, 2)),
                 Optimizer(cfg.main_optimizer, cfg.adam),
                 Optimizer(cfg.meta_optimizer, cfg.adam),
                 {}};
  return s;
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, int epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(substream(substream(seed, 3), static_cast<std::uint64_t>(epoch)));
  rng.shuffle(order.begin(), order.end());
  return order;
}

void write_history_csv(const fs::path& path, const std::vector<HistoryRow>& rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "epoch,split,dice,iou,loss,lr,wall_ms\n";
  for (const auto& r : rows) {
    out << r.epoch << ',' << r.split << ',' << (r.dice ? format_double(*r.dice) : "") << ','
        << (r.iou ? format_double(*r.iou) : "") << ',' << format_double(r.loss) << ',' << format_double(r.lr) << ','
        << format_double(r.wall_ms) << '\n';
  }
  if (!out) throw DataError("write failed: " + path.string());
}

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

void check_data(const TrainData& d, bool noisy_train) {
  if (d.train.empty()) throw DataError("train split is empty");
  if (d.meta.empty()) throw DataError("meta split is empty");
  if (d.test.empty()) throw DataError("test split is empty");
  if (d.meta.size() * 10 > d.train.size()) {
    throw ConfigError("meta split too large: m=" + std::to_string(d.meta.size()) + " exceeds M/10 with M=" +
                      std::to_string(d.train.size()));
  }
  if (noisy_train) {
    for (const auto& s : d.train)
      if (!s.noisy_mask) throw DataError("train sample " + s.id + " has no noisy mask");
  }
}

std::vector<const SamplePair*> gather(const std::vector<SamplePair>& split, const std::vector<std::size_t>& order,
                                      std::size_t start, std::size_t count) {
  std::vector<const SamplePair*> out;
  for (std::size_t i = start; i < std::min(order.size(), start + count); ++i) out.push_back(&split[order[i]]);
  return out;
}

// Sequential cycling through the meta split, reshuffled at each epoch.
class MetaCycler {
 public:
  MetaCycler(const std::vector<SamplePair>& split, std::uint64_t seed) : split_(split), seed_(seed) {}

  void start_epoch(int epoch) {
    order_.resize(split_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    Rng rng(substream(substream(seed_, 4), static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order_.begin(), order_.end());
    cursor_ = 0;
  }

  std::vector<const SamplePair*> next(std::size_t count) {
    std::vector<const SamplePair*> out;
    for (std::size_t k = 0; k < count; ++k) {
      out.push_back(&split_[order_[cursor_]]);
      cursor_ = (cursor_ + 1) % order_.size();
    }
    return out;
  }

 private:
  const std::vector<SamplePair>& split_;
  std::uint64_t seed_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

void save_state(const TrainerState& s, const fs::path& dir, const std::string& stem, bool with_theta) {
  fs::create_directories(dir);
  save_checkpoint(dir / (stem + ".seg.ckpt"), s.w.params);
  if (with_theta) save_checkpoint(dir / (stem + ".cnet.ckpt"), s.theta.params);
}

[[noreturn]] void diverged(const TrainerState& s, const TrainConfig& cfg, const Batch& b, const NumericalError& e) {
  std::string ids;
  for (const auto* p : b.samples) ids += (ids.empty() ? "" : " ") + p->id;
  std::string where = "no run_dir, nothing dumped";
  if (!cfg.run_dir.empty()) {
    const fs::path dir = cfg.run_dir / "divergence";
    save_state(s, dir, "last", true);
    TensorMap batch;
    batch.add("x", b.x);
    batch.add("y", b.y);
    save_checkpoint(dir / "batch.ckpt", batch);
    std::ofstream(dir / "batch_ids.txt") << ids << '\n';
    where = "state dumped to " + dir.string();
  }
  throw NumericalError("diverged at step " + std::to_string(s.t) + " (epoch " + std::to_string(s.epoch) +
                       ", batch " + ids + "): " + e.what() + "; " + where);
}

void evaluate_into(TrainerState& s, const TrainConfig& cfg, const TrainData& d, int epoch, double lr,
                   double wall_ms) {
  for (const auto& [name, split] : {std::pair<const char*, const std::vector<SamplePair>*>{"test", &d.test},
                                    {"meta", &d.meta}}) {
    const MetricsReport r = evaluate(s.w, *split, cfg.tau, cfg.eval_batch_size);
    s.history.push_back({epoch, name, r.mean_dice, r.mean_iou, r.mean_loss, lr, wall_ms});
  }
}

bool due(int every, int epoch, int last) { return every > 0 && ((epoch + 1) % every == 0 || epoch + 1 == last); }

// Epoch loop shared by every method. Returns false when max_steps stopped
// the run early.
bool run_epochs(TrainerState& s, const TrainConfig& cfg, const TrainData& d, Method method,
                const TrainHooks& hooks) {
  const bool mmc = method == Method::mmc;
  const MaskSource masks = method == Method::clean ? MaskSource::clean : MaskSource::noisy;
  MetaCycler meta(d.meta, cfg.seed);
  for (int epoch = s.epoch; epoch < cfg.total_epochs; ++epoch) {
    const double lr = scheduled_alpha(cfg, epoch);
    const auto order = epoch_order(cfg.seed, epoch, d.train.size());
    if (mmc) meta.start_epoch(epoch);
    const auto t0 = Clock::now();
    double loss_sum = 0;
    int steps = 0;
    bool stopped = false;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const Batch b = make_batch(gather(d.train, order, start, cfg.batch_size), masks);
      StepInfo info{s.t + 1, epoch, 0, std::nullopt};
      try {
        if (mmc) {
          // With beta = 0 theta never moves, so the second-order graph is skipped.
          const TempUpdate temp =
              cfg.beta > 0 ? temp_update(s.w, s.theta, b, lr, hooks.corrector) : forward_only(s.w, b);
          if (cfg.beta > 0) {
            const auto mb_samples = meta.next(cfg.meta_batch_size);
            const Batch mb = make_batch(mb_samples, MaskSource::clean);
            const Hypergradient hg = hypergradient(temp, cfg.seg, mb);
            s.theta = meta_update(s.theta, hg.grad, cfg.beta, s.meta_opt);
            info.meta_loss = hg.meta_loss;
          }
          info.loss = main_update(s, temp, b, lr, hooks.corrector).loss;
        } else {
          info.loss = supervised_step(s, b, lr);
        }
      } catch (const NumericalError& e) {
        diverged(s, cfg, b, e);
      }
      ++s.t;
      loss_sum += info.loss;
      ++steps;
      if (hooks.on_step) hooks.on_step(s, info);
      if (hooks.max_steps > 0 && s.t >= hooks.max_steps) {
        stopped = true;
        break;
      }
    }
    const double wall = ms_since(t0);
    s.history.push_back({epoch, "train", std::nullopt, std::nullopt, loss_sum / std::max(steps, 1), lr, wall});
    if (due(cfg.eval_every, epoch, cfg.total_epochs)) evaluate_into(s, cfg, d, epoch, lr, wall);
    s.epoch = epoch + 1;
    if (!cfg.run_dir.empty() && due(cfg.checkpoint_every, epoch, cfg.total_epochs)) {
      char stem[32];
      std::snprintf(stem, sizeof stem, "epoch_%04d", epoch + 1);
      save_state(s, cfg.run_dir / "checkpoints", stem, mmc);
    }
    if (stopped) return false;
  }
  return true;
}

}  // namespace

TrainerState mmc_train(const TrainConfig& cfg, const TrainData& data, const TrainHooks& hooks) {
  check_data(data, true);
  TrainerState s = init_state(cfg);
  run_epochs(s, cfg, data, Method::mmc, hooks);
  return s;
}

TrainerState baseline_train(const TrainConfig& cfg, const TrainData& data, Method mode, const TrainHooks& hooks) {
  if (mode == Method::mmc) throw std::invalid_argument("baseline_train: use mmc_train for the mmc method");
  if (hooks.corrector) throw std::invalid_argument("baseline_train: correctors apply to mmc only");
  check_data(data, mode != Method::clean);
  TrainerState s = init_state(cfg);
  const bool finished = run_epochs(s, cfg, data, mode, hooks);
  if (mode == Method::finetune && finished) finetune_phase(s, cfg, data);
  return s;
}

void finetune_phase(TrainerState& s, const TrainConfig& cfg, const TrainData& d) {
  check_data(d, false);
  const int epochs = std::max(1, static_cast<int>(std::lround(cfg.finetune_epoch_fraction * cfg.total_epochs)));
  const double lr = cfg.finetune_lr_factor * cfg.alpha;
  s.main_opt = Optimizer(cfg.main_optimizer, cfg.adam);
  const int first = s.epoch, last = first + epochs;
  for (int epoch = first; epoch < last; ++epoch) {
    const auto order = epoch_order(cfg.seed, epoch, d.meta.size());
    const auto t0 = Clock::now();
    double loss_sum = 0;
    int steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const Batch b = make_batch(gather(d.meta, order, start, cfg.batch_size), MaskSource::clean);
      try {
        loss_sum += supervised_step(s, b, lr);
      } catch (const NumericalError& e) {
        diverged(s, cfg, b, e);
      }
      ++s.t;
      ++steps;
    }
    const double wall = ms_since(t0);
    s.history.push_back({epoch, "finetune", std::nullopt, std::nullopt, loss_sum / steps, lr, wall});
    if (cfg.eval_every > 0 && ((epoch + 1 - first) % cfg.eval_every == 0 || epoch + 1 == last))
      evaluate_into(s, cfg, d, epoch, lr, wall);
    s.epoch = epoch + 1;
  }
  if (!cfg.run_dir.empty() && cfg.checkpoint_every > 0) save_state(s, cfg.run_dir / "checkpoints", "finetuned", false);
}

MetricsReport final_report(const TrainerState& state, const TrainConfig& cfg, const std::vector<SamplePair>& split,
                           const std::string& method, const std::string& noise, double proportion,
                           const std::string& split_name) {
  MetricsReport r = evaluate(state.w, split, cfg.tau, cfg.eval_batch_size);
  r.method = method;
  r.noise = noise;
  r.proportion = proportion;
  r.seed = cfg.seed;
  r.split = split_name;
  return r;
}

}  // namespace mmc
