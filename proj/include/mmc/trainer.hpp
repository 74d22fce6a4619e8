#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmc/data.hpp"
#include "mmc/metrics.hpp"
#include "mmc/nets.hpp"

namespace mmc {

enum class OptimizerKind { sgd, adam };
std::string_view optimizer_name(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view name);

struct AdamHyper {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

// Persistent optimizer over one parameter set. Adam keeps per-coordinate
// moment buffers and applies the usual bias correction.
class Optimizer {
 public:
  explicit Optimizer(OptimizerKind kind = OptimizerKind::sgd, AdamHyper hyper = {});

  // Returns updated params as plain (non-grad) tensors.
  ParamSet step(const ParamSet& params, const GradMap& grads, double lr);

  OptimizerKind kind() const { return kind_; }
  long steps() const { return t_; }
  const std::vector<std::vector<double>>& first_moment() const { return m_; }
  const std::vector<std::vector<double>>& second_moment() const { return v_; }

 private:
  OptimizerKind kind_;
  AdamHyper hyper_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct TrainConfig {
  double alpha = 1e-3;
  // Desk-scale default keeps the drop point at 60% of the run.
  int alpha_drop_epoch = 36;
  double alpha_drop_factor = 0.1;
  int total_epochs = 60;
  double beta = 1e-4;
  int batch_size = 8;
  int meta_batch_size = 8;
  std::uint64_t seed = 0;
  OptimizerKind main_optimizer = OptimizerKind::sgd;
  OptimizerKind meta_optimizer = OptimizerKind::adam;
  AdamHyper adam;

  SegConfig seg;
  CNetVariant cnet_variant = CNetVariant::k3k1;
  int cnet_hidden = 8;

  double tau = 0.5;
  int eval_batch_size = 16;
  // Evaluate test and meta splits every this many epochs (and after the
  // last); 0 disables evaluation.
  int eval_every = 1;
  // Checkpoints every this many epochs plus the final one; needs run_dir.
  int checkpoint_every = 10;
  std::filesystem::path run_dir;

  // Fine-tuning phase of the finetune baseline.
  double finetune_epoch_fraction = 0.1;
  double finetune_lr_factor = 0.1;

  // Full-length schedule: 500 epochs, drop at 300.
  static TrainConfig full_scale();
};

void validate(const TrainConfig& cfg);

// Main learning rate in effect during `epoch` (0-based).
double scheduled_alpha(const TrainConfig& cfg, int epoch);

struct HistoryRow {
  int epoch = 0;
  std::string split;
  std::optional<double> dice, iou;
  double loss = 0;
  double lr = 0;
  double wall_ms = 0;
};

void write_history_csv(const std::filesystem::path& path, const std::vector<HistoryRow>& rows);

struct TrainerState {
  long t = 0;
  int epoch = 0;
  SegParams w;
  MetaParams theta;
  Optimizer main_opt;
  Optimizer meta_opt;
  std::vector<HistoryRow> history;
};

// W from substream(seed, 1), theta from substream(seed, 2).
TrainerState init_state(const TrainConfig& cfg);

// Images [N,C,H,W] and masks [N,1,H,W]; `samples` is optional provenance for
// correctors and divergence dumps.
struct Batch {
  Tensor x, y;
  std::vector<const SamplePair*> samples;
};
Batch make_batch(std::span<const SamplePair* const> samples, MaskSource masks);

// Replaces the C-Net output inside the MMC step when set.
using Corrector = std::function<Tensor(const Tensor& logits, const Tensor& noisy_mask, const Batch& batch)>;

// One differentiable SGD step of W on the corrected-mask loss.
struct TempUpdate {
  ParamSet w_leaves;      // grad-requiring copies of W
  ParamSet theta_leaves;  // grad-requiring copies of theta
  Tensor logits;          // f_W(x), graph attached to w_leaves
  Tensor corrected;       // g_theta(logits, y'), not detached
  Tensor loss;            // L_t
  ParamSet w_prime;       // W - alpha * dL_t/dW, differentiable in theta
};
TempUpdate temp_update(const SegParams& w, const MetaParams& theta, const Batch& noisy, double alpha,
                       const Corrector& corrector = {});

// Logits and W leaves only, for a main_update with no meta step before it.
TempUpdate forward_only(const SegParams& w, const Batch& noisy);

// Meta loss at W' and its gradient w.r.t. theta by double backward.
struct Hypergradient {
  double meta_loss = 0;
  GradMap grad;
};
Hypergradient hypergradient(const TempUpdate& temp, const SegConfig& seg, const Batch& meta);

// Applies the hypergradient with `opt`; beta == 0 returns theta unchanged.
MetaParams meta_update(const MetaParams& theta, const GradMap& hypergrad, double beta, Optimizer& opt);

// A one-step bi-level problem: the inner loss drives one SGD step of W, the
// outer loss scores the stepped weights.
struct BilevelProblem {
  std::function<Tensor(const ParamSet& w, const ParamSet& theta)> inner;
  std::function<Tensor(const ParamSet& w_prime)> outer;
};

// The MMC instance: inner = BCE(f_W(x), g_theta(f_W(x), y')), outer =
// BCE(f_W'(x_meta), y_meta).
BilevelProblem mmc_problem(const SegConfig& seg, CNetVariant variant, const Batch& noisy, const Batch& meta);

// Exact hypergradient of any problem by double backward.
Hypergradient hypergradient(const BilevelProblem& problem, const ParamSet& w, const ParamSet& theta, double alpha);

// Outer loss after the step, computed with first-order gradients only.
double outer_after_step(const BilevelProblem& problem, const ParamSet& w, const ParamSet& theta, double alpha);

// Finite-difference oracle: central differences of outer_after_step in
// theta, each evaluation redoing the inner step from scratch. `coords` lists
// (tensor index, flat index) pairs.
struct FdCoord {
  std::size_t tensor = 0, index = 0;
};
GradMap hypergrad_fd(const BilevelProblem& problem, const ParamSet& w, const ParamSet& theta, double alpha,
                     double epsilon = 1e-4);
std::vector<double> hypergrad_fd(const BilevelProblem& problem, const ParamSet& w, const ParamSet& theta,
                                 double alpha, double epsilon, std::span<const FdCoord> coords);

// W step on the loss against the corrected mask recomputed with the
// current theta and detached. Reuses the logits and W leaves of `temp`.
struct MainStep {
  double loss = 0;
  Tensor target;  // detached corrected mask
  GradMap grad;
};
MainStep main_update(TrainerState& state, const TempUpdate& temp, const Batch& noisy, double lr,
                     const Corrector& corrector = {});

// Plain supervised step on (x, y).
double supervised_step(TrainerState& state, const Batch& batch, double lr);

struct TrainData {
  const std::vector<SamplePair>& train;
  const std::vector<SamplePair>& meta;
  const std::vector<SamplePair>& test;
};

struct StepInfo {
  long t = 0;
  int epoch = 0;
  double loss = 0;
  std::optional<double> meta_loss;
};

struct TrainHooks {
  Corrector corrector;
  // Called after every step with the updated state.
  std::function<void(const TrainerState&, const StepInfo&)> on_step;
  // Stop after this many steps (0 = run all epochs).
  long max_steps = 0;
};

enum class Method { mmc, noisy, clean, finetune };
std::string_view method_name(Method m);
Method parse_method(std::string_view name);

// Batch order for an epoch, shared by every method; drawn from
// substream(substream(seed, 3), epoch). Meta batches use stream 4 likewise.
std::vector<std::size_t> epoch_order(std::uint64_t seed, int epoch, std::size_t n);

TrainerState mmc_train(const TrainConfig& cfg, const TrainData& data, const TrainHooks& hooks = {});
TrainerState baseline_train(const TrainConfig& cfg, const TrainData& data, Method mode,
                            const TrainHooks& hooks = {});
// The fine-tuning phase alone, applied to a finished noisy run.
void finetune_phase(TrainerState& state, const TrainConfig& cfg, const TrainData& data);

// Test-split report of a state, labelled with experiment metadata.
MetricsReport final_report(const TrainerState& state, const TrainConfig& cfg, const std::vector<SamplePair>& split,
                           const std::string& method, const std::string& noise, double proportion,
                           const std::string& split_name);

}  // namespace mmc
