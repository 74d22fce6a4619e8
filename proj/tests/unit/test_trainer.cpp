#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "../support/fixtures.hpp"
#include "mmc/errors.hpp"
#include "mmc/trainer.hpp"

using namespace mmc;
using namespace mmc::testing;

namespace {

std::vector<SamplePair> tiny_split(int n, int size, std::uint64_t seed, bool noisy) {
  SynthConfig cfg;
  cfg.rows = cfg.cols = size;
  cfg.nuclei_min = 1;
  cfg.nuclei_max = 3;
  cfg.radius_min = 2;
  cfg.radius_max = 4;
  std::vector<SamplePair> out;
  for (int i = 0; i < n; ++i) {
    Rng rng(substream(seed, i));
    out.push_back(synth_sample(cfg, rng));
    out.back().id = "s" + std::to_string(i);
  }
  if (noisy) {
    NoiseSpec spec;
    spec.kind = NoiseKind::dilation;
    spec.dilation_max = 2;
    spec.seed = seed + 77;
    corrupt_split(out, spec);
  }
  return out;
}

std::vector<const SamplePair*> ptrs(const std::vector<SamplePair>& v, std::size_t n) {
  std::vector<const SamplePair*> out;
  for (std::size_t i = 0; i < std::min(n, v.size()); ++i) out.push_back(&v[i]);
  return out;
}

ParamSet scalars(std::initializer_list<std::pair<const char*, double>> kv) {
  ParamSet p;
  for (auto [k, v] : kv) p.add(k, Tensor::scalar(v));
  return p;
}

// L(W, theta) = 1/2 (W - theta)^2 and L'(W') = 1/2 W'^2.
BilevelProblem quadratic_toy() {
  return {[](const ParamSet& w, const ParamSet& th) {
            const Tensor d = sub(w.at("w"), th.at("theta"));
            return scale(mul(d, d), 0.5);
          },
          [](const ParamSet& wp) { return scale(mul(wp.at("w"), wp.at("w")), 0.5); }};
}

// Smooth, non-quadratic: logistic inner fit with theta-dependent targets.
BilevelProblem smooth_toy() {
  const Tensor x = Tensor::from_data({3}, {0.7, -1.3, 0.4});
  const Tensor x2 = Tensor::from_data({3}, {-0.2, 0.9, 1.5});
  const Tensor t = Tensor::from_data({3}, {1, 0, 1});
  return {[x](const ParamSet& w, const ParamSet& th) {
            return bce_with_logits(mul(w.at("w"), x), sigmoid(mul(th.at("theta"), x)));
          },
          [x2, t](const ParamSet& wp) { return bce_with_logits(mul(wp.at("w"), x2), t); }};
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::vector<double> flat(const GradMap& g) {
  std::vector<double> out;
  for (const auto& e : g) out.insert(out.end(), e.value.data().begin(), e.value.data().end());
  return out;
}

struct Agreement {
  double cosine, rel_l2;
};

Agreement agree(const std::vector<double>& exact, const std::vector<double>& fd) {
  std::vector<double> diff(exact.size());
  for (std::size_t i = 0; i < exact.size(); ++i) diff[i] = exact[i] - fd[i];
  return {dot(exact, fd) / std::sqrt(dot(exact, exact) * dot(fd, fd)), std::sqrt(dot(diff, diff) / dot(fd, fd))};
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.seg = {1, 2, 1};
  c.cnet_hidden = 2;
  c.total_epochs = 3;
  c.alpha_drop_epoch = 2;
  c.alpha = 0.05;
  c.beta = 1e-3;
  c.batch_size = 4;
  c.meta_batch_size = 2;
  c.eval_every = 1;
  c.checkpoint_every = 0;
  return c;
}

bool same_values(const ParamSet& a, const ParamSet& b) {
  if (!a.same_layout(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto x = a[i].value.data(), y = b[i].value.data();
    if (!std::equal(x.begin(), x.end(), y.begin())) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("sgd step is p - lr * g") {
  Optimizer opt(OptimizerKind::sgd);
  const ParamSet p = scalars({{"a", 1.0}, {"b", -2.0}});
  const GradMap g = scalars({{"a", 0.5}, {"b", 4.0}});
  const ParamSet q = opt.step(p, g, 0.1);
  CHECK(q.at("a").item() == doctest::Approx(0.95).epsilon(1e-15));
  CHECK(q.at("b").item() == doctest::Approx(-2.4).epsilon(1e-15));
  CHECK_FALSE(q.at("a").requires_grad());
}

TEST_CASE("adam matches a scalar reference over several steps") {
  AdamHyper h;
  Optimizer opt(OptimizerKind::adam, h);
  ParamSet p = scalars({{"a", 0.3}});
  double ref = 0.3, m = 0, v = 0;
  const double grads[] = {1.0, -0.5, 2.0, 0.1, -3.0};
  for (int t = 1; t <= 5; ++t) {
    const double g = grads[t - 1];
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    ref -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    p = opt.step(p, scalars({{"a", g}}), 0.01);
    CHECK(p.at("a").item() == doctest::Approx(ref).epsilon(1e-14));
  }
  CHECK(opt.steps() == 5);
  REQUIRE(opt.first_moment().size() == 1);
  CHECK(opt.first_moment()[0].size() == 1);
  // The first Adam step moves each coordinate by almost exactly lr.
  Optimizer fresh(OptimizerKind::adam);
  const ParamSet q = fresh.step(scalars({{"a", 0.0}}), scalars({{"a", -123.0}}), 0.01);
  CHECK(q.at("a").item() == doctest::Approx(0.01).epsilon(1e-9));
}

TEST_CASE("optimizer rejects mismatched gradients") {
  Optimizer opt;
  CHECK_THROWS_AS(opt.step(scalars({{"a", 1}}), scalars({{"b", 1}}), 0.1), ShapeError);
}

TEST_CASE("learning rate drops by 0.1 at epoch 300 at full scale") {
  const TrainConfig c = TrainConfig::full_scale();
  CHECK(c.total_epochs == 500);
  CHECK(scheduled_alpha(c, 0) == 1e-3);
  CHECK(scheduled_alpha(c, 299) == 1e-3);
  CHECK(scheduled_alpha(c, 300) == doctest::Approx(1e-4).epsilon(1e-15));
  CHECK(scheduled_alpha(c, 499) == doctest::Approx(1e-4).epsilon(1e-15));
  TrainConfig d;
  CHECK(scheduled_alpha(d, d.alpha_drop_epoch - 1) == d.alpha);
  CHECK(scheduled_alpha(d, d.alpha_drop_epoch) == doctest::Approx(0.1 * d.alpha));
}

TEST_CASE("config validation names the offending key") {
  const auto message = [](TrainConfig c) -> std::string {
    try {
      validate(c);
    } catch (const ConfigError& e) {
      return e.what();
    }
    return "";
  };
  CHECK(message(TrainConfig{}) == "");
  CHECK(message(TrainConfig::full_scale()) == "");
  TrainConfig c;
  c.alpha = 0;
  CHECK(message(c).find("alpha") == 0);
  c = {};
  c.beta = -1e-4;
  CHECK(message(c).find("beta") == 0);
  c = {};
  c.alpha_drop_epoch = c.total_epochs + 1;
  CHECK(message(c).find("alpha_drop_epoch") == 0);
  c = {};
  c.tau = 1.0;
  CHECK(message(c).find("tau") == 0);
  c = {};
  c.batch_size = 0;
  CHECK(message(c).find("batch_size") == 0);
}

TEST_CASE("quadratic toy: W' = 0.9 and hypergradient 0.09") {
  const BilevelProblem toy = quadratic_toy();
  const ParamSet w = scalars({{"w", 1.0}}), theta = scalars({{"theta", 0.0}});
  const double alpha = 0.1;
  const double closed = alpha * (1.0 - alpha * (1.0 - 0.0));
  CHECK(closed == doctest::Approx(0.09).epsilon(1e-15));
  CHECK(outer_after_step(toy, w, theta, alpha) == doctest::Approx(0.5 * 0.81).epsilon(1e-14));
  const Hypergradient exact = hypergradient(toy, w, theta, alpha);
  CHECK(std::abs(exact.grad.at("theta").item() - closed) <= 1e-10);
  const GradMap fd = hypergrad_fd(toy, w, theta, alpha);
  CHECK(std::abs(fd.at("theta").item() - closed) <= 1e-6);

  // Same closed form across other points.
  for (double W : {-2.0, 0.5, 3.0})
    for (double th : {-1.0, 0.25})
      for (double a : {0.01, 0.3}) {
        const double want = a * (W - a * (W - th));
        const double got = hypergradient(toy, scalars({{"w", W}}), scalars({{"theta", th}}), a).grad.at("theta").item();
        CHECK(std::abs(got - want) <= 1e-10);
      }
}

TEST_CASE("alpha = 0 leaves W unchanged and zeroes both hypergradients") {
  const auto train = tiny_split(4, 8, 1, true);
  const auto meta = tiny_split(2, 8, 2, false);
  const SegParams w = init_seg({1, 2, 1}, 3);
  const MetaParams theta = init_cnet(CNetVariant::k3k1, 2, 4);
  const Batch nb = make_batch(ptrs(train, 4), MaskSource::noisy);
  const Batch mb = make_batch(ptrs(meta, 2), MaskSource::clean);
  const TempUpdate temp = temp_update(w, theta, nb, 0.0);
  CHECK(same_values(temp.w_prime, w.params));
  for (const auto& e : hypergradient(temp, w.config, mb).grad)
    for (double v : e.value.data()) CHECK(v == 0.0);
  const BilevelProblem p = mmc_problem(w.config, theta.variant, nb, mb);
  for (const auto& e : hypergrad_fd(p, w.params, theta.params, 0.0))
    for (double v : e.value.data()) CHECK(v == 0.0);
}

TEST_CASE("zero theta and zero logits give L_t = ln 2") {
  const auto train = tiny_split(3, 8, 5, true);
  const SegParams w = zero_like(init_seg({2, 2, 1}, 1));
  MetaParams theta = init_cnet(CNetVariant::k3k3k1, 4, 2);
  ParamSet zero;
  for (const auto& e : theta.params) zero.add(e.name, Tensor::zeros(e.value.shape()));
  theta.params = zero;
  const TempUpdate temp = temp_update(w, theta, make_batch(ptrs(train, 3), MaskSource::noisy), 1e-3);
  for (double v : temp.corrected.data()) CHECK(v == 0.5);
  CHECK(temp.loss.item() == doctest::Approx(std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("corrected mask stays attached to theta in the temporary step") {
  const auto train = tiny_split(2, 8, 6, true);
  const TempUpdate temp =
      temp_update(init_seg({1, 2, 1}, 1), init_cnet(CNetVariant::k3k1, 2, 2), make_batch(ptrs(train, 2), MaskSource::noisy), 0.1);
  CHECK(temp.corrected.requires_grad());
  for (const auto& e : temp.w_prime) CHECK(e.value.requires_grad());
  for (const auto& e : temp.theta_leaves) CHECK(e.value.requires_grad());
}

TEST_CASE("tiny net: exact hypergradient matches finite differences") {
  const TrainConfig c = tiny_config();
  CHECK(seg_param_count(c.seg) + init_cnet(c.cnet_variant, c.cnet_hidden, 0).params.scalar_count() <= 200);
  const auto train = tiny_split(4, 8, 11, true);
  const auto meta = tiny_split(3, 8, 12, false);
  const Batch nb = make_batch(ptrs(train, 4), MaskSource::noisy);
  const Batch mb = make_batch(ptrs(meta, 3), MaskSource::clean);
  for (std::uint64_t seed : {1, 2, 3}) {
    CAPTURE(seed);
    const SegParams w = init_seg(c.seg, seed);
    MetaParams theta = init_cnet(c.cnet_variant, c.cnet_hidden, seed + 10);
    // Move theta off the pass-through init so every coordinate matters.
    Rng rng(seed);
    ParamSet jittered;
    for (const auto& e : theta.params) {
      std::vector<double> v(e.value.data().begin(), e.value.data().end());
      for (double& x : v) x += 0.3 * rng.normal();
      jittered.add(e.name, Tensor::from_data(e.value.shape(), std::move(v)));
    }
    theta.params = jittered;
    const double alpha = 0.5;
    const TempUpdate temp = temp_update(w, theta, nb, alpha);
    const auto exact = flat(hypergradient(temp, c.seg, mb).grad);
    const BilevelProblem p = mmc_problem(c.seg, theta.variant, nb, mb);
    const auto generic = flat(hypergradient(p, w.params, theta.params, alpha).grad);
    for (std::size_t i = 0; i < exact.size(); ++i) CHECK(generic[i] == doctest::Approx(exact[i]).epsilon(1e-12));
    const auto fd = flat(hypergrad_fd(p, w.params, theta.params, alpha, 1e-5));
    const Agreement a = agree(exact, fd);
    CHECK(a.cosine >= 0.999);
    CHECK(a.rel_l2 <= 1e-3);
  }
}

TEST_CASE("central differences converge at second order") {
  const BilevelProblem toy = smooth_toy();
  ParamSet w, theta;
  w.add("w", Tensor::from_data({3}, {0.8, -0.4, 1.1}));
  theta.add("theta", Tensor::from_data({3}, {-0.6, 0.9, 0.3}));
  const double alpha = 0.7;
  const auto exact = flat(hypergradient(toy, w, theta, alpha).grad);
  std::vector<double> errors;
  for (double eps : {0.2, 0.1, 0.05, 0.025}) {
    const auto fd = flat(hypergrad_fd(toy, w, theta, alpha, eps));
    double e = 0;
    for (std::size_t i = 0; i < fd.size(); ++i) e += (fd[i] - exact[i]) * (fd[i] - exact[i]);
    errors.push_back(std::sqrt(e));
  }
  for (std::size_t i = 1; i < errors.size(); ++i) {
    const double order = std::log2(errors[i - 1] / errors[i]);
    CAPTURE(order);
    CHECK(order > 1.8);
    CHECK(order < 2.2);
  }
  CHECK_THROWS_AS(hypergrad_fd(toy, w, theta, alpha, 0.0), std::invalid_argument);
}

TEST_CASE("beta = 0 returns theta unchanged") {
  const MetaParams theta = init_cnet(CNetVariant::k3k5k1, 3, 9);
  GradMap g;
  for (const auto& e : theta.params) g.add(e.name, Tensor::full(e.value.shape(), 1.0));
  Optimizer opt(OptimizerKind::adam);
  const MetaParams next = meta_update(theta, g, 0.0, opt);
  CHECK(same_values(next.params, theta.params));
  CHECK(opt.steps() == 0);
}

TEST_CASE("convex toy: one meta step decreases the outer loss") {
  const BilevelProblem toy = quadratic_toy();
  const ParamSet w = scalars({{"w", 1.0}});
  for (OptimizerKind kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
    MetaParams theta;
    theta.params = scalars({{"theta", 0.0}});
    Optimizer opt(kind);
    const double before = outer_after_step(toy, w, theta.params, 0.1);
    const Hypergradient hg = hypergradient(toy, w, theta.params, 0.1);
    const MetaParams next = meta_update(theta, hg.grad, 1e-3, opt);
    CHECK(outer_after_step(toy, w, next.params, 0.1) < before);
  }
}

TEST_CASE("adam meta steps with small beta rarely increase the frozen-batch outer loss") {
  const auto train = tiny_split(16, 8, 21, true);
  const auto meta = tiny_split(4, 8, 22, false);
  const TrainConfig c = tiny_config();
  TrainerState s = init_state(c);
  int checked = 0, non_increasing = 0;
  for (int step = 0; step < 20; ++step) {
    std::vector<const SamplePair*> nb_s, mb_s;
    for (int k = 0; k < 4; ++k) nb_s.push_back(&train[(4 * step + k) % train.size()]);
    for (int k = 0; k < 2; ++k) mb_s.push_back(&meta[(2 * step + k) % meta.size()]);
    const Batch nb = make_batch(nb_s, MaskSource::noisy), mb = make_batch(mb_s, MaskSource::clean);
    const BilevelProblem p = mmc_problem(c.seg, s.theta.variant, nb, mb);
    const double before = outer_after_step(p, s.w.params, s.theta.params, c.alpha);
    const TempUpdate temp = temp_update(s.w, s.theta, nb, c.alpha);
    s.theta = meta_update(s.theta, hypergradient(temp, c.seg, mb).grad, 1e-5, s.meta_opt);
    non_increasing += outer_after_step(p, s.w.params, s.theta.params, c.alpha) <= before;
    ++checked;
    main_update(s, temp, nb, c.alpha);
  }
  CHECK(non_increasing >= 0.9 * checked);
}

TEST_CASE("main update target is detached from theta") {
  const auto train = tiny_split(4, 8, 31, true);
  const TrainConfig c = tiny_config();
  TrainerState s = init_state(c);
  const Batch nb = make_batch(ptrs(train, 4), MaskSource::noisy);
  const TempUpdate temp = temp_update(s.w, s.theta, nb, c.alpha);
  const MainStep m = main_update(s, temp, nb, c.alpha);
  CHECK_FALSE(m.target.requires_grad());
  CHECK(m.target.grad_fn() == nullptr);
  GradModeGuard on(true);
  const Tensor loss = bce_with_logits(temp.logits, m.target);
  for (const auto& e : grad(loss, temp.theta_leaves, false))
    for (double v : e.value.data()) CHECK(v == 0.0);
  CHECK(loss.item() == doctest::Approx(m.loss).epsilon(1e-15));
}

TEST_CASE("main update uses the freshly updated theta") {
  const auto train = tiny_split(4, 8, 32, true);
  const auto meta = tiny_split(2, 8, 33, false);
  TrainConfig c = tiny_config();
  TrainerState s = init_state(c);
  const Batch nb = make_batch(ptrs(train, 4), MaskSource::noisy);
  const Batch mb = make_batch(ptrs(meta, 2), MaskSource::clean);
  const TempUpdate temp = temp_update(s.w, s.theta, nb, c.alpha);
  s.theta = meta_update(s.theta, hypergradient(temp, c.seg, mb).grad, 0.1, s.meta_opt);
  const MainStep m = main_update(s, temp, nb, c.alpha);
  NoGradGuard off;
  const Tensor want = cnet_forward(s.theta, temp.logits.detach(), nb.y);
  CHECK(std::equal(want.data().begin(), want.data().end(), m.target.data().begin()));
}

TEST_CASE("main update overfits four samples") {
  const auto train = tiny_split(4, 8, 41, true);
  TrainConfig c;
  c.seg = {2, 8, 1};
  c.main_optimizer = OptimizerKind::adam;
  TrainerState s = init_state(c);
  const Batch nb = make_batch(ptrs(train, 4), MaskSource::noisy);
  // Binary targets so the loss floor is zero.
  const Corrector truth = [](const Tensor&, const Tensor&, const Batch& b) {
    return mask_batch(b.samples, MaskSource::clean);
  };
  double first = 0, last = 0;
  for (int step = 0; step < 50; ++step) {
    const TempUpdate temp = forward_only(s.w, nb);
    last = main_update(s, temp, nb, 1e-2, truth).loss;
    if (step == 0) first = last;
  }
  CAPTURE(first);
  CAPTURE(last);
  CHECK(last < 0.1 * first);
}

TEST_CASE("epoch order is a permutation shared by seed and epoch") {
  const auto a = epoch_order(5, 3, 40), b = epoch_order(5, 3, 40), c = epoch_order(5, 4, 40);
  CHECK(a == b);
  CHECK(a != c);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);
}

TEST_CASE("oracle corrector reduces mmc to clean training bit for bit") {
  const auto train = tiny_split(40, 8, 51, true);
  const auto meta = tiny_split(4, 8, 52, false);
  const auto test = tiny_split(4, 8, 53, false);
  const TrainData d{train, meta, test};
  TrainConfig c = tiny_config();
  c.eval_every = 0;
  TrainHooks oracle;
  oracle.corrector = [](const Tensor&, const Tensor&, const Batch& b) {
    return mask_batch(b.samples, MaskSource::clean);
  };
  oracle.max_steps = 20;
  TrainHooks plain;
  plain.max_steps = 20;
  for (OptimizerKind kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
    c.main_optimizer = kind;
    const TrainerState a = mmc_train(c, d, oracle);
    const TrainerState b = baseline_train(c, d, Method::clean, plain);
    CHECK(a.t == 20);
    CHECK(same_values(a.w.params, b.w.params));
  }
}

TEST_CASE("clean and noisy modes agree on noiseless data") {
  auto train = tiny_split(20, 8, 61, false);
  for (auto& s : train) s.noisy_mask = s.clean_mask;
  const auto meta = tiny_split(2, 8, 62, false);
  const auto test = tiny_split(3, 8, 63, false);
  const TrainData d{train, meta, test};
  const TrainConfig c = tiny_config();
  const TrainerState a = baseline_train(c, d, Method::clean);
  const TrainerState b = baseline_train(c, d, Method::noisy);
  CHECK(same_values(a.w.params, b.w.params));
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) CHECK(a.history[i].dice == b.history[i].dice);
}

TEST_CASE("mmc training is deterministic and keeps a complete history") {
  const auto train = tiny_split(20, 8, 71, true);
  const auto meta = tiny_split(2, 8, 72, false);
  const auto test = tiny_split(3, 8, 73, false);
  const TrainData d{train, meta, test};
  const TrainConfig c = tiny_config();
  std::vector<long> steps;
  TrainHooks hooks;
  hooks.on_step = [&](const TrainerState& s, const StepInfo& info) {
    CHECK(info.t == s.t);
    CHECK(info.meta_loss.has_value());
    steps.push_back(s.t);
  };
  const TrainerState a = mmc_train(c, d, hooks);
  const TrainerState b = mmc_train(c, d);
  CHECK(same_values(a.w.params, b.w.params));
  CHECK(same_values(a.theta.params, b.theta.params));
  CHECK(a.t == 3 * 5);
  CHECK(std::is_sorted(steps.begin(), steps.end()));
  REQUIRE(a.history.size() == 9);
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].split == b.history[i].split);
    CHECK(a.history[i].dice == b.history[i].dice);
  }
  CHECK(a.history[0].split == "train");
  CHECK_FALSE(a.history[0].dice.has_value());
  CHECK(a.history[1].split == "test");
  CHECK(a.history[2].split == "meta");
  CHECK(a.history[6].lr == doctest::Approx(0.1 * c.alpha));
  // Adam buffers follow the C-Net layout.
  REQUIRE(a.meta_opt.first_moment().size() == a.theta.params.size());
  for (std::size_t i = 0; i < a.theta.params.size(); ++i)
    CHECK(a.meta_opt.first_moment()[i].size() == a.theta.params[i].value.size());
}

TEST_CASE("beta = 0 keeps theta at its initial value") {
  const auto train = tiny_split(20, 8, 74, true);
  const auto meta = tiny_split(2, 8, 75, false);
  const auto test = tiny_split(3, 8, 76, false);
  TrainConfig c = tiny_config();
  c.beta = 0;
  const TrainerState s = mmc_train(c, {train, meta, test});
  CHECK(same_values(s.theta.params, init_state(c).theta.params));
  CHECK(s.meta_opt.steps() == 0);
}

TEST_CASE("data checks: empty splits and an oversized meta set") {
  const auto train = tiny_split(20, 8, 81, true);
  const auto meta = tiny_split(3, 8, 82, false);
  const auto test = tiny_split(2, 8, 83, false);
  const std::vector<SamplePair> none;
  const TrainConfig c = tiny_config();
  CHECK_THROWS_AS(mmc_train(c, {none, meta, test}), DataError);
  CHECK_THROWS_AS(mmc_train(c, {train, none, test}), DataError);
  CHECK_THROWS_AS(mmc_train(c, {train, meta, none}), DataError);
  CHECK_THROWS_AS(mmc_train(c, {train, meta, test}), ConfigError);  // 3 > 20 / 10
  auto clean_only = tiny_split(30, 8, 84, false);
  CHECK_THROWS_AS(mmc_train(c, {clean_only, meta, test}), DataError);
  CHECK_NOTHROW(baseline_train(c, {clean_only, meta, test}, Method::clean));
  CHECK_THROWS_AS(baseline_train(c, {clean_only, meta, test}, Method::mmc), std::invalid_argument);
}

TEST_CASE("finetune improves meta dice over its pre-finetune state") {
  const auto train = tiny_split(60, 16, 91, true);
  const auto meta = tiny_split(6, 16, 92, false);
  const auto test = tiny_split(4, 16, 93, false);
  const TrainData d{train, meta, test};
  TrainConfig c;
  c.seg = {2, 8, 1};
  c.total_epochs = 10;
  c.alpha_drop_epoch = 10;
  c.alpha = 3e-2;
  c.main_optimizer = OptimizerKind::adam;
  c.eval_every = 10;
  c.finetune_epoch_fraction = 0.5;
  c.finetune_lr_factor = 0.3;
  const TrainerState s = baseline_train(c, d, Method::finetune);
  std::optional<double> before, after;
  int finetune_rows = 0;
  for (const auto& r : s.history) {
    if (r.split == "finetune") ++finetune_rows;
    if (r.split == "meta") (r.epoch < c.total_epochs ? before : after) = r.dice;
  }
  CHECK(finetune_rows == 5);
  REQUIRE(before);
  REQUIRE(after);
  CAPTURE(*before);
  CHECK(*after > *before);
}

TEST_CASE("history CSV and checkpoints") {
  TempDir dir("mmc_trainer_history");
  const auto train = tiny_split(20, 8, 101, true);
  const auto meta = tiny_split(2, 8, 102, false);
  const auto test = tiny_split(3, 8, 103, false);
  TrainConfig c = tiny_config();
  c.checkpoint_every = 2;
  c.run_dir = dir.path;
  const TrainerState s = mmc_train(c, {train, meta, test});
  for (const char* f : {"epoch_0002.seg.ckpt", "epoch_0002.cnet.ckpt", "epoch_0003.seg.ckpt", "epoch_0003.cnet.ckpt"})
    CHECK(std::filesystem::exists(dir.path / "checkpoints" / f));
  CHECK_FALSE(std::filesystem::exists(dir.path / "checkpoints" / "epoch_0001.seg.ckpt"));
  const TensorMap last = load_checkpoint(dir.path / "checkpoints" / "epoch_0003.seg.ckpt");
  CHECK(same_values(last, s.w.params));

  write_history_csv(dir.path / "history.csv", s.history);
  std::ifstream in(dir.path / "history.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "epoch,split,dice,iou,loss,lr,wall_ms");
  std::getline(in, line);
  CHECK(line.rfind("0,train,,,", 0) == 0);
  int rows = 1;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == static_cast<int>(s.history.size()));
}

TEST_CASE("divergence aborts with a dump of the last batch and params") {
  TempDir dir("mmc_trainer_divergence");
  const auto train = tiny_split(20, 8, 111, true);
  const auto meta = tiny_split(2, 8, 112, false);
  const auto test = tiny_split(3, 8, 113, false);
  TrainConfig c = tiny_config();
  c.run_dir = dir.path;
  TrainHooks hooks;
  hooks.corrector = [](const Tensor& logits, const Tensor&, const Batch&) {
    return scale(logits, std::numeric_limits<double>::infinity());
  };
  std::string what;
  try {
    mmc_train(c, {train, meta, test}, hooks);
  } catch (const NumericalError& e) {
    what = e.what();
  }
  CHECK(what.find("diverged at step 0") == 0);
  CHECK(what.find("s") != std::string::npos);
  const auto dump = dir.path / "divergence";
  CHECK(std::filesystem::exists(dump / "last.seg.ckpt"));
  CHECK(std::filesystem::exists(dump / "last.cnet.ckpt"));
  const TensorMap batch = load_checkpoint(dump / "batch.ckpt");
  CHECK(batch.at("x").dim(0) == c.batch_size);
  std::ifstream ids(dump / "batch_ids.txt");
  std::string first;
  ids >> first;
  CHECK(first.rfind("s", 0) == 0);
}
