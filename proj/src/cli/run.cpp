#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "mmc/cli.hpp"
#include "mmc/errors.hpp"
#include "mmc/gradcheck.hpp"

namespace mmc::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

struct Invocation {
  std::string config_file;
  std::vector<std::string> assignments;
  // Shorthand flags, applied last.
  std::vector<std::pair<std::string, std::string>> flags;
};

CLI::App* command(CLI::App& app, const std::string& name, const std::string& about, Invocation& inv,
                  const std::vector<std::pair<std::string, std::string>>& shorthands) {
  CLI::App* sub = app.add_subcommand(name, about);
  sub->add_option("--config", inv.config_file, "flat key = value config file");
  sub->add_option("--set", inv.assignments, "override one key, as key=value (repeatable)");
  for (const auto& [flag, key] : shorthands) {
    sub->add_option_function<std::string>(
        "--" + flag, [&inv, key](const std::string& v) { inv.flags.emplace_back(key, v); }, "sets " + key);
  }
  return sub;
}

RunConfig resolve(const Invocation& inv) {
  RunConfig cfg;
  if (!inv.config_file.empty()) cfg.load_file(inv.config_file);
  for (const auto& a : inv.assignments) cfg.set_assignment(a);
  for (const auto& [k, v] : inv.flags) cfg.set(k, v);
  return cfg;
}

const std::string& required(const RunConfig& cfg, const std::string& key) {
  const std::string& v = cfg.get(key);
  if (v.empty()) throw ConfigError(key + ": required");
  return v;
}

bool empty_or_missing(const fs::path& dir) { return !fs::exists(dir) || fs::is_empty(dir); }

int synth(const RunConfig& cfg) {
  const fs::path out = required(cfg, "out");
  if (!empty_or_missing(out)) throw ConfigError("out: directory " + out.string() + " is not empty");
  const DatasetSplits splits = make_dataset(cfg.dataset());
  fs::create_directories(out);
  save_dataset(splits, out);
  cfg.write(out / "synth_config.txt");
  std::printf("wrote %zu train, %zu meta, %zu test samples to %s\n", splits.train.size(), splits.meta.size(),
              splits.test.size(), out.string().c_str());
  return kOk;
}

int corrupt(const RunConfig& cfg) {
  const fs::path src = required(cfg, "data_dir");
  const NoiseSpec spec = cfg.noise();
  fs::path target = src;
  if (!cfg.get("out").empty()) {
    target = cfg.get("out");
    if (!empty_or_missing(target)) throw ConfigError("out: directory " + target.string() + " is not empty");
    if (!fs::exists(src / "meta.json")) throw DataError("missing or unreadable file " + (src / "meta.json").string());
    fs::create_directories(target);
    fs::copy(src, target, fs::copy_options::recursive);
  }
  if (fs::exists(target / "train" / "noisy_masks")) {
    throw DataError((target / "train" / "noisy_masks").string() + " already exists; corrupt only adds files");
  }
  DatasetSplits data = load_dataset(target);
  const auto records = corrupt_split(data.train, spec);
  save_noisy_masks(data.train, target / "train");

  ordered_json manifest = {{"kind", noise_kind_name(spec.kind)},
                           {"p", spec.proportion},
                           {"seed", spec.seed},
                           {"split", "train"}};
  if (spec.kind == NoiseKind::bbox) manifest["expansion_range"] = {spec.bbox_min, spec.bbox_max};
  if (spec.kind == NoiseKind::dilation) manifest["radius_range"] = {spec.dilation_min, spec.dilation_max};
  ordered_json samples = ordered_json::array();
  std::size_t kept = 0, removed = 0;
  for (const auto& r : records) {
    ordered_json draws = ordered_json::array();
    for (const auto& [id, v] : r.result.draws) draws.push_back({id, v});
    samples.push_back({{"id", r.id}, {"kept", r.result.kept}, {"removed", r.result.removed}, {"draws", draws}});
    kept += r.result.kept.size();
    removed += r.result.removed.size();
  }
  manifest["samples"] = samples;
  std::ofstream(target / "noise_manifest.json") << manifest.dump(2) << '\n';
  cfg.write(target / "corrupt_config.txt");
  std::printf("%s noise, p=%s: %zu instances kept, %zu removed across %zu train samples in %s\n",
              std::string(noise_kind_name(spec.kind)).c_str(), format_double(spec.proportion).c_str(), kept, removed,
              records.size(), target.string().c_str());
  return kOk;
}

struct NoiseLabel {
  std::string kind = "none";
  double p = 0;
};

NoiseLabel noise_label(const fs::path& data_dir) {
  NoiseLabel out;
  std::ifstream in(data_dir / "noise_manifest.json");
  if (!in) return out;
  try {
    const auto j = ordered_json::parse(in);
    out.kind = j.at("kind").get<std::string>();
    out.p = j.at("p").get<double>();
  } catch (const std::exception& e) {
    throw DataError((data_dir / "noise_manifest.json").string() + ": " + e.what());
  }
  return out;
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255)); }

// image | ground truth | prediction, separated by 2-pixel gray bars.
void write_triptych(const fs::path& path, const SamplePair& s, const BinaryMask& pred) {
  const int h = s.rows(), w = s.cols(), gap = 2;
  Grid<std::uint8_t> out(h, 3 * w + 2 * gap, 128);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double v = 0;
      for (const auto& plane : s.image) v += plane(r, c);
      out(r, c) = to_byte(v / static_cast<double>(s.image.size()));
      out(r, w + gap + c) = s.clean_mask(r, c) ? 255 : 0;
      out(r, 2 * (w + gap) + c) = pred(r, c) ? 255 : 0;
    }
  write_pgm8(path, out);
}

void write_overlays(const fs::path& dir, const SegParams& w, const std::vector<SamplePair>& split, long count,
                    double tau, const std::string& prefix) {
  if (count <= 0) return;
  fs::create_directories(dir);
  NoGradGuard off;
  for (std::size_t i = 0; i < split.size() && static_cast<long>(i) < count; ++i) {
    const SamplePair* one[] = {&split[i]};
    const Tensor probs = sigmoid(seg_forward(w, image_batch(one)).logits);
    write_triptych(dir / (prefix + split[i].id + ".pgm"), split[i], binarize(probs, tau).at(0));
  }
}

const std::vector<SamplePair>& pick_split(const DatasetSplits& d, const std::string& name) {
  if (name == "train") return d.train;
  if (name == "meta") return d.meta;
  if (name == "test") return d.test;
  throw ConfigError("split: expected train, meta or test, got '" + name + "'");
}

fs::path run_dir(RunConfig& cfg, const std::string& fallback) {
  if (cfg.get("run_name").empty()) cfg.set("run_name", fallback);
  const fs::path dir = fs::path(cfg.get("runs_dir")) / cfg.get("run_name");
  fs::create_directories(dir);
  return dir;
}

int train(RunConfig cfg) {
  const Method method = parse_method(cfg.get("method"));
  const fs::path data_dir = required(cfg, "data_dir");
  TrainConfig t = cfg.train();
  const DatasetSplits data = load_dataset(data_dir);
  if (data.train.empty()) throw DataError(data_dir.string() + ": train split is empty");
  const int channels = static_cast<int>(data.train.front().image.size());
  if (channels != t.seg.in_channels) {
    cfg.set("channels", std::to_string(channels));
    t.seg.in_channels = channels;
  }
  const fs::path dir = run_dir(cfg, std::string(method_name(method)) + "_seed" + cfg.get("train_seed"));
  t.run_dir = dir;
  cfg.write(dir / "config.txt");

  const TrainData d{data.train, data.meta, data.test};
  TrainHooks hooks;
  hooks.on_step = [&t, n = data.train.size()](const TrainerState& s, const StepInfo& info) {
    const long per_epoch = static_cast<long>((n + t.batch_size - 1) / t.batch_size);
    if (info.t % per_epoch == 0) {
      std::printf("epoch %d  step %ld  loss %.4f\n", info.epoch + 1, s.t, info.loss);
      std::fflush(stdout);
    }
  };
  const TrainerState s = method == Method::mmc ? mmc_train(t, d, hooks) : baseline_train(t, d, method, hooks);

  write_history_csv(dir / "history.csv", s.history);
  save_checkpoint(dir / "final.seg.ckpt", s.w.params);
  if (method == Method::mmc) save_checkpoint(dir / "final.cnet.ckpt", s.theta.params);
  const NoiseLabel noise = noise_label(data_dir);
  const std::string name(method_name(method));
  const MetricsReport test = final_report(s, t, data.test, name, noise.kind, noise.p, "test");
  const MetricsReport meta = final_report(s, t, data.meta, name, noise.kind, noise.p, "meta");
  write_metrics_csv(dir / "metrics.csv", {test, meta});
  write_overlays(dir / "overlays", s.w, data.test, cfg.integer("overlay_count"), t.tau, "test_");
  std::printf("%s: test dice %.4f iou %.4f -> %s\n", name.c_str(), test.mean_dice, test.mean_iou,
              dir.string().c_str());
  return kOk;
}

int eval(RunConfig cfg) {
  const fs::path ckpt = required(cfg, "checkpoint");
  const SegParams w = seg_from_tensors(load_checkpoint(ckpt));
  const fs::path data_dir = required(cfg, "data_dir");
  const DatasetSplits data = load_dataset(data_dir);
  const std::string split_name = cfg.get("split");
  const auto& split = pick_split(data, split_name);
  const double tau = cfg.number("tau");
  if (!(tau > 0 && tau < 1)) throw ConfigError("tau: must lie in (0, 1)");
  std::string stem = ckpt.filename().string();
  stem = stem.substr(0, stem.find('.'));
  const fs::path dir = run_dir(cfg, "eval_" + stem + "_" + split_name);
  cfg.write(dir / "config.txt");
  const NoiseLabel noise = noise_label(data_dir);
  const long batch = cfg.integer("eval_batch_size");
  if (batch < 1) throw ConfigError("eval_batch_size: must be >= 1");
  MetricsReport r = evaluate(w, split, tau, static_cast<int>(batch));
  r.method = cfg.get("method");
  r.noise = noise.kind;
  r.proportion = noise.p;
  r.seed = static_cast<std::uint64_t>(cfg.integer("train_seed"));
  r.split = split_name;
  write_metrics_csv(dir / "metrics.csv", {r});
  write_overlays(dir / "overlays", w, split, cfg.integer("overlay_count"), tau, split_name + "_");
  std::printf("%s split: dice %.4f iou %.4f over %zu images -> %s\n", split_name.c_str(), r.mean_dice, r.mean_iou,
              r.rows.size(), dir.string().c_str());
  return kOk;
}

struct SuiteLine {
  std::string name;
  std::string detail;
  bool passed;
};

SuiteLine op_suite_line(int seeds) {
  const auto results = gradcheck::op_suite(seeds);
  double worst = 0;
  bool ok = true;
  for (const auto& r : results) {
    worst = std::max(worst, r.max_rel_err);
    ok = ok && r.passed;
  }
  char buf[96];
  std::snprintf(buf, sizeof buf, "max rel err %.3g over %zu checks", worst, results.size());
  return {"autodiff ops", buf, ok};
}

// L = 1/2 (W - theta)^2, L' = 1/2 W'^2: the hypergradient is
// alpha (W - alpha (W - theta)).
SuiteLine toy_line() {
  const BilevelProblem toy{[](const ParamSet& w, const ParamSet& th) {
                             const Tensor d = sub(w.at("w"), th.at("theta"));
                             return scale(mul(d, d), 0.5);
                           },
                           [](const ParamSet& wp) { return scale(mul(wp.at("w"), wp.at("w")), 0.5); }};
  double exact_err = 0, fd_err = 0;
  for (double W : {1.0, -0.7, 2.5})
    for (double th : {0.0, 0.4})
      for (double a : {0.1, 0.35}) {
        ParamSet w, theta;
        w.add("w", Tensor::scalar(W));
        theta.add("theta", Tensor::scalar(th));
        const double want = a * (W - a * (W - th));
        exact_err = std::max(exact_err, std::abs(hypergradient(toy, w, theta, a).grad.at("theta").item() - want));
        fd_err = std::max(fd_err, std::abs(hypergrad_fd(toy, w, theta, a).at("theta").item() - want));
      }
  char buf[96];
  std::snprintf(buf, sizeof buf, "max abs err exact %.3g, fd %.3g", exact_err, fd_err);
  return {"hypergradient toy", buf, exact_err <= 1e-10 && fd_err <= 1e-6};
}

SuiteLine tiny_net_line(int seeds) {
  double worst_cos = 1, worst_rel = 0;
  for (int seed = 0; seed < seeds; ++seed) {
    SynthConfig sc;
    sc.rows = sc.cols = 8;
    sc.nuclei_min = 1;
    sc.nuclei_max = 2;
    sc.radius_min = 2;
    sc.radius_max = 3;
    std::vector<SamplePair> samples;
    for (int i = 0; i < 6; ++i) {
      Rng rng(substream(static_cast<std::uint64_t>(seed), i));
      samples.push_back(synth_sample(sc, rng));
    }
    NoiseSpec ns;
    ns.kind = NoiseKind::dilation;
    ns.dilation_max = 2;
    ns.seed = static_cast<std::uint64_t>(seed);
    corrupt_split(samples, ns);
    const std::vector<const SamplePair*> noisy = {&samples[0], &samples[1], &samples[2], &samples[3]};
    const std::vector<const SamplePair*> meta = {&samples[4], &samples[5]};
    const Batch nb = make_batch(noisy, MaskSource::noisy), mb = make_batch(meta, MaskSource::clean);

    const SegConfig seg{1, 2, 1};
    const SegParams w = init_seg(seg, substream(seed, 100));
    MetaParams theta = init_cnet(CNetVariant::k3k1, 2, substream(seed, 101));
    Rng jitter(substream(seed, 102));
    ParamSet moved;
    for (const auto& e : theta.params) {
      std::vector<double> v(e.value.data().begin(), e.value.data().end());
      for (double& x : v) x += 0.3 * jitter.normal();
      moved.add(e.name, Tensor::from_data(e.value.shape(), std::move(v)));
    }
    theta.params = moved;
    const double alpha = 0.5;
    const GradMap exact = hypergradient(temp_update(w, theta, nb, alpha), seg, mb).grad;
    const GradMap fd = hypergrad_fd(mmc_problem(seg, theta.variant, nb, mb), w.params, theta.params, alpha, 1e-5);
    double dot = 0, ee = 0, ff = 0, dd = 0;
    for (std::size_t i = 0; i < exact.size(); ++i)
      for (std::size_t k = 0; k < exact[i].value.size(); ++k) {
        const double e = exact[i].value[k], f = fd[i].value[k];
        dot += e * f;
        ee += e * e;
        ff += f * f;
        dd += (e - f) * (e - f);
      }
    worst_cos = std::min(worst_cos, dot / std::sqrt(ee * ff));
    worst_rel = std::max(worst_rel, std::sqrt(dd / ff));
  }
  char buf[96];
  std::snprintf(buf, sizeof buf, "min cosine %.7f, max rel L2 %.3g over %d nets", worst_cos, worst_rel, seeds);
  return {"hypergradient tiny net", buf, worst_cos >= 0.999 && worst_rel <= 1e-3};
}

int gradcheck_command(const RunConfig& cfg) {
  const long seeds = cfg.integer("gradcheck_seeds");
  if (seeds < 1) throw ConfigError("gradcheck_seeds: must be >= 1");
  bool ok = true;
  for (const SuiteLine& line : {op_suite_line(static_cast<int>(seeds)), toy_line(), tiny_net_line(static_cast<int>(seeds))}) {
    std::printf("%-24s %-58s %s\n", line.name.c_str(), line.detail.c_str(), line.passed ? "ok" : "FAILED");
    ok = ok && line.passed;
  }
  return ok ? kOk : kGradcheck;
}

int dispatch(int argc, char** argv) {
  CLI::App app{"Meta mask correction: synthetic data, label noise, bi-level training"};
  app.require_subcommand(1);
  Invocation inv;
  CLI::App* synth_cmd = command(app, "synth", "write a synthetic dataset", inv, {{"seed", "seed"}, {"out", "out"}});
  CLI::App* corrupt_cmd =
      command(app, "corrupt", "add noisy train masks to a dataset", inv,
              {{"data", "data_dir"}, {"out", "out"}, {"kind", "noise_kind"}, {"p", "noise_p"}, {"seed", "noise_seed"}});
  CLI::App* train_cmd = command(app, "train", "train one method and write a run directory", inv,
                                {{"data", "data_dir"},
                                 {"method", "method"},
                                 {"seed", "train_seed"},
                                 {"epochs", "total_epochs"},
                                 {"name", "run_name"},
                                 {"runs", "runs_dir"}});
  CLI::App* eval_cmd = command(app, "eval", "score a checkpoint on a split", inv,
                               {{"data", "data_dir"},
                                {"checkpoint", "checkpoint"},
                                {"split", "split"},
                                {"method", "method"},
                                {"name", "run_name"},
                                {"runs", "runs_dir"}});
  CLI::App* grad_cmd = command(app, "gradcheck", "run the finite-difference gradient suites", inv, {{"seeds", "gradcheck_seeds"}});
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }
  const RunConfig cfg = resolve(inv);
  if (synth_cmd->parsed()) return synth(cfg);
  if (corrupt_cmd->parsed()) return corrupt(cfg);
  if (train_cmd->parsed()) return train(cfg);
  if (eval_cmd->parsed()) return eval(cfg);
  if (grad_cmd->parsed()) return gradcheck_command(cfg);
  return kUsage;
}

}  // namespace

int run(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return kNumerical;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  }
}

}  // namespace mmc::cli
