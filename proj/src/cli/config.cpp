#include <charconv>
#include <fstream>
#include <sstream>

#include "mmc/cli.hpp"
#include "mmc/errors.hpp"

namespace mmc::cli {

namespace {

std::string num(double v) { return format_double(v); }
std::string num(int v) { return std::to_string(v); }
std::string num(std::uint64_t v) { return std::to_string(v); }

// Keys in output order with their defaults.
const std::vector<std::pair<std::string, std::string>>& schema() {
  static const auto table = [] {
    const DatasetConfig d;
    const SynthConfig& s = d.synth;
    const NoiseSpec n;
    const TrainConfig t;
    return std::vector<std::pair<std::string, std::string>>{
        // paths and run layout
        {"data_dir", "data"},
        {"out", ""},
        {"runs_dir", "runs"},
        {"run_name", ""},
        {"checkpoint", ""},
        {"split", "test"},
        {"overlay_count", "8"},
        // dataset synthesis
        {"seed", num(d.seed)},
        {"rows", num(s.rows)},
        {"cols", num(s.cols)},
        {"channels", num(s.channels)},
        {"nuclei_min", num(s.nuclei_min)},
        {"nuclei_max", num(s.nuclei_max)},
        {"radius_min", num(s.radius_min)},
        {"radius_max", num(s.radius_max)},
        {"nucleus_mean", num(s.nucleus_mean)},
        {"nucleus_sigma", num(s.nucleus_sigma)},
        {"background_mean", num(s.background_mean)},
        {"background_sigma", num(s.background_sigma)},
        {"texture_sigma", num(s.texture_sigma)},
        {"max_occlusion", num(s.max_occlusion)},
        {"max_retries", num(s.max_retries)},
        {"n_train", num(d.n_train)},
        {"n_meta", num(d.n_meta)},
        {"n_test", num(d.n_test)},
        {"patch_mode", d.patch_mode},
        {"patch_size", num(d.patch_size)},
        {"patch_stride", num(d.patch_stride)},
        // label noise
        {"noise_kind", std::string(noise_kind_name(NoiseKind::dilation))},
        {"noise_p", num(n.proportion)},
        {"noise_seed", num(n.seed)},
        {"bbox_min", num(n.bbox_min)},
        {"bbox_max", num(n.bbox_max)},
        {"dilation_min", num(n.dilation_min)},
        {"dilation_max", num(n.dilation_max)},
        // training
        {"method", "mmc"},
        {"train_seed", num(t.seed)},
        {"alpha", num(t.alpha)},
        {"alpha_drop_epoch", num(t.alpha_drop_epoch)},
        {"alpha_drop_factor", num(t.alpha_drop_factor)},
        {"total_epochs", num(t.total_epochs)},
        {"beta", num(t.beta)},
        {"batch_size", num(t.batch_size)},
        {"meta_batch_size", num(t.meta_batch_size)},
        {"main_optimizer", std::string(optimizer_name(t.main_optimizer))},
        {"meta_optimizer", std::string(optimizer_name(t.meta_optimizer))},
        {"adam_beta1", num(t.adam.beta1)},
        {"adam_beta2", num(t.adam.beta2)},
        {"adam_eps", num(t.adam.eps)},
        {"seg_levels", num(t.seg.levels)},
        {"seg_channels", num(t.seg.base_channels)},
        {"cnet_variant", std::string(variant_name(t.cnet_variant))},
        {"cnet_hidden", num(t.cnet_hidden)},
        {"tau", num(t.tau)},
        {"eval_batch_size", num(t.eval_batch_size)},
        {"eval_every", num(t.eval_every)},
        {"checkpoint_every", num(t.checkpoint_every)},
        {"finetune_epoch_fraction", num(t.finetune_epoch_fraction)},
        {"finetune_lr_factor", num(t.finetune_lr_factor)},
        // gradcheck
        {"gradcheck_seeds", "10"},
    };
  }();
  return table;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Runs a parser or validator, turning its complaint into a ConfigError.
template <typename F>
auto keyed(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

}  // namespace

const std::vector<std::string>& RunConfig::keys() {
  static const auto names = [] {
    std::vector<std::string> out;
    for (const auto& [k, v] : schema()) out.push_back(k);
    return out;
  }();
  return names;
}

RunConfig::RunConfig() {
  for (const auto& [k, v] : schema()) values_[k] = v;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key: " + key);
  it->second = value;
}

void RunConfig::set_assignment(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key=value, got: " + text);
  const std::string key = trim(text.substr(0, eq));
  if (key.empty()) throw ConfigError("empty key in: " + text);
  set(key, trim(text.substr(eq + 1)));
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    try {
      set_assignment(line);
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key: " + key);
  return it->second;
}

double RunConfig::number(const std::string& key) const {
  const std::string& s = get(key);
  double v = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size() || s.empty()) {
    throw ConfigError(key + ": expected a number, got '" + s + "'");
  }
  return v;
}

long RunConfig::integer(const std::string& key) const {
  const std::string& s = get(key);
  long v = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size() || s.empty()) {
    throw ConfigError(key + ": expected an integer, got '" + s + "'");
  }
  return v;
}

std::string RunConfig::resolved_text() const {
  std::ostringstream out;
  for (const auto& k : keys()) out << k << " = " << values_.at(k) << '\n';
  return out.str();
}

void RunConfig::write(const std::filesystem::path& path) const {
  std::ofstream out(path);
  out << resolved_text();
  if (!out) throw DataError("cannot write " + path.string());
}

DatasetConfig RunConfig::dataset() const {
  DatasetConfig d;
  const auto seed = integer("seed");
  if (seed < 0) throw ConfigError("seed: must be >= 0");
  d.seed = static_cast<std::uint64_t>(seed);
  SynthConfig& s = d.synth;
  s.rows = static_cast<int>(integer("rows"));
  s.cols = static_cast<int>(integer("cols"));
  s.channels = static_cast<int>(integer("channels"));
  s.nuclei_min = static_cast<int>(integer("nuclei_min"));
  s.nuclei_max = static_cast<int>(integer("nuclei_max"));
  s.radius_min = number("radius_min");
  s.radius_max = number("radius_max");
  s.nucleus_mean = number("nucleus_mean");
  s.nucleus_sigma = number("nucleus_sigma");
  s.background_mean = number("background_mean");
  s.background_sigma = number("background_sigma");
  s.texture_sigma = number("texture_sigma");
  s.max_occlusion = number("max_occlusion");
  s.max_retries = static_cast<int>(integer("max_retries"));
  d.n_train = static_cast<int>(integer("n_train"));
  d.n_meta = static_cast<int>(integer("n_meta"));
  d.n_test = static_cast<int>(integer("n_test"));
  d.patch_mode = get("patch_mode");
  d.patch_size = static_cast<int>(integer("patch_size"));
  d.patch_stride = static_cast<int>(integer("patch_stride"));
  keyed("synth", [&] {
    validate(d);
    return 0;
  });
  return d;
}

NoiseSpec RunConfig::noise() const {
  NoiseSpec n;
  n.kind = keyed("noise_kind", [&] { return parse_noise_kind(get("noise_kind")); });
  n.proportion = number("noise_p");
  const auto seed = integer("noise_seed");
  if (seed < 0) throw ConfigError("noise_seed: must be >= 0");
  n.seed = static_cast<std::uint64_t>(seed);
  n.bbox_min = static_cast<int>(integer("bbox_min"));
  n.bbox_max = static_cast<int>(integer("bbox_max"));
  n.dilation_min = static_cast<int>(integer("dilation_min"));
  n.dilation_max = static_cast<int>(integer("dilation_max"));
  keyed("noise", [&] {
    validate(n);
    return 0;
  });
  return n;
}

TrainConfig RunConfig::train() const {
  TrainConfig t;
  const auto seed = integer("train_seed");
  if (seed < 0) throw ConfigError("train_seed: must be >= 0");
  t.seed = static_cast<std::uint64_t>(seed);
  t.alpha = number("alpha");
  t.alpha_drop_epoch = static_cast<int>(integer("alpha_drop_epoch"));
  t.alpha_drop_factor = number("alpha_drop_factor");
  t.total_epochs = static_cast<int>(integer("total_epochs"));
  t.beta = number("beta");
  t.batch_size = static_cast<int>(integer("batch_size"));
  t.meta_batch_size = static_cast<int>(integer("meta_batch_size"));
  t.main_optimizer = keyed("main_optimizer", [&] { return parse_optimizer(get("main_optimizer")); });
  t.meta_optimizer = keyed("meta_optimizer", [&] { return parse_optimizer(get("meta_optimizer")); });
  t.adam.beta1 = number("adam_beta1");
  t.adam.beta2 = number("adam_beta2");
  t.adam.eps = number("adam_eps");
  t.seg.levels = static_cast<int>(integer("seg_levels"));
  t.seg.base_channels = static_cast<int>(integer("seg_channels"));
  t.seg.in_channels = static_cast<int>(integer("channels"));
  t.cnet_variant = keyed("cnet_variant", [&] { return parse_variant(get("cnet_variant")); });
  t.cnet_hidden = static_cast<int>(integer("cnet_hidden"));
  t.tau = number("tau");
  t.eval_batch_size = static_cast<int>(integer("eval_batch_size"));
  t.eval_every = static_cast<int>(integer("eval_every"));
  t.checkpoint_every = static_cast<int>(integer("checkpoint_every"));
  t.finetune_epoch_fraction = number("finetune_epoch_fraction");
  t.finetune_lr_factor = number("finetune_lr_factor");
  validate(t);
  return t;
}

}  // namespace mmc::cli
