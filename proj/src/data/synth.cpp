#include <algorithm>
#include <cmath>
#include <numbers>

#include "mmc/data.hpp"
#include "mmc/errors.hpp"

namespace mmc {

namespace {

struct Placement {
  std::vector<std::pair<int, int>> pixels;
};

// Pixels of a rotated filled ellipse inside the canvas; empty when less than
// half of it would be visible.
Placement render_ellipse(const SynthConfig& cfg, Rng& rng) {
  const double cy = rng.uniform(0.0, cfg.rows), cx = rng.uniform(0.0, cfg.cols);
  const double a = rng.uniform(cfg.radius_min, cfg.radius_max);
  const double b = rng.uniform(cfg.radius_min, cfg.radius_max);
  const double angle = rng.uniform(0.0, std::numbers::pi);
  const double ca = std::cos(angle), sa = std::sin(angle);
  const int reach = static_cast<int>(std::ceil(std::max(a, b)));
  Placement p;
  int total = 0;
  for (int r = static_cast<int>(std::floor(cy)) - reach; r <= static_cast<int>(std::floor(cy)) + reach; ++r)
    for (int c = static_cast<int>(std::floor(cx)) - reach; c <= static_cast<int>(std::floor(cx)) + reach; ++c) {
      const double dy = r + 0.5 - cy, dx = c + 0.5 - cx;
      const double u = (dx * ca + dy * sa) / a, v = (-dx * sa + dy * ca) / b;
      if (u * u + v * v > 1.0) continue;
      ++total;
      if (r >= 0 && r < cfg.rows && c >= 0 && c < cfg.cols) p.pixels.emplace_back(r, c);
    }
  if (static_cast<int>(p.pixels.size()) * 2 < total || p.pixels.size() < 4) p.pixels.clear();
  return p;
}

std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

void validate(const SynthConfig& cfg) {
  if (cfg.rows < 8 || cfg.cols < 8) throw ConfigError("synth canvas must be at least 8x8");
  if (cfg.channels != 1 && cfg.channels != 3) throw ConfigError("synth channels must be 1 or 3");
  if (cfg.nuclei_min < 1 || cfg.nuclei_max < cfg.nuclei_min) {
    throw ConfigError("synth nuclei range must satisfy 1 <= min <= max");
  }
  if (cfg.radius_min < 2.0 || cfg.radius_max < cfg.radius_min) {
    throw ConfigError("synth radii must satisfy 2 <= min <= max");
  }
  if (!(cfg.max_occlusion >= 0.0 && cfg.max_occlusion < 1.0)) throw ConfigError("max_occlusion must be in [0,1)");
  if (cfg.texture_sigma < 0 || cfg.nucleus_sigma < 0 || cfg.background_sigma < 0) {
    throw ConfigError("synth sigmas must be >= 0");
  }
  if (cfg.max_retries < 1) throw ConfigError("max_retries must be >= 1");
}

SamplePair synth_sample(const SynthConfig& cfg, Rng& rng) {
  validate(cfg);
  SamplePair s;
  s.instances = InstanceLabeling(cfg.rows, cfg.cols, 0);
  const int count = static_cast<int>(rng.uniform_int(cfg.nuclei_min, cfg.nuclei_max));
  std::vector<int> placed_area;  // pixel count of each instance when drawn

  for (int id = 1; id <= count; ++id) {
    bool ok = false;
    for (int attempt = 0; attempt < cfg.max_retries && !ok; ++attempt) {
      const Placement p = render_ellipse(cfg, rng);
      if (p.pixels.empty()) continue;
      std::vector<int> lost(placed_area.size(), 0);
      for (auto [r, c] : p.pixels) {
        const int prev = s.instances(r, c);
        if (prev > 0) ++lost[prev - 1];
      }
      std::vector<int> visible(placed_area.size(), 0);
      for (auto v : s.instances.data)
        if (v > 0) ++visible[v - 1];
      ok = true;
      for (std::size_t j = 0; j < placed_area.size(); ++j) {
        if (visible[j] - lost[j] < (1.0 - cfg.max_occlusion) * placed_area[j]) ok = false;
      }
      if (!ok) continue;
      for (auto [r, c] : p.pixels) s.instances(r, c) = id;
      placed_area.push_back(static_cast<int>(p.pixels.size()));
    }
    if (!ok) {
      if (id > cfg.nuclei_min) break;
      throw DataError("synth: could not place " + std::to_string(cfg.nuclei_min) + " nuclei after " +
                      std::to_string(cfg.max_retries) + " retries each");
    }
  }

  const int placed = static_cast<int>(placed_area.size());
  s.clean_mask = foreground(s.instances);
  for (int ch = 0; ch < cfg.channels; ++ch) {
    const double background = rng.normal(cfg.background_mean, cfg.background_sigma);
    std::vector<double> means(placed);
    for (auto& m : means) m = rng.normal(cfg.nucleus_mean, cfg.nucleus_sigma);
    ImagePlane plane(cfg.rows, cfg.cols);
    for (std::size_t i = 0; i < plane.size(); ++i) {
      const int id = s.instances.data[i];
      const double base = id > 0 ? means[id - 1] : background;
      plane.data[i] = quantize(base + rng.normal(0.0, cfg.texture_sigma)) / 255.0;
    }
    s.image.push_back(std::move(plane));
  }
  return s;
}

void check_sample(const SamplePair& s, const std::string& where) {
  auto fail = [&where](const std::string& why) { return DataError(where + ": " + why); };
  if (s.image.empty()) throw fail("no image planes");
  for (const auto& p : s.image) {
    if (!p.same_shape(s.clean_mask)) throw fail("image and mask sizes differ");
    for (double v : p.data)
      if (!(v >= 0.0 && v <= 1.0)) throw fail("image value outside [0,1]");
  }
  if (!s.instances.same_shape(s.clean_mask)) throw fail("instances and mask sizes differ");
  for (std::size_t i = 0; i < s.clean_mask.size(); ++i) {
    if (s.clean_mask.data[i] > 1) throw fail("mask value outside {0,1}");
    if (s.instances.data[i] < 0) throw fail("negative instance id");
    if ((s.instances.data[i] > 0) != (s.clean_mask.data[i] == 1)) throw fail("mask disagrees with instances");
  }
  if (s.noisy_mask) {
    if (!s.noisy_mask->same_shape(s.clean_mask)) throw fail("noisy mask size differs");
    for (auto v : s.noisy_mask->data)
      if (v > 1) throw fail("noisy mask value outside {0,1}");
  }
}

}  // namespace mmc
