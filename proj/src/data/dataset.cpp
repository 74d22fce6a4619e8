#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>

#include "mmc/data.hpp"
#include "mmc/errors.hpp"

namespace mmc {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr const char* kSplitNames[3] = {"train", "meta", "test"};
constexpr const char* kFormat = "mmc-dataset 1";

std::string canvas_id(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06zu", index);
  return buf;
}

ordered_json synth_json(const SynthConfig& c) {
  return {{"rows", c.rows},
          {"cols", c.cols},
          {"channels", c.channels},
          {"nuclei_min", c.nuclei_min},
          {"nuclei_max", c.nuclei_max},
          {"radius_min", c.radius_min},
          {"radius_max", c.radius_max},
          {"nucleus_mean", c.nucleus_mean},
          {"nucleus_sigma", c.nucleus_sigma},
          {"background_mean", c.background_mean},
          {"background_sigma", c.background_sigma},
          {"texture_sigma", c.texture_sigma},
          {"max_occlusion", c.max_occlusion},
          {"max_retries", c.max_retries}};
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(v * 255.0)); }

Grid<std::uint8_t> mask_to_pgm(const BinaryMask& m) {
  Grid<std::uint8_t> g(m.rows, m.cols);
  for (std::size_t i = 0; i < m.size(); ++i) g.data[i] = m.data[i] ? 255 : 0;
  return g;
}

BinaryMask mask_from_pgm(const Grid<std::uint8_t>& g, const fs::path& path) {
  BinaryMask m(g.rows, g.cols);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g.data[i] != 0 && g.data[i] != 255) {
      throw DataError(path.string() + ": mask value " + std::to_string(g.data[i]) + " is not 0 or 255");
    }
    m.data[i] = g.data[i] ? 1 : 0;
  }
  return m;
}

std::vector<SamplePair>& split_ref(DatasetSplits& d, int k) { return k == 0 ? d.train : k == 1 ? d.meta : d.test; }
const std::vector<SamplePair>& split_ref(const DatasetSplits& d, int k) {
  return k == 0 ? d.train : k == 1 ? d.meta : d.test;
}

}  // namespace

void validate(const DatasetConfig& cfg) {
  validate(cfg.synth);
  if (cfg.n_train < 1 || cfg.n_meta < 1 || cfg.n_test < 1) throw ConfigError("every split needs at least 1 sample");
  if (cfg.patch_mode != "none" && cfg.patch_mode != "single" && cfg.patch_mode != "multi") {
    throw ConfigError("patch_mode must be none, single or multi, got " + cfg.patch_mode);
  }
  if (cfg.patch_size < 1 || cfg.patch_stride < 0) throw ConfigError("bad patch size or stride");
  if (cfg.patch_mode == "multi" && (cfg.patch_size > cfg.synth.rows || cfg.patch_size > cfg.synth.cols)) {
    throw ConfigError("patch_size larger than the synth canvas");
  }
}

DatasetSplits make_dataset(const DatasetConfig& cfg) {
  validate(cfg);
  DatasetSplits out;
  const int wanted[3] = {cfg.n_train, cfg.n_meta, cfg.n_test};
  std::size_t canvas = 0;
  for (int k = 0; k < 3; ++k) {
    auto& split = split_ref(out, k);
    while (static_cast<int>(split.size()) < wanted[k]) {
      Rng rng(substream(cfg.seed, canvas));
      SamplePair s = synth_sample(cfg.synth, rng);
      s.id = canvas_id(canvas++);
      std::vector<SamplePair> pieces;
      if (cfg.patch_mode == "none") {
        pieces.push_back(std::move(s));
      } else if (cfg.patch_mode == "single") {
        pieces = single_nuclei_patches(s, cfg.patch_size);
      } else {
        pieces = multi_nuclei_patches(s, cfg.patch_size, cfg.patch_stride);
      }
      for (auto& p : pieces) {
        if (static_cast<int>(split.size()) < wanted[k]) split.push_back(std::move(p));
      }
    }
  }
  ordered_json manifest = {{"generator", "synthetic ellipses"},
                           {"seed", cfg.seed},
                           {"synth", synth_json(cfg.synth)},
                           {"patch_mode", cfg.patch_mode},
                           {"patch_size", cfg.patch_size},
                           {"patch_stride", cfg.patch_stride},
                           {"canvases", canvas}};
  out.manifest_json = manifest.dump();
  return out;
}

void save_noisy_masks(const std::vector<SamplePair>& split, const fs::path& split_dir) {
  fs::create_directories(split_dir / "noisy_masks");
  for (const auto& s : split) {
    if (!s.noisy_mask) throw std::invalid_argument("sample " + s.id + " has no noisy mask");
    write_pgm8(split_dir / "noisy_masks" / (s.id + ".pgm"), mask_to_pgm(*s.noisy_mask));
  }
}

void save_dataset(const DatasetSplits& splits, const fs::path& dir) {
  ordered_json meta;
  meta["format"] = kFormat;
  meta["provenance"] = splits.manifest_json.empty() ? ordered_json::object() : ordered_json::parse(splits.manifest_json);
  for (int k = 0; k < 3; ++k) {
    const auto& split = split_ref(splits, k);
    const fs::path sd = dir / kSplitNames[k];
    for (const char* sub : {"images", "masks", "instances"}) fs::create_directories(sd / sub);
    ordered_json ids = ordered_json::array();
    bool any_noisy = false;
    for (const auto& s : split) {
      check_sample(s, std::string(kSplitNames[k]) + "/" + s.id);
      ids.push_back(s.id);
      if (s.image.size() == 1) {
        Grid<std::uint8_t> g(s.rows(), s.cols());
        for (std::size_t i = 0; i < g.size(); ++i) g.data[i] = to_byte(s.image[0].data[i]);
        write_pgm8(sd / "images" / (s.id + ".pgm"), g);
      } else if (s.image.size() == 3) {
        std::vector<Grid<std::uint8_t>> rgb(3, Grid<std::uint8_t>(s.rows(), s.cols()));
        for (int ch = 0; ch < 3; ++ch)
          for (std::size_t i = 0; i < rgb[ch].size(); ++i) rgb[ch].data[i] = to_byte(s.image[ch].data[i]);
        write_ppm(sd / "images" / (s.id + ".ppm"), rgb);
      } else {
        throw DataError(s.id + ": only 1- or 3-channel images can be saved");
      }
      write_pgm8(sd / "masks" / (s.id + ".pgm"), mask_to_pgm(s.clean_mask));
      Grid<std::uint16_t> inst(s.rows(), s.cols());
      for (std::size_t i = 0; i < inst.size(); ++i) {
        if (s.instances.data[i] > 65535) throw DataError(s.id + ": instance id exceeds 65535");
        inst.data[i] = static_cast<std::uint16_t>(s.instances.data[i]);
      }
      write_pgm16(sd / "instances" / (s.id + ".pgm16"), inst);
      any_noisy |= s.noisy_mask.has_value();
    }
    if (any_noisy) save_noisy_masks(split, sd);
    meta["splits"][kSplitNames[k]] = ids;
  }
  std::ofstream out(dir / "meta.json");
  if (!out) throw DataError("cannot write " + (dir / "meta.json").string());
  out << meta.dump(2) << '\n';
}

DatasetSplits load_dataset(const fs::path& dir) {
  const fs::path meta_path = dir / "meta.json";
  std::ifstream in(meta_path);
  if (!in) throw DataError("missing or unreadable file " + meta_path.string());
  ordered_json meta;
  try {
    meta = ordered_json::parse(in);
  } catch (const std::exception& e) {
    throw DataError(meta_path.string() + ": " + e.what());
  }
  if (meta.value("format", "") != kFormat) throw DataError(meta_path.string() + ": unknown format tag");

  DatasetSplits out;
  out.manifest_json = meta.contains("provenance") ? meta["provenance"].dump() : "{}";
  for (int k = 0; k < 3; ++k) {
    const fs::path sd = dir / kSplitNames[k];
    if (!meta.contains("splits") || !meta["splits"].contains(kSplitNames[k])) {
      throw DataError(meta_path.string() + ": no id list for split " + kSplitNames[k]);
    }
    auto& split = split_ref(out, k);
    for (const auto& jid : meta["splits"][kSplitNames[k]]) {
      SamplePair s;
      s.id = jid.get<std::string>();
      const fs::path gray = sd / "images" / (s.id + ".pgm");
      const fs::path rgb = sd / "images" / (s.id + ".ppm");
      std::vector<Grid<std::uint8_t>> planes;
      if (fs::exists(gray)) {
        planes.push_back(read_pgm8(gray));
      } else if (fs::exists(rgb)) {
        planes = read_ppm(rgb);
      } else {
        throw DataError("missing image file " + gray.string());
      }
      for (const auto& p : planes) {
        ImagePlane ip(p.rows, p.cols);
        for (std::size_t i = 0; i < p.size(); ++i) ip.data[i] = p.data[i] / 255.0;
        s.image.push_back(std::move(ip));
      }
      const fs::path mask_path = sd / "masks" / (s.id + ".pgm");
      s.clean_mask = mask_from_pgm(read_pgm8(mask_path), mask_path);
      if (!s.clean_mask.same_shape(s.image[0])) {
        throw DataError(mask_path.string() + ": size differs from its image");
      }
      const fs::path inst_path = sd / "instances" / (s.id + ".pgm16");
      const auto inst = read_pgm16(inst_path);
      s.instances = InstanceLabeling(inst.rows, inst.cols);
      for (std::size_t i = 0; i < inst.size(); ++i) s.instances.data[i] = inst.data[i];
      if (!s.instances.same_shape(s.clean_mask)) throw DataError(inst_path.string() + ": size differs from its mask");
      const fs::path noisy_path = sd / "noisy_masks" / (s.id + ".pgm");
      if (fs::exists(noisy_path)) {
        s.noisy_mask = mask_from_pgm(read_pgm8(noisy_path), noisy_path);
        if (!s.noisy_mask->same_shape(s.clean_mask)) {
          throw DataError(noisy_path.string() + ": size differs from its mask");
        }
      }
      check_sample(s, (sd / s.id).string());
      split.push_back(std::move(s));
    }
  }
  return out;
}

std::vector<CorruptionRecord> corrupt_split(std::vector<SamplePair>& split, const NoiseSpec& spec) {
  validate(spec);
  std::vector<CorruptionRecord> records;
  for (std::size_t i = 0; i < split.size(); ++i) {
    Rng rng(substream(spec.seed, i));
    NoiseResult r = apply_noise(split[i].instances, spec, rng);
    split[i].noisy_mask = r.mask;
    records.push_back({split[i].id, std::move(r)});
  }
  return records;
}

Tensor image_batch(std::span<const SamplePair* const> samples) {
  if (samples.empty()) throw std::invalid_argument("empty batch");
  const SamplePair& first = *samples[0];
  const int n = static_cast<int>(samples.size()), c = static_cast<int>(first.image.size());
  const int h = first.rows(), w = first.cols();
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(n) * c * h * w);
  for (const SamplePair* s : samples) {
    if (static_cast<int>(s->image.size()) != c || s->rows() != h || s->cols() != w) {
      throw ShapeError("image_batch: sample " + s->id + " differs in size");
    }
    for (const auto& plane : s->image) data.insert(data.end(), plane.data.begin(), plane.data.end());
  }
  return Tensor::from_data({n, c, h, w}, std::move(data));
}

Tensor mask_batch(std::span<const SamplePair* const> samples, MaskSource source) {
  if (samples.empty()) throw std::invalid_argument("empty batch");
  const int n = static_cast<int>(samples.size()), h = samples[0]->rows(), w = samples[0]->cols();
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(n) * h * w);
  for (const SamplePair* s : samples) {
    const BinaryMask* m = &s->clean_mask;
    if (source == MaskSource::noisy) {
      if (!s->noisy_mask) throw DataError("sample " + s->id + " has no noisy mask");
      m = &*s->noisy_mask;
    }
    if (m->rows != h || m->cols != w) throw ShapeError("mask_batch: sample " + s->id + " differs in size");
    for (auto v : m->data) data.push_back(v);
  }
  return Tensor::from_data({n, 1, h, w}, std::move(data));
}

}  // namespace mmc
