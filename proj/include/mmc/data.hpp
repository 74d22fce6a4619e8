#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmc/grid.hpp"
#include "mmc/noise.hpp"
#include "mmc/rng.hpp"
#include "mmc/tensor.hpp"

namespace mmc {

// Filled rotated ellipses with per-instance mean intensity and Gaussian
// pixel texture over a noisy background. Values are clamped to [0, 1] and
// quantised to k/255 so 8-bit files reproduce them exactly.
struct SynthConfig {
  int rows = 64, cols = 64;
  int channels = 1;
  int nuclei_min = 3, nuclei_max = 8;
  double radius_min = 3.0, radius_max = 7.0;
  double nucleus_mean = 0.62, nucleus_sigma = 0.06;
  double background_mean = 0.32, background_sigma = 0.04;
  double texture_sigma = 0.1;
  // A placement that leaves any earlier instance more than this fraction
  // hidden is redrawn.
  double max_occlusion = 0.3;
  int max_retries = 100;
};

void validate(const SynthConfig& cfg);

struct SamplePair {
  std::string id;
  std::vector<ImagePlane> image;  // one plane per channel
  BinaryMask clean_mask;
  std::optional<BinaryMask> noisy_mask;
  InstanceLabeling instances;

  int rows() const { return clean_mask.rows; }
  int cols() const { return clean_mask.cols; }
};

// clean_mask == (instances > 0), planes and masks agree in size, pixel
// values in range. Throws DataError mentioning `where`.
void check_sample(const SamplePair& s, const std::string& where);

SamplePair synth_sample(const SynthConfig& cfg, Rng& rng);

struct PatchStats {
  int degenerate_skipped = 0;
};

// One out_size x out_size patch per instance: a square around the
// instance centroid covering its box plus a margin, nearest-neighbour
// rescaled. The mask keeps only that instance.
std::vector<SamplePair> single_nuclei_patches(const SamplePair& sample, int out_size = 64,
                                              PatchStats* stats = nullptr);

// Square source window of an instance, centred on its centroid. Patch
// pixel (r, c) samples source pixel (floor(top + (r + 0.5) * side / out),
// floor(left + (c + 0.5) * side / out)); pixels outside the source are 0.
struct PatchWindow {
  int id = 0;
  double top = 0, left = 0;
  int side = 0;
};
std::vector<PatchWindow> single_nuclei_windows(const SamplePair& sample);

// Regular grid of size x size crops (stride defaults to size). Instance ids
// are renumbered per patch: each 4-connected piece of an instance gets its
// own id in raster discovery order.
std::vector<SamplePair> multi_nuclei_patches(const SamplePair& sample, int size = 128, int stride = 0);

// Connected regions of equal nonzero id, numbered in raster order.
InstanceLabeling relabel_components(const InstanceLabeling& labels);

// Nearest-neighbour resize: source index floor((dst + 0.5) * src / dst_size).
template <typename T>
Grid<T> resize_nearest(const Grid<T>& src, int rows, int cols) {
  Grid<T> out(rows, cols);
  for (int r = 0; r < rows; ++r) {
    const int sr = static_cast<int>((static_cast<long long>(2 * r + 1) * src.rows) / (2LL * rows));
    for (int c = 0; c < cols; ++c) {
      const int sc = static_cast<int>((static_cast<long long>(2 * c + 1) * src.cols) / (2LL * cols));
      out(r, c) = src(sr, sc);
    }
  }
  return out;
}

struct DatasetConfig {
  SynthConfig synth;
  int n_train = 400, n_meta = 20, n_test = 200;
  std::uint64_t seed = 0;
  // none: each canvas is a sample. single / multi: canvases are cut into
  // patches until each split is full.
  std::string patch_mode = "none";
  int patch_size = 64;
  int patch_stride = 0;
};

void validate(const DatasetConfig& cfg);

struct DatasetSplits {
  std::vector<SamplePair> train;
  std::vector<SamplePair> meta;
  std::vector<SamplePair> test;
  // Free-form provenance written to meta.json (config, seed, counts).
  std::string manifest_json;
};

// Every canvas draws from substream(seed, canvas index), so the result does
// not depend on generation order.
DatasetSplits make_dataset(const DatasetConfig& cfg);

// PGM P5 8-bit / 16-bit (big-endian, per the format).
void write_pgm8(const std::filesystem::path& path, const Grid<std::uint8_t>& g);
Grid<std::uint8_t> read_pgm8(const std::filesystem::path& path);
void write_pgm16(const std::filesystem::path& path, const Grid<std::uint16_t>& g);
Grid<std::uint16_t> read_pgm16(const std::filesystem::path& path);
// Triptych / overlay writer for 8-bit RGB (P6).
void write_ppm(const std::filesystem::path& path, const std::vector<Grid<std::uint8_t>>& rgb);
std::vector<Grid<std::uint8_t>> read_ppm(const std::filesystem::path& path);

// Layout: {split}/images/{id}.pgm, {split}/masks/{id}.pgm (0 or 255),
// {split}/instances/{id}.pgm16, optional {split}/noisy_masks/{id}.pgm, and
// meta.json at the root.
void save_dataset(const DatasetSplits& splits, const std::filesystem::path& dir);
DatasetSplits load_dataset(const std::filesystem::path& dir);
void save_noisy_masks(const std::vector<SamplePair>& split, const std::filesystem::path& split_dir);

// Corrupts every sample of a split; per-sample RNG is
// substream(spec.seed, sample index in split).
struct CorruptionRecord {
  std::string id;
  NoiseResult result;
};
std::vector<CorruptionRecord> corrupt_split(std::vector<SamplePair>& split, const NoiseSpec& spec);

// Batch tensors. Images [N,C,H,W]; masks [N,1,H,W] with values 0/1.
Tensor image_batch(std::span<const SamplePair* const> samples);
enum class MaskSource { clean, noisy };
Tensor mask_batch(std::span<const SamplePair* const> samples, MaskSource source);

}  // namespace mmc
