#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mmc/data.hpp"
#include "mmc/grid.hpp"
#include "mmc/nets.hpp"

namespace mmc {

// pixel >= tau -> 1. tau must lie in (0, 1).
BinaryMask binarize(const ImagePlane& soft, double tau = 0.5);
// One mask per image of an [N,1,H,W] tensor.
std::vector<BinaryMask> binarize(const Tensor& soft, double tau = 0.5);

// Both empty counts as perfect agreement (1.0). Throws ShapeError on a
// shape mismatch.
double iou(const BinaryMask& p, const BinaryMask& g);
double dice(const BinaryMask& p, const BinaryMask& g);

struct MetricsRow {
  std::string image_id;
  double dice = 0, iou = 0;
  std::size_t p_pixels = 0, g_pixels = 0;
};

struct MetricsReport {
  std::string method, noise;
  double proportion = 0;
  std::uint64_t seed = 0;
  std::string split;
  std::vector<MetricsRow> rows;
  // Per-image (macro) means.
  double mean_dice = 0, mean_iou = 0;
  // Mean BCE of the logits against the clean masks.
  double mean_loss = 0;
};

// Fills mean_dice / mean_iou from rows.
void aggregate(MetricsReport& report);

// Scores predictions from `logits_of` (an [N,1,H,W] logit batch for a batch
// of samples) against the clean masks, in batches of `batch_size`.
using LogitFn = std::function<Tensor(const Tensor& images, std::span<const SamplePair* const> samples)>;
MetricsReport evaluate_with(const LogitFn& logits_of, const std::vector<SamplePair>& split, double tau = 0.5,
                            int batch_size = 16);
MetricsReport evaluate(const SegParams& w, const std::vector<SamplePair>& split, double tau = 0.5,
                       int batch_size = 16);

// method,noise,proportion,seed,split,image_id,dice,iou,p_pixels,g_pixels
// preceded by a '#' line naming the aggregation, with a closing MEAN row.
// Several reports go into one file with a single header.
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsReport>& reports);

// Shortest text that reads back to the same double.
std::string format_double(double v);

}  // namespace mmc
