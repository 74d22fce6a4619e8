#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "mmc/grid.hpp"
#include "mmc/rng.hpp"

namespace mmc {

// Morphology. Connectivity is 4 everywhere: components, and the plus-shaped
// structuring element of dilate.
InstanceLabeling connected_components(const BinaryMask& mask);
BinaryMask dilate(const BinaryMask& mask, int r);

// Inclusive tight box.
struct InstanceBox {
  int id = 0;
  int min_row = 0, min_col = 0, max_row = 0, max_col = 0;
};

// Ascending by id, one per id present.
std::vector<InstanceBox> instance_boxes(const InstanceLabeling& labels);
std::vector<int> instance_ids(const InstanceLabeling& labels);

enum class NoiseKind { partial, bbox, dilation };
std::string_view noise_kind_name(NoiseKind kind);
NoiseKind parse_noise_kind(std::string_view name);

struct NoiseSpec {
  NoiseKind kind = NoiseKind::partial;
  double proportion = 0.4;
  int bbox_min = 1, bbox_max = 3;
  int dilation_min = 1, dilation_max = 5;
  std::uint64_t seed = 0;
};

void validate(const NoiseSpec& spec);

// round(p * n), halves away from zero.
int deletion_count(double p, int n);

struct NoiseResult {
  BinaryMask mask;
  std::vector<int> kept;     // ascending
  std::vector<int> removed;  // ascending
  // (instance id, expansion or radius) for each kept instance, ascending id.
  std::vector<std::pair<int, int>> draws;
};

// Erases exactly deletion_count(p, n) instances chosen uniformly.
NoiseResult partial_gold(const InstanceLabeling& instances, double p, Rng& rng);
// partial_gold, then each survivor becomes its box grown by e ~ U{lo..hi}
// on all four sides, filled and clipped.
NoiseResult bbox_noise(const InstanceLabeling& instances, double p, Rng& rng, int lo = 1, int hi = 3);
// partial_gold, then each survivor is dilated by its own r ~ U{lo..hi}.
NoiseResult dilation_noise(const InstanceLabeling& instances, double p, Rng& rng, int lo = 1, int hi = 5);

NoiseResult apply_noise(const InstanceLabeling& instances, const NoiseSpec& spec, Rng& rng);

}  // namespace mmc
