#include "mmc/noise.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

namespace mmc {

namespace {

constexpr int kDr[4] = {-1, 1, 0, 0};
constexpr int kDc[4] = {0, 0, -1, 1};

// L1 distance to the nearest foreground pixel by two raster passes; exact for
// the 4-neighbour metric on a rectangle.
Grid<int> l1_distance(const BinaryMask& mask) {
  const int far = std::numeric_limits<int>::max() / 2;
  Grid<int> d(mask.rows, mask.cols, far);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask.data[i]) d.data[i] = 0;
  }
  for (int r = 0; r < d.rows; ++r)
    for (int c = 0; c < d.cols; ++c) {
      if (r > 0) d(r, c) = std::min(d(r, c), d(r - 1, c) + 1);
      if (c > 0) d(r, c) = std::min(d(r, c), d(r, c - 1) + 1);
    }
  for (int r = d.rows - 1; r >= 0; --r)
    for (int c = d.cols - 1; c >= 0; --c) {
      if (r + 1 < d.rows) d(r, c) = std::min(d(r, c), d(r + 1, c) + 1);
      if (c + 1 < d.cols) d(r, c) = std::min(d(r, c), d(r, c + 1) + 1);
    }
  return d;
}

void check_proportion(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("noise proportion must be in [0,1]");
}

void check_range(int lo, int hi, const char* what) {
  if (lo < 0 || hi < lo) throw std::invalid_argument(std::string(what) + " range must satisfy 0 <= lo <= hi");
}

}  // namespace

InstanceLabeling connected_components(const BinaryMask& mask) {
  InstanceLabeling labels(mask.rows, mask.cols, 0);
  int next = 0;
  std::vector<std::pair<int, int>> stack;
  for (int r = 0; r < mask.rows; ++r)
    for (int c = 0; c < mask.cols; ++c) {
      if (!mask(r, c) || labels(r, c)) continue;
      labels(r, c) = ++next;
      stack.assign(1, {r, c});
      while (!stack.empty()) {
        const auto [y, x] = stack.back();
        stack.pop_back();
        for (int k = 0; k < 4; ++k) {
          const int ny = y + kDr[k], nx = x + kDc[k];
          if (!mask.in_bounds(ny, nx) || !mask(ny, nx) || labels(ny, nx)) continue;
          labels(ny, nx) = next;
          stack.emplace_back(ny, nx);
        }
      }
    }
  return labels;
}

BinaryMask dilate(const BinaryMask& mask, int r) {
  if (r < 0) throw std::invalid_argument("dilation radius must be >= 0");
  if (r == 0) return mask;
  const Grid<int> d = l1_distance(mask);
  BinaryMask out(mask.rows, mask.cols);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = d.data[i] <= r ? 1 : 0;
  return out;
}

std::vector<InstanceBox> instance_boxes(const InstanceLabeling& labels) {
  std::map<int, InstanceBox> boxes;
  for (int r = 0; r < labels.rows; ++r)
    for (int c = 0; c < labels.cols; ++c) {
      const int id = labels(r, c);
      if (id <= 0) continue;
      auto [it, fresh] = boxes.try_emplace(id, InstanceBox{id, r, c, r, c});
      if (fresh) continue;
      auto& b = it->second;
      b.min_row = std::min(b.min_row, r);
      b.max_row = std::max(b.max_row, r);
      b.min_col = std::min(b.min_col, c);
      b.max_col = std::max(b.max_col, c);
    }
  std::vector<InstanceBox> out;
  for (auto& [id, b] : boxes) out.push_back(b);
  return out;
}

std::vector<int> instance_ids(const InstanceLabeling& labels) {
  std::vector<int> ids;
  for (const auto& b : instance_boxes(labels)) ids.push_back(b.id);
  return ids;
}

std::string_view noise_kind_name(NoiseKind kind) {
  switch (kind) {
    case NoiseKind::partial: return "partial";
    case NoiseKind::bbox: return "bbox";
    case NoiseKind::dilation: return "dilation";
  }
  return "?";
}

NoiseKind parse_noise_kind(std::string_view name) {
  for (auto k : {NoiseKind::partial, NoiseKind::bbox, NoiseKind::dilation}) {
    if (noise_kind_name(k) == name) return k;
  }
  throw std::invalid_argument("unknown noise kind: " + std::string(name));
}

void validate(const NoiseSpec& spec) {
  check_proportion(spec.proportion);
  check_range(spec.bbox_min, spec.bbox_max, "bbox expansion");
  check_range(spec.dilation_min, spec.dilation_max, "dilation radius");
}

int deletion_count(double p, int n) {
  check_proportion(p);
  return static_cast<int>(std::round(p * n));
}

NoiseResult partial_gold(const InstanceLabeling& instances, double p, Rng& rng) {
  std::vector<int> ids = instance_ids(instances);
  const int n = static_cast<int>(ids.size());
  const int k = deletion_count(p, n);
  // Partial Fisher-Yates: the first k slots become a uniform k-subset.
  for (int i = 0; i < k; ++i) std::swap(ids[i], ids[rng.uniform_int(i, n - 1)]);
  NoiseResult out;
  out.removed.assign(ids.begin(), ids.begin() + k);
  out.kept.assign(ids.begin() + k, ids.end());
  std::sort(out.removed.begin(), out.removed.end());
  std::sort(out.kept.begin(), out.kept.end());

  out.mask = BinaryMask(instances.rows, instances.cols);
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const int id = instances.data[i];
    out.mask.data[i] = id > 0 && !std::binary_search(out.removed.begin(), out.removed.end(), id) ? 1 : 0;
  }
  return out;
}

NoiseResult bbox_noise(const InstanceLabeling& instances, double p, Rng& rng, int lo, int hi) {
  check_range(lo, hi, "bbox expansion");
  NoiseResult out = partial_gold(instances, p, rng);
  const auto boxes = instance_boxes(instances);
  for (const auto& b : boxes) {
    if (!std::binary_search(out.kept.begin(), out.kept.end(), b.id)) continue;
    const int e = static_cast<int>(rng.uniform_int(lo, hi));
    out.draws.emplace_back(b.id, e);
    const int r0 = std::max(0, b.min_row - e), r1 = std::min(instances.rows - 1, b.max_row + e);
    const int c0 = std::max(0, b.min_col - e), c1 = std::min(instances.cols - 1, b.max_col + e);
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c) out.mask(r, c) = 1;
  }
  return out;
}

NoiseResult dilation_noise(const InstanceLabeling& instances, double p, Rng& rng, int lo, int hi) {
  check_range(lo, hi, "dilation radius");
  NoiseResult out = partial_gold(instances, p, rng);
  const auto boxes = instance_boxes(instances);
  for (const auto& b : boxes) {
    if (!std::binary_search(out.kept.begin(), out.kept.end(), b.id)) continue;
    const int radius = static_cast<int>(rng.uniform_int(lo, hi));
    out.draws.emplace_back(b.id, radius);
    // Dilate inside the box grown by the radius; nothing outside it can be reached.
    const int r0 = std::max(0, b.min_row - radius), r1 = std::min(instances.rows - 1, b.max_row + radius);
    const int c0 = std::max(0, b.min_col - radius), c1 = std::min(instances.cols - 1, b.max_col + radius);
    BinaryMask crop(r1 - r0 + 1, c1 - c0 + 1);
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c) crop(r - r0, c - c0) = instances(r, c) == b.id ? 1 : 0;
    const BinaryMask grown = dilate(crop, radius);
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c) {
        if (grown(r - r0, c - c0)) out.mask(r, c) = 1;
      }
  }
  return out;
}

NoiseResult apply_noise(const InstanceLabeling& instances, const NoiseSpec& spec, Rng& rng) {
  validate(spec);
  switch (spec.kind) {
    case NoiseKind::partial: return partial_gold(instances, spec.proportion, rng);
    case NoiseKind::bbox: return bbox_noise(instances, spec.proportion, rng, spec.bbox_min, spec.bbox_max);
    case NoiseKind::dilation:
      return dilation_noise(instances, spec.proportion, rng, spec.dilation_min, spec.dilation_max);
  }
  throw std::invalid_argument("unknown noise kind");
}

}  // namespace mmc
