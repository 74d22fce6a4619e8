#include <algorithm>
#include <cmath>

#include "mmc/data.hpp"

namespace mmc {

namespace {

template <typename T>
Grid<T> crop(const Grid<T>& g, int top, int left, int rows, int cols) {
  Grid<T> out(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      if (g.in_bounds(top + r, left + c)) out(r, c) = g(top + r, left + c);
    }
  return out;
}

BinaryMask instance_only(const InstanceLabeling& labels, int id) {
  BinaryMask m(labels.rows, labels.cols);
  for (std::size_t i = 0; i < labels.size(); ++i) m.data[i] = labels.data[i] == id ? 1 : 0;
  return m;
}

std::string patch_id(const std::string& base, int k) {
  return base + "_p" + std::to_string(k);
}

}  // namespace

InstanceLabeling relabel_components(const InstanceLabeling& labels) {
  InstanceLabeling out(labels.rows, labels.cols, 0);
  int next = 0;
  std::vector<std::pair<int, int>> stack;
  const int dr[4] = {-1, 1, 0, 0}, dc[4] = {0, 0, -1, 1};
  for (int r = 0; r < labels.rows; ++r)
    for (int c = 0; c < labels.cols; ++c) {
      const int id = labels(r, c);
      if (id <= 0 || out(r, c)) continue;
      out(r, c) = ++next;
      stack.assign(1, {r, c});
      while (!stack.empty()) {
        const auto [y, x] = stack.back();
        stack.pop_back();
        for (int k = 0; k < 4; ++k) {
          const int ny = y + dr[k], nx = x + dc[k];
          if (!labels.in_bounds(ny, nx) || labels(ny, nx) != id || out(ny, nx)) continue;
          out(ny, nx) = next;
          stack.emplace_back(ny, nx);
        }
      }
    }
  return out;
}

std::vector<PatchWindow> single_nuclei_windows(const SamplePair& sample) {
  struct Acc {
    long long n = 0, sr = 0, sc = 0;
  };
  std::vector<Acc> acc;
  for (int r = 0; r < sample.rows(); ++r)
    for (int c = 0; c < sample.cols(); ++c) {
      const int id = sample.instances(r, c);
      if (id <= 0) continue;
      if (static_cast<int>(acc.size()) < id) acc.resize(id);
      acc[id - 1].n += 1;
      acc[id - 1].sr += r;
      acc[id - 1].sc += c;
    }
  std::vector<PatchWindow> out;
  for (int id = 1; id <= static_cast<int>(acc.size()); ++id) {
    const Acc& a = acc[id - 1];
    if (a.n == 0) continue;
    // Continuous coordinates: pixel k spans [k, k + 1).
    const double cy = static_cast<double>(a.sr) / a.n + 0.5, cx = static_cast<double>(a.sc) / a.n + 0.5;
    double half = 0;
    for (int r = 0; r < sample.rows(); ++r)
      for (int c = 0; c < sample.cols(); ++c) {
        if (sample.instances(r, c) != id) continue;
        half = std::max({half, std::abs(r + 0.5 - cy) + 0.5, std::abs(c + 0.5 - cx) + 0.5});
      }
    const double margin = std::max(2.0, 0.25 * 2 * half);
    const int side = static_cast<int>(std::ceil(2 * (half + margin)));
    out.push_back({id, cy - side / 2.0, cx - side / 2.0, side});
  }
  return out;
}

namespace {

template <typename T>
Grid<T> sample_window(const Grid<T>& src, const PatchWindow& w, int out_size) {
  Grid<T> out(out_size, out_size);
  const double step = static_cast<double>(w.side) / out_size;
  for (int r = 0; r < out_size; ++r) {
    const int sr = static_cast<int>(std::floor(w.top + (r + 0.5) * step));
    for (int c = 0; c < out_size; ++c) {
      const int sc = static_cast<int>(std::floor(w.left + (c + 0.5) * step));
      if (src.in_bounds(sr, sc)) out(r, c) = src(sr, sc);
    }
  }
  return out;
}

}  // namespace

std::vector<SamplePair> single_nuclei_patches(const SamplePair& sample, int out_size, PatchStats* stats) {
  if (out_size < 1) throw std::invalid_argument("patch size must be >= 1");
  std::vector<SamplePair> out;
  int k = 0;
  for (const auto& w : single_nuclei_windows(sample)) {
    if (count_foreground(instance_only(sample.instances, w.id)) <= 1) {
      if (stats) ++stats->degenerate_skipped;
      continue;
    }
    const auto labels = sample_window(sample.instances, w, out_size);
    BinaryMask only(out_size, out_size);
    for (std::size_t i = 0; i < only.size(); ++i) only.data[i] = labels.data[i] == w.id ? 1 : 0;
    SamplePair p;
    p.id = patch_id(sample.id, k++);
    for (const auto& plane : sample.image) p.image.push_back(sample_window(plane, w, out_size));
    p.clean_mask = only;
    p.instances = InstanceLabeling(out_size, out_size, 0);
    for (std::size_t i = 0; i < only.size(); ++i) p.instances.data[i] = only.data[i];
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<SamplePair> multi_nuclei_patches(const SamplePair& sample, int size, int stride) {
  if (stride == 0) stride = size;
  if (size < 1 || stride < 1) throw std::invalid_argument("patch size and stride must be >= 1");
  if (sample.rows() < size || sample.cols() < size) {
    throw std::invalid_argument("sample smaller than patch size " + std::to_string(size));
  }
  std::vector<SamplePair> out;
  int k = 0;
  for (int top = 0; top + size <= sample.rows(); top += stride)
    for (int left = 0; left + size <= sample.cols(); left += stride) {
      SamplePair p;
      p.id = patch_id(sample.id, k++);
      for (const auto& plane : sample.image) p.image.push_back(crop(plane, top, left, size, size));
      p.clean_mask = crop(sample.clean_mask, top, left, size, size);
      p.instances = relabel_components(crop(sample.instances, top, left, size, size));
      if (sample.noisy_mask) p.noisy_mask = crop(*sample.noisy_mask, top, left, size, size);
      out.push_back(std::move(p));
    }
  return out;
}

}  // namespace mmc
