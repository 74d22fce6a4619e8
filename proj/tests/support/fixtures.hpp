#pragma once

// Random inputs and brute-force oracles shared by unit and acceptance tests.

#include <algorithm>
#include <iterator>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "mmc/grid.hpp"
#include "mmc/rng.hpp"

namespace mmc::testing {

// Discs of random radius at random centres. With `separated`, a disc is only
// placed if no pixel of it is within Chebyshev distance 1 of another
// instance, so instances never touch.
inline InstanceLabeling random_instances(Rng& rng, int rows, int cols, int count, bool separated) {
  InstanceLabeling labels(rows, cols, 0);
  int id = 0;
  for (int attempt = 0; attempt < count * 20 && id < count; ++attempt) {
    const int rad = static_cast<int>(rng.uniform_int(0, 4));
    const int cy = static_cast<int>(rng.uniform_int(0, rows - 1));
    const int cx = static_cast<int>(rng.uniform_int(0, cols - 1));
    std::vector<std::pair<int, int>> pix;
    bool clash = false;
    for (int r = cy - rad; r <= cy + rad; ++r)
      for (int c = cx - rad; c <= cx + rad; ++c) {
        if (!labels.in_bounds(r, c) || (r - cy) * (r - cy) + (c - cx) * (c - cx) > rad * rad) continue;
        pix.emplace_back(r, c);
        for (int dr = -1; dr <= 1 && separated; ++dr)
          for (int dc = -1; dc <= 1; ++dc)
            if (labels.in_bounds(r + dr, c + dc) && labels(r + dr, c + dc) != 0) clash = true;
      }
    if (clash && separated) continue;
    ++id;
    for (auto [r, c] : pix) labels(r, c) = id;
  }
  return labels;
}

inline BinaryMask random_mask(Rng& rng, int rows, int cols, double p) {
  BinaryMask m(rows, cols);
  for (auto& v : m.data) v = rng.uniform() < p ? 1 : 0;
  return m;
}

// Union-find labeling renumbered by first appearance in raster order.
inline InstanceLabeling union_find_components(const BinaryMask& m) {
  const int n = static_cast<int>(m.size());
  std::vector<int> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&parent](int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c) {
      if (!m(r, c)) continue;
      const int i = r * m.cols + c;
      if (r > 0 && m(r - 1, c)) parent[find(i)] = find(i - m.cols);
      if (c > 0 && m(r, c - 1)) parent[find(i)] = find(i - 1);
    }
  InstanceLabeling out(m.rows, m.cols, 0);
  std::map<int, int> ids;
  for (int i = 0; i < n; ++i) {
    if (!m.data[i]) continue;
    auto [it, fresh] = ids.try_emplace(find(i), static_cast<int>(ids.size()) + 1);
    out.data[i] = it->second;
  }
  return out;
}

// r rounds of "pixel or any 4-neighbour set".
inline BinaryMask iterated_plus_dilation(BinaryMask m, int r) {
  for (int k = 0; k < r; ++k) {
    BinaryMask next = m;
    for (int y = 0; y < m.rows; ++y)
      for (int x = 0; x < m.cols; ++x) {
        if (m(y, x)) continue;
        if ((y > 0 && m(y - 1, x)) || (y + 1 < m.rows && m(y + 1, x)) || (x > 0 && m(y, x - 1)) ||
            (x + 1 < m.cols && m(y, x + 1)))
          next(y, x) = 1;
      }
    m = std::move(next);
  }
  return m;
}

inline bool subset(const BinaryMask& a, const BinaryMask& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a.data[i] && !b.data[i]) return false;
  return true;
}

inline BinaryMask instance_mask(const InstanceLabeling& labels, int id) {
  BinaryMask m(labels.rows, labels.cols);
  for (std::size_t i = 0; i < labels.size(); ++i) m.data[i] = labels.data[i] == id ? 1 : 0;
  return m;
}

inline int component_count(const InstanceLabeling& labels) {
  return labels.data.empty() ? 0 : *std::max_element(labels.data.begin(), labels.data.end());
}

// Dice and IoU from explicit pixel-coordinate sets.
struct SetScores {
  double dice, iou;
  std::size_t p, g;
};
inline SetScores set_scores(const BinaryMask& p, const BinaryMask& g) {
  std::vector<std::pair<int, int>> ps, gs, both, either;
  for (int r = 0; r < p.rows; ++r)
    for (int c = 0; c < p.cols; ++c) {
      if (p(r, c)) ps.emplace_back(r, c);
      if (g(r, c)) gs.emplace_back(r, c);
    }
  std::set_intersection(ps.begin(), ps.end(), gs.begin(), gs.end(), std::back_inserter(both));
  std::set_union(ps.begin(), ps.end(), gs.begin(), gs.end(), std::back_inserter(either));
  const double d = ps.empty() && gs.empty() ? 1.0 : 2.0 * both.size() / double(ps.size() + gs.size());
  const double j = either.empty() ? 1.0 : both.size() / double(either.size());
  return {d, j, ps.size(), gs.size()};
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

}  // namespace mmc::testing
