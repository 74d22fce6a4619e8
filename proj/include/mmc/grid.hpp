#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmc {

// Row-major 2-D array.
template <typename T>
struct Grid {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(int r, int c, T fill = T{}) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {
    if (r < 0 || c < 0) throw std::invalid_argument("grid dims must be non-negative");
  }

  T& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  const T& operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  bool in_bounds(int r, int c) const { return r >= 0 && r < rows && c >= 0 && c < cols; }
  std::size_t size() const { return data.size(); }
  template <typename U>
  bool same_shape(const Grid<U>& o) const {
    return rows == o.rows && cols == o.cols;
  }
  bool operator==(const Grid&) const = default;
};

// 0 or 1 per pixel.
using BinaryMask = Grid<std::uint8_t>;
// 0 = background, k >= 1 = instance id.
using InstanceLabeling = Grid<std::int32_t>;
// Intensities in [0, 1], one grid per channel.
using ImagePlane = Grid<double>;

inline BinaryMask foreground(const InstanceLabeling& labels) {
  BinaryMask m(labels.rows, labels.cols);
  for (std::size_t i = 0; i < labels.size(); ++i) m.data[i] = labels.data[i] > 0 ? 1 : 0;
  return m;
}

inline std::size_t count_foreground(const BinaryMask& m) {
  std::size_t n = 0;
  for (auto v : m.data) n += v != 0;
  return n;
}

}  // namespace mmc
