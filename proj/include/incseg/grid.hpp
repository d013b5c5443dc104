#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

#include "incseg/common.hpp"

namespace incseg {

/// Row-major 2D grid, index (y, x).
template <class T>
struct Grid2 {
  int height = 0;
  int width = 0;
  std::vector<T> data;

  Grid2() = default;
  Grid2(int h, int w, T fill = T{}) : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

  std::size_t size() const { return data.size(); }
  T& operator()(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  const T& operator()(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  bool same_shape(const Grid2& o) const { return height == o.height && width == o.width; }
  template <class U>
  bool same_shape(const Grid2<U>& o) const {
    return height == o.height && width == o.width;
  }
  bool operator==(const Grid2&) const = default;
};

/// 3D grid (height, width, depth). Storage is depth-major so each axial plane is contiguous.
template <class T>
struct Grid3 {
  int height = 0;
  int width = 0;
  int depth = 0;
  std::vector<T> data;

  Grid3() = default;
  Grid3(int h, int w, int d, T fill = T{})
      : height(h), width(w), depth(d), data(static_cast<std::size_t>(h) * w * d, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t index(int y, int x, int z) const {
    return (static_cast<std::size_t>(z) * height + y) * width + x;
  }
  T& operator()(int y, int x, int z) { return data[index(y, x, z)]; }
  const T& operator()(int y, int x, int z) const { return data[index(y, x, z)]; }
  template <class U>
  bool same_shape(const Grid3<U>& o) const {
    return height == o.height && width == o.width && depth == o.depth;
  }
  bool operator==(const Grid3&) const = default;
};

using Mask2 = Grid2<std::uint8_t>;
using Mask3 = Grid3<std::uint8_t>;

template <class T>
std::size_t count_nonzero(const std::vector<T>& v) {
  return static_cast<std::size_t>(std::count_if(v.begin(), v.end(), [](T x) { return x != T{}; }));
}

}  // namespace incseg
