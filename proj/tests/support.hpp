#pragma once

#include <cmath>
#include <filesystem>
#include <string>

#include "incseg/dataset.hpp"
#include "incseg/network.hpp"
#include "incseg/rng.hpp"

namespace incseg::testing {

/// Smallest network shape: two levels, one filter, one conv per level (77 parameters with one head).
inline NetworkConfig toy_config(int size = 8) {
  NetworkConfig c;
  c.levels = 2;
  c.base_filters = 1;
  c.convs_per_level = 1;
  c.dropout_rate = 0.3;
  c.input_height = size;
  c.input_width = size;
  return c;
}

inline NetworkConfig small_config(int size = 16) {
  NetworkConfig c;
  c.levels = 2;
  c.base_filters = 4;
  c.convs_per_level = 1;
  c.dropout_rate = 0.3;
  c.input_height = size;
  c.input_width = size;
  return c;
}

inline Grid2<float> random_image(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  Grid2<float> g(h, w);
  for (auto& v : g.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return g;
}

/// Square blob of class 1 at a random location, intensity 1 on 0 background plus noise.
inline ImageSample blob_sample(int size, std::uint64_t seed, const std::string& volume, int slice) {
  Rng rng(seed);
  ImageSample s;
  s.image = Grid2<float>(size, size);
  Mask2 m(size, size);
  const int half = std::max(1, size / 6);
  const int cy = rng.uniform_int(half, size - half - 1);
  const int cx = rng.uniform_int(half, size - half - 1);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const bool in = std::abs(y - cy) <= half && std::abs(x - cx) <= half;
      m(y, x) = in ? 1 : 0;
      s.image(y, x) = static_cast<float>((in ? 1.0 : 0.0) + 0.05 * rng.normal());
    }
  }
  s.masks[ClassId{1}] = m;
  s.provenance = {volume, slice};
  return s;
}

inline LabeledDataset blob_dataset(int n, int size, std::uint64_t seed) {
  LabeledDataset d;
  d.registry.add(ClassId{1}, "blob", 0);
  for (int i = 0; i < n; ++i) d.samples.push_back(blob_sample(size, derive_seed(seed, static_cast<std::uint64_t>(i)), "v" + std::to_string(i / 10), i % 10));
  return d;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("incseg_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline Real max_abs_diff(const Tensor& a, const Tensor& b) {
  Real m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace incseg::testing
