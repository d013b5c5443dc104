#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

#include "incseg/common.hpp"
#include "incseg/grid.hpp"

namespace incseg {

/// Dense NCHW tensor of Real.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int n, int c, int h, int w, Real fill = 0)
      : n_(n), c_(c), h_(h), w_(w), data_(static_cast<std::size_t>(n) * c * h * w, fill) {}

  int n() const { return n_; }
  int c() const { return c_; }
  int h() const { return h_; }
  int w() const { return w_; }
  std::size_t size() const { return data_.size(); }
  std::size_t plane_size() const { return static_cast<std::size_t>(h_) * w_; }
  std::size_t image_size() const { return static_cast<std::size_t>(c_) * h_ * w_; }

  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }
  Real* image(int i) { return data_.data() + i * image_size(); }
  const Real* image(int i) const { return data_.data() + i * image_size(); }
  Real* plane(int i, int ch) { return image(i) + ch * plane_size(); }
  const Real* plane(int i, int ch) const { return image(i) + ch * plane_size(); }

  Real& at(int i, int ch, int y, int x) { return plane(i, ch)[static_cast<std::size_t>(y) * w_ + x]; }
  Real at(int i, int ch, int y, int x) const { return plane(i, ch)[static_cast<std::size_t>(y) * w_ + x]; }

  std::vector<Real>& values() { return data_; }
  const std::vector<Real>& values() const { return data_; }
  std::span<const Real> span() const { return data_; }

  bool same_shape(const Tensor& o) const { return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_; }
  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }
  bool operator==(const Tensor&) const = default;

 private:
  int n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  std::vector<Real> data_;
};

/// Packs single-channel images into an (N, 1, H, W) batch.
Tensor batch_from_images(std::span<const Grid2<float>* const> images);
Tensor tensor_from_image(const Grid2<float>& image);

}  // namespace incseg
