#include "incseg/layers.hpp"

#include <Eigen/Core>

#include <cmath>
#include <limits>

namespace incseg {

using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

Tensor batch_from_images(std::span<const Grid2<float>* const> images) {
  if (images.empty()) throw Error("empty image batch");
  const int h = images.front()->height;
  const int w = images.front()->width;
  Tensor t(static_cast<int>(images.size()), 1, h, w);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->height != h || images[i]->width != w) throw Error("images in a batch differ in shape");
    std::copy(images[i]->data.begin(), images[i]->data.end(), t.image(static_cast<int>(i)));
  }
  return t;
}

Tensor tensor_from_image(const Grid2<float>& image) {
  const Grid2<float>* p = &image;
  return batch_from_images(std::span<const Grid2<float>* const>(&p, 1));
}

namespace {

// cols has shape (c * 9, h * w); zero padding of one pixel.
void im2col3(const Real* x, int c, int h, int w, Real* cols) {
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int ci = 0; ci < c; ++ci) {
    const Real* src = x + ci * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        Real* dst = cols + (static_cast<std::size_t>(ci) * 9 + ky * 3 + kx) * hw;
        const int dy = ky - 1, dx = kx - 1;
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy;
          Real* row = dst + static_cast<std::size_t>(y) * w;
          if (sy < 0 || sy >= h) {
            std::fill(row, row + w, 0.0);
            continue;
          }
          const Real* srow = src + static_cast<std::size_t>(sy) * w;
          const int x0 = std::max(0, -dx);
          const int x1 = std::min(w, w - dx);
          for (int xx = 0; xx < x0; ++xx) row[xx] = 0.0;
          for (int xx = x0; xx < x1; ++xx) row[xx] = srow[xx + dx];
          for (int xx = x1; xx < w; ++xx) row[xx] = 0.0;
        }
      }
    }
  }
}

void col2im3(const Real* cols, int c, int h, int w, Real* dx) {
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::fill(dx, dx + c * hw, 0.0);
  for (int ci = 0; ci < c; ++ci) {
    Real* dst = dx + ci * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const Real* src = cols + (static_cast<std::size_t>(ci) * 9 + ky * 3 + kx) * hw;
        const int ddy = ky - 1, ddx = kx - 1;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ddy;
          if (sy < 0 || sy >= h) continue;
          const Real* row = src + static_cast<std::size_t>(y) * w;
          Real* drow = dst + static_cast<std::size_t>(sy) * w;
          const int x0 = std::max(0, -ddx);
          const int x1 = std::min(w, w - ddx);
          for (int xx = x0; xx < x1; ++xx) drow[xx + ddx] += row[xx];
        }
      }
    }
  }
}

}  // namespace

Conv2d::Conv2d(std::string name, int in_channels, int out_channels, int kernel, bool bias)
    : in_(in_channels),
      out_(out_channels),
      k_(kernel),
      has_bias_(bias),
      weight_(name + ".weight", static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel),
      bias_(name + ".bias", bias ? static_cast<std::size_t>(out_channels) : 0) {
  if (kernel != 1 && kernel != 3) throw Error("only 1x1 and 3x3 convolutions are supported");
}

void Conv2d::init(Rng& rng, InitScheme scheme) {
  const double fan_in = static_cast<double>(in_) * k_ * k_;
  const double bound = scheme == InitScheme::he_uniform ? std::sqrt(6.0 / fan_in) : 1.0 / std::sqrt(fan_in);
  for (auto& v : weight_.value) v = rng.uniform(-bound, bound);
  std::fill(bias_.value.begin(), bias_.value.end(), 0.0);
}

void Conv2d::forward(const Tensor& x, Tensor& y) const {
  if (x.c() != in_) throw Error("conv " + weight_.name + ": expected " + std::to_string(in_) + " channels, got " + std::to_string(x.c()));
  const int h = x.h(), w = x.w();
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
  const Eigen::Index kdim = static_cast<Eigen::Index>(in_) * k_ * k_;
  if (!(y.n() == x.n() && y.c() == out_ && y.h() == h && y.w() == w)) y = Tensor(x.n(), out_, h, w);
  ConstMatMap wmat(weight_.value.data(), out_, kdim);
  std::vector<Real> cols(k_ == 3 ? static_cast<std::size_t>(kdim * hw) : 0);
  for (int i = 0; i < x.n(); ++i) {
    MatMap out(y.image(i), out_, hw);
    if (k_ == 3) {
      im2col3(x.image(i), in_, h, w, cols.data());
      out.noalias() = wmat * ConstMatMap(cols.data(), kdim, hw);
    } else {
      out.noalias() = wmat * ConstMatMap(x.image(i), kdim, hw);
    }
    if (has_bias_) {
      for (int o = 0; o < out_; ++o) out.row(o).array() += bias_.value[o];
    }
  }
}

void Conv2d::backward(const Tensor& x, const Tensor& dy, Tensor* dx) {
  const int h = x.h(), w = x.w();
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
  const Eigen::Index kdim = static_cast<Eigen::Index>(in_) * k_ * k_;
  ConstMatMap wmat(weight_.value.data(), out_, kdim);
  MatMap dw(weight_.grad.data(), out_, kdim);
  if (dx != nullptr && !dx->same_shape(x)) *dx = Tensor(x.n(), x.c(), h, w);
  std::vector<Real> cols(k_ == 3 ? static_cast<std::size_t>(kdim * hw) : 0);
  std::vector<Real> dcols(k_ == 3 && dx != nullptr ? static_cast<std::size_t>(kdim * hw) : 0);
  for (int i = 0; i < x.n(); ++i) {
    ConstMatMap g(dy.image(i), out_, hw);
    if (has_bias_) {
      for (int o = 0; o < out_; ++o) {
        const Real* row = dy.image(i) + o * hw;
        Real sum = 0;
        for (Eigen::Index k = 0; k < hw; ++k) sum += row[k];
        bias_.grad[o] += sum;
      }
    }
    if (k_ == 3) {
      im2col3(x.image(i), in_, h, w, cols.data());
      dw.noalias() += g * ConstMatMap(cols.data(), kdim, hw).transpose();
      if (dx != nullptr) {
        MatMap(dcols.data(), kdim, hw).noalias() = wmat.transpose() * g;
        col2im3(dcols.data(), in_, h, w, dx->image(i));
      }
    } else {
      dw.noalias() += g * ConstMatMap(x.image(i), kdim, hw).transpose();
      if (dx != nullptr) MatMap(dx->image(i), kdim, hw).noalias() = wmat.transpose() * g;
    }
  }
}

BatchNorm2d::BatchNorm2d(std::string name, int channels, Real momentum, Real eps)
    : channels_(channels),
      momentum_(momentum),
      eps_(eps),
      gamma_(name + ".gamma", channels),
      beta_(name + ".beta", channels),
      running_mean_(channels, 0.0),
      running_var_(channels, 1.0) {
  std::fill(gamma_.value.begin(), gamma_.value.end(), 1.0);
}

void BatchNorm2d::forward_train(const Tensor& x, Tensor& y, BatchNormCache& cache) {
  const int n = x.n();
  const std::size_t hw = x.plane_size();
  const double count = static_cast<double>(n) * hw;
  if (!y.same_shape(x)) y = Tensor(n, x.c(), x.h(), x.w());
  if (!cache.xhat.same_shape(x)) cache.xhat = Tensor(n, x.c(), x.h(), x.w());
  cache.inv_std.assign(channels_, 0.0);
  for (int c = 0; c < channels_; ++c) {
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
      const Real* p = x.plane(i, c);
      for (std::size_t k = 0; k < hw; ++k) sum += p[k];
    }
    const double mean = sum / count;
    double sq = 0.0;
    for (int i = 0; i < n; ++i) {
      const Real* p = x.plane(i, c);
      for (std::size_t k = 0; k < hw; ++k) sq += (p[k] - mean) * (p[k] - mean);
    }
    const double var = sq / count;
    const double inv_std = 1.0 / std::sqrt(var + eps_);
    cache.inv_std[c] = inv_std;
    const Real g = gamma_.value[c], b = beta_.value[c];
    for (int i = 0; i < n; ++i) {
      const Real* p = x.plane(i, c);
      Real* xh = cache.xhat.plane(i, c);
      Real* q = y.plane(i, c);
      for (std::size_t k = 0; k < hw; ++k) {
        xh[k] = (p[k] - mean) * inv_std;
        q[k] = g * xh[k] + b;
      }
    }
    const double unbiased = count > 1 ? sq / (count - 1) : var;
    running_mean_[c] = (1 - momentum_) * running_mean_[c] + momentum_ * mean;
    running_var_[c] = (1 - momentum_) * running_var_[c] + momentum_ * unbiased;
  }
}

void BatchNorm2d::forward_eval(const Tensor& x, Tensor& y, BatchNormCache* cache) const {
  const int n = x.n();
  const std::size_t hw = x.plane_size();
  if (!y.same_shape(x)) y = Tensor(n, x.c(), x.h(), x.w());
  if (cache != nullptr) {
    if (!cache->xhat.same_shape(x)) cache->xhat = Tensor(n, x.c(), x.h(), x.w());
    cache->inv_std.assign(channels_, 0.0);
  }
  for (int c = 0; c < channels_; ++c) {
    const Real inv_std = 1.0 / std::sqrt(running_var_[c] + eps_);
    const Real mean = running_mean_[c];
    const Real g = gamma_.value[c], b = beta_.value[c];
    if (cache != nullptr) cache->inv_std[c] = inv_std;
    for (int i = 0; i < n; ++i) {
      const Real* p = x.plane(i, c);
      Real* q = y.plane(i, c);
      Real* xh = cache != nullptr ? cache->xhat.plane(i, c) : nullptr;
      for (std::size_t k = 0; k < hw; ++k) {
        const Real v = (p[k] - mean) * inv_std;
        if (xh != nullptr) xh[k] = v;
        q[k] = g * v + b;
      }
    }
  }
}

void BatchNorm2d::backward_train(const Tensor& dy, const BatchNormCache& cache, Tensor& dx) {
  const int n = dy.n();
  const std::size_t hw = dy.plane_size();
  const double count = static_cast<double>(n) * hw;
  if (!dx.same_shape(dy)) dx = Tensor(n, dy.c(), dy.h(), dy.w());
  for (int c = 0; c < channels_; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int i = 0; i < n; ++i) {
      const Real* g = dy.plane(i, c);
      const Real* xh = cache.xhat.plane(i, c);
      for (std::size_t k = 0; k < hw; ++k) {
        sum_dy += g[k];
        sum_dy_xhat += g[k] * xh[k];
      }
    }
    gamma_.grad[c] += sum_dy_xhat;
    beta_.grad[c] += sum_dy;
    const double scale = gamma_.value[c] * cache.inv_std[c] / count;
    for (int i = 0; i < n; ++i) {
      const Real* g = dy.plane(i, c);
      const Real* xh = cache.xhat.plane(i, c);
      Real* d = dx.plane(i, c);
      for (std::size_t k = 0; k < hw; ++k) d[k] = scale * (count * g[k] - sum_dy - xh[k] * sum_dy_xhat);
    }
  }
}

void BatchNorm2d::backward_eval(const Tensor& dy, const BatchNormCache& cache, Tensor& dx) {
  const int n = dy.n();
  const std::size_t hw = dy.plane_size();
  if (!dx.same_shape(dy)) dx = Tensor(n, dy.c(), dy.h(), dy.w());
  for (int c = 0; c < channels_; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    const Real scale = gamma_.value[c] * cache.inv_std[c];
    for (int i = 0; i < n; ++i) {
      const Real* g = dy.plane(i, c);
      const Real* xh = cache.xhat.plane(i, c);
      Real* d = dx.plane(i, c);
      for (std::size_t k = 0; k < hw; ++k) {
        sum_dy += g[k];
        sum_dy_xhat += g[k] * xh[k];
        d[k] = scale * g[k];
      }
    }
    gamma_.grad[c] += sum_dy_xhat;
    beta_.grad[c] += sum_dy;
  }
}

void relu_forward(Tensor& x) {
  for (auto& v : x.values()) v = v > 0 ? v : 0.0;
}

void relu_backward(const Tensor& y, Tensor& dy) {
  auto& g = dy.values();
  const auto& out = y.values();
  for (std::size_t k = 0; k < g.size(); ++k) {
    if (!(out[k] > 0)) g[k] = 0.0;
  }
}

void maxpool2_forward(const Tensor& x, Tensor& y, std::vector<int>* argmax) {
  if (x.h() % 2 != 0 || x.w() % 2 != 0) throw Error("max-pool input must have even spatial size");
  const int oh = x.h() / 2, ow = x.w() / 2;
  y = Tensor(x.n(), x.c(), oh, ow);
  if (argmax != nullptr) argmax->assign(y.size(), 0);
  std::size_t o = 0;
  for (int i = 0; i < x.n(); ++i) {
    for (int c = 0; c < x.c(); ++c) {
      const Real* p = x.plane(i, c);
      for (int yy = 0; yy < oh; ++yy) {
        for (int xx = 0; xx < ow; ++xx, ++o) {
          int best = (2 * yy) * x.w() + 2 * xx;
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const int idx = (2 * yy + dy) * x.w() + 2 * xx + dx;
              if (p[idx] > p[best]) best = idx;
            }
          }
          y.data()[o] = p[best];
          if (argmax != nullptr) (*argmax)[o] = best;
        }
      }
    }
  }
}

void maxpool2_backward(const Tensor& dy, const std::vector<int>& argmax, int in_h, int in_w, Tensor& dx) {
  dx = Tensor(dy.n(), dy.c(), in_h, in_w);
  std::size_t o = 0;
  for (int i = 0; i < dy.n(); ++i) {
    for (int c = 0; c < dy.c(); ++c) {
      Real* d = dx.plane(i, c);
      const Real* g = dy.plane(i, c);
      for (std::size_t k = 0; k < dy.plane_size(); ++k, ++o) d[argmax[o]] += g[k];
    }
  }
}

void upsample2_forward(const Tensor& x, Tensor& y) {
  const int oh = x.h() * 2, ow = x.w() * 2;
  y = Tensor(x.n(), x.c(), oh, ow);
  for (int i = 0; i < x.n(); ++i) {
    for (int c = 0; c < x.c(); ++c) {
      const Real* p = x.plane(i, c);
      Real* q = y.plane(i, c);
      for (int yy = 0; yy < oh; ++yy) {
        for (int xx = 0; xx < ow; ++xx) q[yy * ow + xx] = p[(yy / 2) * x.w() + xx / 2];
      }
    }
  }
}

void upsample2_backward(const Tensor& dy, Tensor& dx) {
  const int ih = dy.h() / 2, iw = dy.w() / 2;
  dx = Tensor(dy.n(), dy.c(), ih, iw);
  for (int i = 0; i < dy.n(); ++i) {
    for (int c = 0; c < dy.c(); ++c) {
      const Real* g = dy.plane(i, c);
      Real* d = dx.plane(i, c);
      for (int yy = 0; yy < dy.h(); ++yy) {
        for (int xx = 0; xx < dy.w(); ++xx) d[(yy / 2) * iw + xx / 2] += g[yy * dy.w() + xx];
      }
    }
  }
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w()) throw Error("concat: incompatible tensors");
  Tensor out(a.n(), a.c() + b.c(), a.h(), a.w());
  for (int i = 0; i < a.n(); ++i) {
    std::copy(a.image(i), a.image(i) + a.image_size(), out.image(i));
    std::copy(b.image(i), b.image(i) + b.image_size(), out.image(i) + a.image_size());
  }
  return out;
}

void split_channels(const Tensor& ab, int a_channels, Tensor& da, Tensor& db) {
  const int b_channels = ab.c() - a_channels;
  da = Tensor(ab.n(), a_channels, ab.h(), ab.w());
  db = Tensor(ab.n(), b_channels, ab.h(), ab.w());
  for (int i = 0; i < ab.n(); ++i) {
    std::copy(ab.image(i), ab.image(i) + da.image_size(), da.image(i));
    std::copy(ab.image(i) + da.image_size(), ab.image(i) + ab.image_size(), db.image(i));
  }
}

std::vector<Real> sample_spatial_dropout(int n, int c, Real rate, Rng& rng) {
  std::vector<Real> scale(static_cast<std::size_t>(n) * c, 1.0);
  if (rate <= 0) return scale;
  const Real keep = 1.0 / (1.0 - rate);
  for (auto& s : scale) s = rng.uniform() < rate ? 0.0 : keep;
  return scale;
}

void apply_channel_scale(Tensor& x, const std::vector<Real>& scale) {
  for (int i = 0; i < x.n(); ++i) {
    for (int c = 0; c < x.c(); ++c) {
      const Real s = scale[static_cast<std::size_t>(i) * x.c() + c];
      if (s == 1.0) continue;
      Real* p = x.plane(i, c);
      for (std::size_t k = 0; k < x.plane_size(); ++k) p[k] *= s;
    }
  }
}

Tensor softmax2(const Tensor& logits, Real temperature) {
  if (logits.c() != 2) throw Error("softmax2 expects two channels");
  Tensor out(logits.n(), 2, logits.h(), logits.w());
  for (int i = 0; i < logits.n(); ++i) {
    const Real* zf = logits.plane(i, 0);
    const Real* zb = logits.plane(i, 1);
    Real* pf = out.plane(i, 0);
    Real* pb = out.plane(i, 1);
    for (std::size_t k = 0; k < logits.plane_size(); ++k) {
      const Real a = zf[k] / temperature, b = zb[k] / temperature;
      const Real m = std::max(a, b);
      const Real ea = std::exp(a - m), eb = std::exp(b - m);
      const Real s = ea + eb;
      pf[k] = ea / s;
      pb[k] = eb / s;
    }
  }
  return out;
}

}  // namespace incseg
