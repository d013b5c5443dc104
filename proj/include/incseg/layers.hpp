#pragma once

#include <string>
#include <vector>

#include "incseg/rng.hpp"
#include "incseg/tensor.hpp"

namespace incseg {

/// A trainable parameter tensor and its gradient accumulator.
struct Param {
  std::string name;
  std::vector<Real> value;
  std::vector<Real> grad;

  Param() = default;
  Param(std::string n, std::size_t count) : name(std::move(n)), value(count, 0.0), grad(count, 0.0) {}
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

enum class InitScheme {
  he_uniform,      // U(-sqrt(6/fan_in), sqrt(6/fan_in)), for ReLU bodies
  fan_in_uniform,  // U(-1/sqrt(fan_in), 1/sqrt(fan_in)), for heads
};

/// Square-kernel, stride-1, same-padding convolution (kernel 1 or 3).
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int in_channels, int out_channels, int kernel, bool bias);

  void init(Rng& rng, InitScheme scheme);
  void forward(const Tensor& x, Tensor& y) const;
  /// Accumulates parameter gradients; writes dx when non-null.
  void backward(const Tensor& x, const Tensor& dy, Tensor* dx);

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int kernel() const { return k_; }
  bool has_bias() const { return has_bias_; }
  Param& weight() { return weight_; }
  const Param& weight() const { return weight_; }
  Param& bias() { return bias_; }
  const Param& bias() const { return bias_; }

 private:
  int in_ = 0, out_ = 0, k_ = 3;
  bool has_bias_ = false;
  Param weight_;  // (out, in * k * k)
  Param bias_;
};

struct BatchNormCache {
  Tensor xhat;
  std::vector<Real> inv_std;
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(std::string name, int channels, Real momentum = 0.1, Real eps = 1e-5);

  /// Batch statistics; updates running statistics.
  void forward_train(const Tensor& x, Tensor& y, BatchNormCache& cache);
  /// Running statistics. Fills the cache when non-null so it can be backpropagated.
  void forward_eval(const Tensor& x, Tensor& y, BatchNormCache* cache = nullptr) const;
  void backward_train(const Tensor& dy, const BatchNormCache& cache, Tensor& dx);
  void backward_eval(const Tensor& dy, const BatchNormCache& cache, Tensor& dx);

  int channels() const { return channels_; }
  Param& gamma() { return gamma_; }
  Param& beta() { return beta_; }
  const Param& gamma() const { return gamma_; }
  const Param& beta() const { return beta_; }
  std::vector<Real>& running_mean() { return running_mean_; }
  std::vector<Real>& running_var() { return running_var_; }
  const std::vector<Real>& running_mean() const { return running_mean_; }
  const std::vector<Real>& running_var() const { return running_var_; }

 private:
  int channels_ = 0;
  Real momentum_ = 0.1;
  Real eps_ = 1e-5;
  Param gamma_, beta_;
  std::vector<Real> running_mean_, running_var_;
};

void relu_forward(Tensor& x);
/// dy is masked in place by y > 0.
void relu_backward(const Tensor& y, Tensor& dy);

void maxpool2_forward(const Tensor& x, Tensor& y, std::vector<int>* argmax);
void maxpool2_backward(const Tensor& dy, const std::vector<int>& argmax, int in_h, int in_w, Tensor& dx);

void upsample2_forward(const Tensor& x, Tensor& y);
void upsample2_backward(const Tensor& dy, Tensor& dx);

Tensor concat_channels(const Tensor& a, const Tensor& b);
void split_channels(const Tensor& ab, int a_channels, Tensor& da, Tensor& db);

/// Per-(image, channel) scale factors: 0 or 1/(1-rate).
std::vector<Real> sample_spatial_dropout(int n, int c, Real rate, Rng& rng);
void apply_channel_scale(Tensor& x, const std::vector<Real>& scale);

/// Two-channel softmax per pixel (channel 0 foreground, 1 background).
Tensor softmax2(const Tensor& logits, Real temperature = 1.0);

}  // namespace incseg
