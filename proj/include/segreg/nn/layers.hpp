#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "segreg/nn/kernels.hpp"

namespace segreg::nn {

struct Parameter {
  std::string name;
  std::vector<int> shape;
  std::vector<float> value;
  std::vector<float> grad;

  Parameter() = default;
  Parameter(std::string n, std::vector<int> s, float fill = 0.0f);
  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0f); }
};

inline constexpr float kLeakySlope = 0.01f;

/// Conv layer caching its input for the backward pass.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, int in_channels, int out_channels, int kernel, std::mt19937_64& rng,
         bool zero_init = false);

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_y, bool need_input_grad = true);
  void collect(std::vector<Parameter*>& out) { out.push_back(&weight_); out.push_back(&bias_); }

  int out_channels() const { return out_; }

 private:
  int in_ = 0, out_ = 0, kernel_ = 1;
  Parameter weight_, bias_;
  Tensor input_;
};

class InstanceNorm {
 public:
  InstanceNorm() = default;
  InstanceNorm(const std::string& name, int channels);

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_y);
  void collect(std::vector<Parameter*>& out) { out.push_back(&gamma_); out.push_back(&beta_); }

 private:
  Parameter gamma_, beta_;
  InstanceNormCache cache_;
};

/// conv3x3 -> IN -> LReLU -> conv3x3 -> IN, plus a shortcut (identity when
/// the widths agree, 1x1 projection otherwise), then LReLU.
class ResBlock {
 public:
  ResBlock() = default;
  ResBlock(const std::string& name, int in_channels, int out_channels, std::mt19937_64& rng);

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_y);
  void collect(std::vector<Parameter*>& out);

  int out_channels() const { return conv1_.out_channels(); }

 private:
  Conv2d conv1_, conv2_, proj_;
  InstanceNorm norm1_, norm2_;
  bool has_proj_ = false;
  Tensor pre_act1_, pre_out_;
};

/// Adam with bias correction; moment buffers keyed by parameter order.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<Parameter*>& params);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  std::int64_t steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

void zero_grads(const std::vector<Parameter*>& params);
void scale_grads(const std::vector<Parameter*>& params, float factor);

}  // namespace segreg::nn
