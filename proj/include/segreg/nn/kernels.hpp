#pragma once

#include <span>
#include <vector>

#include "segreg/grid.hpp"

/// Dense CHW kernels for single-sample feature maps. A feature map is a
/// Grid<float> whose channel count is the feature depth.
namespace segreg::nn {

using Tensor = Grid<float>;

/// Same-padded stride-1 convolution. `weight` is laid out
/// [out][in][ky][kx]; `bias` has one entry per output channel.
Tensor conv2d_forward(const Tensor& x, std::span<const float> weight, std::span<const float> bias, int out_channels,
                      int kernel);

/// Accumulates into grad_weight / grad_bias; returns dL/dx (or an empty
/// tensor when `need_input_grad` is false).
Tensor conv2d_backward(const Tensor& x, std::span<const float> weight, int out_channels, int kernel,
                       const Tensor& grad_y, std::span<float> grad_weight, std::span<float> grad_bias,
                       bool need_input_grad = true);

struct InstanceNormCache {
  Tensor normalized;
  std::vector<float> inv_std;
};

Tensor instance_norm_forward(const Tensor& x, std::span<const float> gamma, std::span<const float> beta,
                             InstanceNormCache* cache);
Tensor instance_norm_backward(const InstanceNormCache& cache, std::span<const float> gamma, const Tensor& grad_y,
                              std::span<float> grad_gamma, std::span<float> grad_beta);

Tensor leaky_relu_forward(const Tensor& x, float slope);
Tensor leaky_relu_backward(const Tensor& x, float slope, const Tensor& grad_y);

/// 2x2 max pooling; `argmax` receives the flat source index per output.
Tensor max_pool2x_forward(const Tensor& x, std::vector<int>* argmax);
Tensor max_pool2x_backward(const Tensor& x_shape_like, const std::vector<int>& argmax, const Tensor& grad_y);

Tensor sigmoid_forward(const Tensor& x);
Tensor sigmoid_backward(const Tensor& y, const Tensor& grad_y);

Tensor concat_channels(const Tensor& a, const Tensor& b);
/// Splits a gradient of concat(a, b) back into its two parts.
std::pair<Tensor, Tensor> split_channels(const Tensor& g, int first_channels);

void add_inplace(Tensor& a, const Tensor& b);

namespace reference {
// Direct serial loops; test oracles for the kernels above.
Tensor conv2d_forward(const Tensor& x, std::span<const float> weight, std::span<const float> bias, int out_channels,
                      int kernel);
Tensor conv2d_backward(const Tensor& x, std::span<const float> weight, int out_channels, int kernel,
                       const Tensor& grad_y, std::span<float> grad_weight, std::span<float> grad_bias);
Tensor instance_norm_forward(const Tensor& x, std::span<const float> gamma, std::span<const float> beta);
}  // namespace reference

}  // namespace segreg::nn
