#include "segreg/nn/layers.hpp"

#include <cmath>
#include <functional>
#include <numeric>

namespace segreg::nn {

Parameter::Parameter(std::string n, std::vector<int> s, float fill) : name(std::move(n)), shape(std::move(s)) {
  const auto count = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  value.assign(count, fill);
  grad.assign(count, 0.0f);
}

Conv2d::Conv2d(const std::string& name, int in_channels, int out_channels, int kernel, std::mt19937_64& rng,
               bool zero_init)
    : in_(in_channels), out_(out_channels), kernel_(kernel),
      weight_(name + ".weight", {out_channels, in_channels, kernel, kernel}),
      bias_(name + ".bias", {out_channels}) {
  if (zero_init) return;
  // He initialisation for leaky-ReLU nets.
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / (in_channels * kernel * kernel)));
  for (float& w : weight_.value) w = static_cast<float>(normal(rng));
}

Tensor Conv2d::forward(const Tensor& x) {
  require(x.channels() == in_, "Conv2d " + weight_.name + ": input channel mismatch");
  input_ = x;
  return conv2d_forward(x, weight_.value, bias_.value, out_, kernel_);
}

Tensor Conv2d::backward(const Tensor& grad_y, bool need_input_grad) {
  return conv2d_backward(input_, weight_.value, out_, kernel_, grad_y, weight_.grad, bias_.grad, need_input_grad);
}

InstanceNorm::InstanceNorm(const std::string& name, int channels)
    : gamma_(name + ".gamma", {channels}, 1.0f), beta_(name + ".beta", {channels}) {}

Tensor InstanceNorm::forward(const Tensor& x) { return instance_norm_forward(x, gamma_.value, beta_.value, &cache_); }

Tensor InstanceNorm::backward(const Tensor& grad_y) {
  return instance_norm_backward(cache_, gamma_.value, grad_y, gamma_.grad, beta_.grad);
}

ResBlock::ResBlock(const std::string& name, int in_channels, int out_channels, std::mt19937_64& rng)
    : conv1_(name + ".conv1", in_channels, out_channels, 3, rng),
      conv2_(name + ".conv2", out_channels, out_channels, 3, rng),
      norm1_(name + ".norm1", out_channels),
      norm2_(name + ".norm2", out_channels),
      has_proj_(in_channels != out_channels) {
  if (has_proj_) proj_ = Conv2d(name + ".proj", in_channels, out_channels, 1, rng);
}

Tensor ResBlock::forward(const Tensor& x) {
  pre_act1_ = norm1_.forward(conv1_.forward(x));
  Tensor h = norm2_.forward(conv2_.forward(leaky_relu_forward(pre_act1_, kLeakySlope)));
  add_inplace(h, has_proj_ ? proj_.forward(x) : x);
  pre_out_ = std::move(h);
  return leaky_relu_forward(pre_out_, kLeakySlope);
}

Tensor ResBlock::backward(const Tensor& grad_y) {
  const Tensor g = leaky_relu_backward(pre_out_, kLeakySlope, grad_y);
  Tensor gx = has_proj_ ? proj_.backward(g) : g;
  Tensor gh = conv2_.backward(norm2_.backward(g));
  gh = leaky_relu_backward(pre_act1_, kLeakySlope, gh);
  add_inplace(gx, conv1_.backward(norm1_.backward(gh)));
  return gx;
}

void ResBlock::collect(std::vector<Parameter*>& out) {
  conv1_.collect(out);
  norm1_.collect(out);
  conv2_.collect(out);
  norm2_.collect(out);
  if (has_proj_) proj_.collect(out);
}

void Adam::step(const std::vector<Parameter*>& params) {
  if (m_.empty()) {
    for (const Parameter* p : params) {
      m_.emplace_back(p->size(), 0.0f);
      v_.emplace_back(p->size(), 0.0f);
    }
  }
  require(m_.size() == params.size(), "Adam: parameter list changed between steps");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const float step = static_cast<float>(lr_ * std::sqrt(c2) / c1);
  const float b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_), eps = static_cast<float>(eps_);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    float* m = m_[k].data();
    float* v = v_[k].data();
    const float* g = p.grad.data();
    float* w = p.value.data();
    const std::size_t n = p.size();
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      w[i] -= step * m[i] / (std::sqrt(v[i]) + eps);
    }
  }
}

void zero_grads(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) p->zero_grad();
}

void scale_grads(const std::vector<Parameter*>& params, float factor) {
  for (Parameter* p : params) {
    for (float& g : p->grad) g *= factor;
  }
}

}  // namespace segreg::nn
