#include "segreg/nn/kernels.hpp"

#include <Eigen/Core>
#include <cmath>

namespace segreg::nn {
namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using StridedRows = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedRows = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

constexpr int kChunkPixels = 4096;

int rows_per_chunk(int cols) { return std::max(1, kChunkPixels / std::max(1, cols)); }

/// Unfolds output rows [r0, r1) into a (C*k*k) x ((r1-r0)*W) column matrix.
void im2col(const Tensor& x, int kernel, int r0, int r1, RowMat& col) {
  const int ch = x.channels(), rows = x.rows(), cols = x.cols(), pad = kernel / 2;
  const int n = (r1 - r0) * cols;
  col.resize(static_cast<Eigen::Index>(ch) * kernel * kernel, n);
#pragma omp parallel for schedule(static)
  for (int row = 0; row < ch * kernel * kernel; ++row) {
    const int ci = row / (kernel * kernel), ky = (row / kernel) % kernel, kx = row % kernel;
    const auto plane = x.plane(ci);
    float* dst = col.data() + static_cast<std::size_t>(row) * n;
    for (int r = r0; r < r1; ++r) {
      const int ir = r + ky - pad;
      float* d = dst + static_cast<std::size_t>(r - r0) * cols;
      if (ir < 0 || ir >= rows) {
        std::fill(d, d + cols, 0.0f);
        continue;
      }
      const float* src = plane.data() + static_cast<std::size_t>(ir) * cols;
      for (int c = 0; c < cols; ++c) {
        const int ic = c + kx - pad;
        d[c] = (ic < 0 || ic >= cols) ? 0.0f : src[ic];
      }
    }
  }
}

void col2im_add(const RowMat& col, int kernel, int r0, int r1, Tensor& gx) {
  const int ch = gx.channels(), rows = gx.rows(), cols = gx.cols(), pad = kernel / 2;
  const int n = (r1 - r0) * cols;
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < ch; ++ci) {
    auto plane = gx.plane(ci);
    for (int kk = 0; kk < kernel * kernel; ++kk) {
      const int ky = kk / kernel, kx = kk % kernel;
      const float* src = col.data() + static_cast<std::size_t>(ci * kernel * kernel + kk) * n;
      for (int r = r0; r < r1; ++r) {
        const int ir = r + ky - pad;
        if (ir < 0 || ir >= rows) continue;
        float* d = plane.data() + static_cast<std::size_t>(ir) * cols;
        const float* s = src + static_cast<std::size_t>(r - r0) * cols;
        for (int c = 0; c < cols; ++c) {
          const int ic = c + kx - pad;
          if (ic >= 0 && ic < cols) d[ic] += s[c];
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d_forward(const Tensor& x, std::span<const float> weight, std::span<const float> bias, int out_channels,
                      int kernel) {
  const int k2 = x.channels() * kernel * kernel;
  require(kernel % 2 == 1, "conv2d: kernel must be odd");
  require(weight.size() == static_cast<std::size_t>(out_channels) * k2, "conv2d: weight size mismatch");
  require(bias.size() == static_cast<std::size_t>(out_channels), "conv2d: bias size mismatch");
  const int rows = x.rows(), cols = x.cols();
  const Eigen::Index hw = static_cast<Eigen::Index>(rows) * cols;
  Tensor y(rows, cols, out_channels);
  Eigen::Map<const RowMat> w(weight.data(), out_channels, k2);
  RowMat col;
  const int step = rows_per_chunk(cols);
  for (int r0 = 0; r0 < rows; r0 += step) {
    const int r1 = std::min(rows, r0 + step);
    im2col(x, kernel, r0, r1, col);
    StridedRows out(y.values().data() + static_cast<std::size_t>(r0) * cols, out_channels, col.cols(),
                    Eigen::OuterStride<>(hw));
    out.noalias() = w * col;
  }
#pragma omp parallel for schedule(static)
  for (int co = 0; co < out_channels; ++co) {
    for (float& v : y.plane(co)) v += bias[co];
  }
  return y;
}

Tensor conv2d_backward(const Tensor& x, std::span<const float> weight, int out_channels, int kernel,
                       const Tensor& grad_y, std::span<float> grad_weight, std::span<float> grad_bias,
                       bool need_input_grad) {
  const int k2 = x.channels() * kernel * kernel;
  require(grad_y.channels() == out_channels && grad_y.same_extent(x), "conv2d_backward: gradient shape mismatch");
  require(grad_weight.size() == weight.size() && grad_bias.size() == static_cast<std::size_t>(out_channels),
          "conv2d_backward: gradient buffer size mismatch");
  const int rows = x.rows(), cols = x.cols();
  const Eigen::Index hw = static_cast<Eigen::Index>(rows) * cols;
  Eigen::Map<const RowMat> w(weight.data(), out_channels, k2);
  Eigen::Map<RowMat> gw(grad_weight.data(), out_channels, k2);
  Tensor gx;
  if (need_input_grad) gx = Tensor(rows, cols, x.channels());

#pragma omp parallel for schedule(static)
  for (int co = 0; co < out_channels; ++co) {
    double s = 0;
    for (float v : grad_y.plane(co)) s += v;
    grad_bias[co] += static_cast<float>(s);
  }

  RowMat col, gcol;
  const int step = rows_per_chunk(cols);
  for (int r0 = 0; r0 < rows; r0 += step) {
    const int r1 = std::min(rows, r0 + step);
    im2col(x, kernel, r0, r1, col);
    ConstStridedRows gy(grad_y.values().data() + static_cast<std::size_t>(r0) * cols, out_channels, col.cols(),
                        Eigen::OuterStride<>(hw));
    gw.noalias() += gy * col.transpose();
    if (need_input_grad) {
      gcol.noalias() = w.transpose() * gy;
      col2im_add(gcol, kernel, r0, r1, gx);
    }
  }
  return gx;
}

Tensor instance_norm_forward(const Tensor& x, std::span<const float> gamma, std::span<const float> beta,
                             InstanceNormCache* cache) {
  const int ch = x.channels();
  require(gamma.size() == static_cast<std::size_t>(ch) && beta.size() == gamma.size(),
          "instance_norm: parameter size mismatch");
  constexpr double eps = 1e-5;
  Tensor y(x.rows(), x.cols(), ch);
  if (cache) {
    cache->normalized = Tensor(x.rows(), x.cols(), ch);
    cache->inv_std.assign(ch, 0.0f);
  }
  const double n = static_cast<double>(x.plane_size());
#pragma omp parallel for schedule(static)
  for (int c = 0; c < ch; ++c) {
    const auto in = x.plane(c);
    double mean = 0;
    for (float v : in) mean += v;
    mean /= n;
    double var = 0;
    for (float v : in) var += (v - mean) * (v - mean);
    var /= n;
    const float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
    const float m = static_cast<float>(mean);
    auto out = y.plane(c);
    for (std::size_t i = 0; i < in.size(); ++i) {
      const float xh = (in[i] - m) * inv;
      if (cache) cache->normalized.plane(c)[i] = xh;
      out[i] = gamma[c] * xh + beta[c];
    }
    if (cache) cache->inv_std[c] = inv;
  }
  return y;
}

Tensor instance_norm_backward(const InstanceNormCache& cache, std::span<const float> gamma, const Tensor& grad_y,
                              std::span<float> grad_gamma, std::span<float> grad_beta) {
  const Tensor& xh = cache.normalized;
  require(grad_y.same_shape(xh), "instance_norm_backward: gradient shape mismatch");
  Tensor gx(xh.rows(), xh.cols(), xh.channels());
  const double n = static_cast<double>(xh.plane_size());
#pragma omp parallel for schedule(static)
  for (int c = 0; c < xh.channels(); ++c) {
    const auto g = grad_y.plane(c), h = xh.plane(c);
    double sg = 0, sgh = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      sg += g[i];
      sgh += double(g[i]) * h[i];
    }
    grad_gamma[c] += static_cast<float>(sgh);
    grad_beta[c] += static_cast<float>(sg);
    // with gxh = g * gamma: gx = inv/n * (n*gxh - sum(gxh) - xh*sum(gxh*xh))
    const double scale = gamma[c] * cache.inv_std[c] / n;
    auto out = gx.plane(c);
    for (std::size_t i = 0; i < g.size(); ++i) {
      out[i] = static_cast<float>(scale * (n * g[i] - sg - h[i] * sgh));
    }
  }
  return gx;
}

Tensor leaky_relu_forward(const Tensor& x, float slope) {
  Tensor y = x;
  auto v = y.values();
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] < 0.0f) v[i] *= slope;
  }
  return y;
}

Tensor leaky_relu_backward(const Tensor& x, float slope, const Tensor& grad_y) {
  Tensor g = grad_y;
  auto gv = g.values();
  const auto xv = x.values();
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < gv.size(); ++i) {
    if (xv[i] < 0.0f) gv[i] *= slope;
  }
  return g;
}

Tensor max_pool2x_forward(const Tensor& x, std::vector<int>* argmax) {
  require(x.rows() % 2 == 0 && x.cols() % 2 == 0, "max_pool2x: odd spatial size");
  const int hr = x.rows() / 2, hc = x.cols() / 2, cols = x.cols();
  Tensor y(hr, hc, x.channels());
  if (argmax) argmax->assign(y.size(), 0);
#pragma omp parallel for schedule(static)
  for (int ch = 0; ch < x.channels(); ++ch) {
    const auto in = x.plane(ch);
    auto out = y.plane(ch);
    for (int r = 0; r < hr; ++r) {
      for (int c = 0; c < hc; ++c) {
        int best = 2 * r * cols + 2 * c;
        for (int idx : {2 * r * cols + 2 * c + 1, (2 * r + 1) * cols + 2 * c, (2 * r + 1) * cols + 2 * c + 1}) {
          if (in[idx] > in[best]) best = idx;
        }
        const std::size_t o = static_cast<std::size_t>(r) * hc + c;
        out[o] = in[best];
        if (argmax) (*argmax)[ch * y.plane_size() + o] = best;
      }
    }
  }
  return y;
}

Tensor max_pool2x_backward(const Tensor& x_shape_like, const std::vector<int>& argmax, const Tensor& grad_y) {
  Tensor gx(x_shape_like.rows(), x_shape_like.cols(), x_shape_like.channels());
  require(argmax.size() == grad_y.size(), "max_pool2x_backward: argmax size mismatch");
#pragma omp parallel for schedule(static)
  for (int ch = 0; ch < grad_y.channels(); ++ch) {
    const auto g = grad_y.plane(ch);
    auto out = gx.plane(ch);
    for (std::size_t o = 0; o < g.size(); ++o) out[argmax[ch * grad_y.plane_size() + o]] += g[o];
  }
  return gx;
}

Tensor sigmoid_forward(const Tensor& x) {
  Tensor y = x;
  for (float& v : y.values()) v = 1.0f / (1.0f + std::exp(-v));
  return y;
}

Tensor sigmoid_backward(const Tensor& y, const Tensor& grad_y) {
  Tensor g = grad_y;
  auto gv = g.values();
  const auto yv = y.values();
  for (std::size_t i = 0; i < gv.size(); ++i) gv[i] *= yv[i] * (1.0f - yv[i]);
  return g;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require(a.same_extent(b), "concat_channels: spatial size mismatch");
  Tensor out(a.rows(), a.cols(), a.channels() + b.channels());
  std::copy(a.values().begin(), a.values().end(), out.values().begin());
  std::copy(b.values().begin(), b.values().end(), out.values().begin() + a.size());
  return out;
}

std::pair<Tensor, Tensor> split_channels(const Tensor& g, int first_channels) {
  require(first_channels > 0 && first_channels < g.channels(), "split_channels: bad split");
  Tensor a(g.rows(), g.cols(), first_channels), b(g.rows(), g.cols(), g.channels() - first_channels);
  std::copy(g.values().begin(), g.values().begin() + a.size(), a.values().begin());
  std::copy(g.values().begin() + a.size(), g.values().end(), b.values().begin());
  return {std::move(a), std::move(b)};
}

void add_inplace(Tensor& a, const Tensor& b) {
  require(a.same_shape(b), "add_inplace: shape mismatch");
  auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) av[i] += bv[i];
}

namespace reference {

Tensor conv2d_forward(const Tensor& x, std::span<const float> weight, std::span<const float> bias, int out_channels,
                      int kernel) {
  const int pad = kernel / 2;
  Tensor y(x.rows(), x.cols(), out_channels);
  for (int co = 0; co < out_channels; ++co) {
    for (int r = 0; r < x.rows(); ++r) {
      for (int c = 0; c < x.cols(); ++c) {
        double acc = bias[co];
        for (int ci = 0; ci < x.channels(); ++ci) {
          for (int ky = 0; ky < kernel; ++ky) {
            for (int kx = 0; kx < kernel; ++kx) {
              const int ir = r + ky - pad, ic = c + kx - pad;
              if (ir < 0 || ir >= x.rows() || ic < 0 || ic >= x.cols()) continue;
              acc += double(weight[((co * x.channels() + ci) * kernel + ky) * kernel + kx]) * x(ir, ic, ci);
            }
          }
        }
        y(r, c, co) = static_cast<float>(acc);
      }
    }
  }
  return y;
}

Tensor conv2d_backward(const Tensor& x, std::span<const float> weight, int out_channels, int kernel,
                       const Tensor& grad_y, std::span<float> grad_weight, std::span<float> grad_bias) {
  const int pad = kernel / 2;
  Tensor gx(x.rows(), x.cols(), x.channels());
  for (int co = 0; co < out_channels; ++co) {
    for (int r = 0; r < x.rows(); ++r) {
      for (int c = 0; c < x.cols(); ++c) {
        const float g = grad_y(r, c, co);
        grad_bias[co] += g;
        for (int ci = 0; ci < x.channels(); ++ci) {
          for (int ky = 0; ky < kernel; ++ky) {
            for (int kx = 0; kx < kernel; ++kx) {
              const int ir = r + ky - pad, ic = c + kx - pad;
              if (ir < 0 || ir >= x.rows() || ic < 0 || ic >= x.cols()) continue;
              const std::size_t wi = ((co * x.channels() + ci) * kernel + ky) * kernel + kx;
              grad_weight[wi] += g * x(ir, ic, ci);
              gx(ir, ic, ci) += g * weight[wi];
            }
          }
        }
      }
    }
  }
  return gx;
}

Tensor instance_norm_forward(const Tensor& x, std::span<const float> gamma, std::span<const float> beta) {
  Tensor y(x.rows(), x.cols(), x.channels());
  for (int c = 0; c < x.channels(); ++c) {
    double mean = 0, sq = 0;
    for (float v : x.plane(c)) mean += v;
    mean /= x.plane_size();
    for (float v : x.plane(c)) sq += (v - mean) * (v - mean);
    const double sd = std::sqrt(sq / x.plane_size() + 1e-5);
    for (std::size_t i = 0; i < x.plane_size(); ++i) {
      y.plane(c)[i] = static_cast<float>(gamma[c] * (x.plane(c)[i] - mean) / sd + beta[c]);
    }
  }
  return y;
}

}  // namespace reference
}  // namespace segreg::nn
