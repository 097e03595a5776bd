#include "segreg/warp.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>

namespace segreg {
namespace {

template <typename T>
void require_finite(const Grid<T>& g, const char* who) {
  for (T v : g.values())
    if (!std::isfinite(static_cast<double>(v))) require(false, std::string(who) + ": non-finite displacement value");
}

/// Bilinear tap set for one sampling coordinate.
template <typename T>
struct Taps {
  int r0 = 0, r1 = 0, c0 = 0, c1 = 0;
  T wr = 0, wc = 0;
  bool ok00 = true, ok01 = true, ok10 = true, ok11 = true;
  bool live_r = true, live_c = true;  // coordinate derivative non-zero
};

template <typename T>
Taps<T> taps_for(T y, T x, int rows, int cols, Border border) {
  Taps<T> t;
  if (border == Border::clamp) {
    auto axis = [](T v, int n, int& i0, int& i1, T& w, bool& live) {
      live = v >= T(0) && v <= T(n - 1);
      v = std::clamp(v, T(0), T(n - 1));
      if (n == 1) {
        i0 = i1 = 0;
        w = 0;
        live = false;
        return;
      }
      i0 = std::min(static_cast<int>(std::floor(v)), n - 2);
      i1 = i0 + 1;
      w = v - T(i0);
    };
    axis(y, rows, t.r0, t.r1, t.wr, t.live_r);
    axis(x, cols, t.c0, t.c1, t.wc, t.live_c);
    return t;
  }
  auto axis = [](T v, int n, int& i0, int& i1, T& w) {
    v = std::clamp(v, T(-2), T(n + 1));
    i0 = static_cast<int>(std::floor(v));
    i1 = i0 + 1;
    w = v - T(i0);
  };
  axis(y, rows, t.r0, t.r1, t.wr);
  axis(x, cols, t.c0, t.c1, t.wc);
  const bool r0in = t.r0 >= 0 && t.r0 < rows, r1in = t.r1 >= 0 && t.r1 < rows;
  const bool c0in = t.c0 >= 0 && t.c0 < cols, c1in = t.c1 >= 0 && t.c1 < cols;
  t.ok00 = r0in && c0in;
  t.ok01 = r0in && c1in;
  t.ok10 = r1in && c0in;
  t.ok11 = r1in && c1in;
  return t;
}

template <typename T>
std::array<T, 4> corner_values(std::span<const T> plane, int cols, const Taps<T>& t) {
  auto at = [&](bool ok, int r, int c) { return ok ? plane[static_cast<std::size_t>(r) * cols + c] : T(0); };
  return {at(t.ok00, t.r0, t.c0), at(t.ok01, t.r0, t.c1), at(t.ok10, t.r1, t.c0), at(t.ok11, t.r1, t.c1)};
}

template <typename T>
T interpolate(const std::array<T, 4>& v, const Taps<T>& t) {
  return (T(1) - t.wr) * ((T(1) - t.wc) * v[0] + t.wc * v[1]) + t.wr * ((T(1) - t.wc) * v[2] + t.wc * v[3]);
}

}  // namespace

template <typename T>
Grid<T> warp(const Grid<T>& input, const Grid<T>& field, Border border) {
  require_field(field, "warp");
  require(input.same_extent(field) && !input.empty(), "warp: input and field shapes differ");
  require_finite(field, "warp");
  const int rows = input.rows(), cols = input.cols();
  Grid<T> out(rows, cols, input.channels());
  const auto dr = field.plane(0), dc = field.plane(1);
  const std::size_t ps = input.plane_size();
  const int nch = input.channels();
  // Clamped taps always land inside the grid once both sides have two pixels.
  const bool direct = border == Border::clamp && rows > 1 && cols > 1;
  const T* in = input.values().data();
  T* o = out.values().data();
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const std::size_t p = static_cast<std::size_t>(r) * cols + c;
      const auto t = taps_for<T>(T(r) + dr[p], T(c) + dc[p], rows, cols, border);
      const std::size_t i00 = static_cast<std::size_t>(t.r0) * cols + t.c0, i10 = i00 + cols;
      for (int ch = 0; ch < nch; ++ch) {
        const T* q = in + ch * ps;
        const std::array<T, 4> v = direct ? std::array<T, 4>{q[i00], q[i00 + 1], q[i10], q[i10 + 1]}
                                          : corner_values(std::span<const T>(q, ps), cols, t);
        o[ch * ps + p] = interpolate(v, t);
      }
    }
  }
  return out;
}

template <typename T>
void warp_backward(const Grid<T>& input, const Grid<T>& field, Border border, const Grid<T>& grad_out,
                   Grid<T>* grad_field, Grid<T>* grad_input) {
  require(grad_out.same_shape(input), "warp_backward: gradient shape mismatch");
  require(!grad_field || grad_field->same_shape(field), "warp_backward: field gradient shape mismatch");
  require(!grad_input || grad_input->same_shape(input), "warp_backward: input gradient shape mismatch");
  const int rows = input.rows(), cols = input.cols();
  const auto dr = field.plane(0), dc = field.plane(1);

  if (grad_field) {
    auto gr = grad_field->plane(0), gc = grad_field->plane(1);
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        const std::size_t p = static_cast<std::size_t>(r) * cols + c;
        const auto t = taps_for<T>(T(r) + dr[p], T(c) + dc[p], rows, cols, border);
        T sr = 0, sc = 0;
        for (int ch = 0; ch < input.channels(); ++ch) {
          const auto v = corner_values(input.plane(ch), cols, t);
          const T g = grad_out.plane(ch)[p];
          sr += g * ((T(1) - t.wc) * (v[2] - v[0]) + t.wc * (v[3] - v[1]));
          sc += g * ((T(1) - t.wr) * (v[1] - v[0]) + t.wr * (v[3] - v[2]));
        }
        if (t.live_r) gr[p] += sr;
        if (t.live_c) gc[p] += sc;
      }
    }
  }

  if (grad_input) {
    // Scatter; kept serial so accumulation order is fixed.
    for (int ch = 0; ch < input.channels(); ++ch) {
      auto gi = grad_input->plane(ch);
      const auto go = grad_out.plane(ch);
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
          const std::size_t p = static_cast<std::size_t>(r) * cols + c;
          const auto t = taps_for<T>(T(r) + dr[p], T(c) + dc[p], rows, cols, border);
          const T g = go[p];
          auto add = [&](bool ok, int rr, int cc, T w) {
            if (ok) gi[static_cast<std::size_t>(rr) * cols + cc] += g * w;
          };
          add(t.ok00, t.r0, t.c0, (T(1) - t.wr) * (T(1) - t.wc));
          add(t.ok01, t.r0, t.c1, (T(1) - t.wr) * t.wc);
          add(t.ok10, t.r1, t.c0, t.wr * (T(1) - t.wc));
          add(t.ok11, t.r1, t.c1, t.wr * t.wc);
        }
      }
    }
  }
}

template <typename T>
Grid<T> upsample2x(const Grid<T>& coarse, T scale) {
  require(!coarse.empty(), "upsample2x: empty grid");
  const int hr = coarse.rows(), hc = coarse.cols();
  const int fr = 2 * hr, fc = 2 * hc;
  Grid<T> out(fr, fc, coarse.channels());
  for (int ch = 0; ch < coarse.channels(); ++ch) {
    const auto in = coarse.plane(ch);
    auto o = out.plane(ch);
#pragma omp parallel for schedule(static)
    for (int r = 0; r < fr; ++r) {
      const int r0 = r / 2, r1 = std::min(r0 + 1, hr - 1);
      const T wr = (r % 2) ? T(0.5) : T(0);
      for (int c = 0; c < fc; ++c) {
        const int c0 = c / 2, c1 = std::min(c0 + 1, hc - 1);
        const T wc = (c % 2) ? T(0.5) : T(0);
        const T top = (T(1) - wc) * in[r0 * hc + c0] + wc * in[r0 * hc + c1];
        const T bot = (T(1) - wc) * in[r1 * hc + c0] + wc * in[r1 * hc + c1];
        o[static_cast<std::size_t>(r) * fc + c] = scale * ((T(1) - wr) * top + wr * bot);
      }
    }
  }
  return out;
}

template <typename T>
Grid<T> upsample2x_backward(const Grid<T>& grad_fine, int coarse_rows, int coarse_cols, T scale) {
  require(grad_fine.rows() == 2 * coarse_rows && grad_fine.cols() == 2 * coarse_cols,
          "upsample2x_backward: shape mismatch");
  const int hr = coarse_rows, hc = coarse_cols, fc = grad_fine.cols();
  Grid<T> out(hr, hc, grad_fine.channels());
  for (int ch = 0; ch < grad_fine.channels(); ++ch) {
    const auto g = grad_fine.plane(ch);
    auto o = out.plane(ch);
    for (int r = 0; r < grad_fine.rows(); ++r) {
      const int r0 = r / 2, r1 = std::min(r0 + 1, hr - 1);
      const T wr = (r % 2) ? T(0.5) : T(0);
      for (int c = 0; c < fc; ++c) {
        const int c0 = c / 2, c1 = std::min(c0 + 1, hc - 1);
        const T wc = (c % 2) ? T(0.5) : T(0);
        const T v = scale * g[static_cast<std::size_t>(r) * fc + c];
        o[r0 * hc + c0] += v * (T(1) - wr) * (T(1) - wc);
        o[r0 * hc + c1] += v * (T(1) - wr) * wc;
        o[r1 * hc + c0] += v * wr * (T(1) - wc);
        o[r1 * hc + c1] += v * wr * wc;
      }
    }
  }
  return out;
}

template <typename T>
Grid<T> compose_fields(const Grid<T>& coarse_up, const Grid<T>& residual) {
  require_field(coarse_up, "compose_fields");
  require(coarse_up.same_shape(residual), "compose_fields: shape mismatch");
  Grid<T> out = warp(coarse_up, residual, Border::clamp);
  auto o = out.values();
  const auto r = residual.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += r[i];
  return out;
}

template <typename T>
void compose_fields_backward(const Grid<T>& coarse_up, const Grid<T>& residual, const Grid<T>& grad_out,
                             Grid<T>* grad_coarse_up, Grid<T>* grad_residual) {
  warp_backward(coarse_up, residual, Border::clamp, grad_out, grad_residual, grad_coarse_up);
  if (grad_residual) {
    auto g = grad_residual->values();
    const auto go = grad_out.values();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
  }
}

template <typename T>
Grid<T> avg_pool2x(const Grid<T>& g) {
  require(g.rows() % 2 == 0 && g.cols() % 2 == 0 && !g.empty(), "avg_pool2x: odd or empty shape");
  const int hr = g.rows() / 2, hc = g.cols() / 2;
  Grid<T> out(hr, hc, g.channels());
  for (int ch = 0; ch < g.channels(); ++ch) {
    for (int r = 0; r < hr; ++r) {
      for (int c = 0; c < hc; ++c) {
        out(r, c, ch) = (g(2 * r, 2 * c, ch) + g(2 * r, 2 * c + 1, ch) + g(2 * r + 1, 2 * c, ch) +
                         g(2 * r + 1, 2 * c + 1, ch)) /
                        T(4);
      }
    }
  }
  return out;
}

template <typename T>
std::vector<Grid<T>> downsample(const Grid<T>& g, int levels) {
  require(levels >= 1, "downsample: levels must be >= 1");
  const int div = 1 << (levels - 1);
  require(g.rows() % div == 0 && g.cols() % div == 0 && !g.empty(),
          "downsample: shape not divisible by 2^(levels-1)");
  std::vector<Grid<T>> out(static_cast<std::size_t>(levels));
  out.back() = g;
  for (int k = levels - 2; k >= 0; --k) out[k] = avg_pool2x(out[k + 1]);
  return out;
}

AugmentSpec sample_augment(std::mt19937_64& rng, const AugmentRanges& ranges) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  AugmentSpec a;
  a.rotation_deg = (2.0 * unit(rng) - 1.0) * ranges.max_rotation_deg;
  a.flip_h = unit(rng) < ranges.flip_probability;
  a.flip_v = unit(rng) < ranges.flip_probability;
  const double lo = std::log(ranges.gamma_min), hi = std::log(ranges.gamma_max);
  a.contrast_gamma = std::exp(lo + (hi - lo) * unit(rng));
  return a;
}

namespace {

Image flip(const Image& img, bool flip_h, bool flip_v) {
  if (!flip_h && !flip_v) return img;
  Image out(img.rows(), img.cols());
  for (int r = 0; r < img.rows(); ++r) {
    for (int c = 0; c < img.cols(); ++c) {
      out(r, c) = img(flip_v ? img.rows() - 1 - r : r, flip_h ? img.cols() - 1 - c : c);
    }
  }
  return out;
}

/// output(p) = input(R_deg(p)) where R rotates about the image centre.
Image rotate_sample(const Image& img, double deg, Border border) {
  if (deg == 0.0) return img;
  const double th = deg * std::numbers::pi / 180.0;
  const double cs = std::cos(th), sn = std::sin(th);
  const double cy = 0.5 * (img.rows() - 1), cx = 0.5 * (img.cols() - 1);
  Field d(img.rows(), img.cols(), 2);
  for (int r = 0; r < img.rows(); ++r) {
    for (int c = 0; c < img.cols(); ++c) {
      const double y = r - cy, x = c - cx;
      d(r, c, 0) = static_cast<float>(cy + cs * y - sn * x - r);
      d(r, c, 1) = static_cast<float>(cx + sn * y + cs * x - c);
    }
  }
  return warp(img, d, border);
}

}  // namespace

Image apply_spatial(const Image& mask, const AugmentSpec& a) {
  require_image(mask, "apply_spatial");
  // forward: rotate by +deg, then flip
  return flip(rotate_sample(mask, -a.rotation_deg, Border::zero), a.flip_h, a.flip_v);
}

Image apply_augment(const Image& img, const AugmentSpec& a) {
  require_image(img, "apply_augment");
  require(a.contrast_gamma > 0.0, "apply_augment: gamma must be positive");
  Image out = img;
  if (a.contrast_gamma != 1.0) {
    for (float& v : out.values()) v = static_cast<float>(std::pow(std::max(v, 0.0f), a.contrast_gamma));
  }
  return flip(rotate_sample(out, -a.rotation_deg, Border::clamp), a.flip_h, a.flip_v);
}

Image invert_augment(const Image& mask, const AugmentSpec& a) {
  require_image(mask, "invert_augment");
  return rotate_sample(flip(mask, a.flip_h, a.flip_v), a.rotation_deg, Border::zero);
}

namespace {
constexpr std::array<char, 4> kFieldMagic{'D', 'F', 'L', 'D'};

void put_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b.data(), 4);
}

std::uint32_t get_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  is.read(reinterpret_cast<char*>(b.data()), 4);
  require(static_cast<bool>(is), "read_field: truncated file");
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
}  // namespace

void write_field(const std::filesystem::path& path, const Field& d) {
  require_field(d, "write_field");
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), "write_field: cannot open " + path.string());
  os.write(kFieldMagic.data(), 4);
  put_u32(os, static_cast<std::uint32_t>(d.rows()));
  put_u32(os, static_cast<std::uint32_t>(d.cols()));
  put_u32(os, 2);
  for (int r = 0; r < d.rows(); ++r) {
    for (int c = 0; c < d.cols(); ++c) {
      put_u32(os, std::bit_cast<std::uint32_t>(d(r, c, 0)));
      put_u32(os, std::bit_cast<std::uint32_t>(d(r, c, 1)));
    }
  }
}

Field read_field(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), "read_field: cannot open " + path.string());
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  require(static_cast<bool>(is) && magic == kFieldMagic, "read_field: bad magic");
  const auto rows = get_u32(is), cols = get_u32(is), channels = get_u32(is);
  require(channels == 2, "read_field: channel count must be 2");
  Field d(static_cast<int>(rows), static_cast<int>(cols), 2);
  for (std::uint32_t r = 0; r < rows; ++r) {
    for (std::uint32_t c = 0; c < cols; ++c) {
      d(r, c, 0) = std::bit_cast<float>(get_u32(is));
      d(r, c, 1) = std::bit_cast<float>(get_u32(is));
    }
  }
  return d;
}

namespace reference {

template <typename T>
Grid<T> warp(const Grid<T>& input, const Grid<T>& field, Border border) {
  const int rows = input.rows(), cols = input.cols();
  Grid<T> out(rows, cols, input.channels());
  for (int ch = 0; ch < input.channels(); ++ch) {
    auto pixel = [&](int r, int c) -> T {
      if (border == Border::clamp) return input(std::clamp(r, 0, rows - 1), std::clamp(c, 0, cols - 1), ch);
      return (r < 0 || r >= rows || c < 0 || c >= cols) ? T(0) : input(r, c, ch);
    };
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        T y = T(r) + field(r, c, 0), x = T(c) + field(r, c, 1);
        if (border == Border::clamp) {
          y = std::clamp(y, T(0), T(rows - 1));
          x = std::clamp(x, T(0), T(cols - 1));
        }
        const T fy = std::floor(y), fx = std::floor(x);
        const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
        const T ay = y - fy, ax = x - fx;
        out(r, c, ch) = (1 - ay) * (1 - ax) * pixel(y0, x0) + (1 - ay) * ax * pixel(y0, x0 + 1) +
                        ay * (1 - ax) * pixel(y0 + 1, x0) + ay * ax * pixel(y0 + 1, x0 + 1);
      }
    }
  }
  return out;
}

template <typename T>
Grid<T> upsample2x(const Grid<T>& coarse, T scale) {
  Grid<T> out(2 * coarse.rows(), 2 * coarse.cols(), coarse.channels());
  for (int ch = 0; ch < coarse.channels(); ++ch) {
    for (int r = 0; r < out.rows(); ++r) {
      for (int c = 0; c < out.cols(); ++c) {
        const T y = std::min(T(r) / 2, T(coarse.rows() - 1)), x = std::min(T(c) / 2, T(coarse.cols() - 1));
        const int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
        const int y1 = std::min(y0 + 1, coarse.rows() - 1), x1 = std::min(x0 + 1, coarse.cols() - 1);
        const T ay = y - y0, ax = x - x0;
        out(r, c, ch) = scale * ((1 - ay) * (1 - ax) * coarse(y0, x0, ch) + (1 - ay) * ax * coarse(y0, x1, ch) +
                                 ay * (1 - ax) * coarse(y1, x0, ch) + ay * ax * coarse(y1, x1, ch));
      }
    }
  }
  return out;
}

template Grid<float> warp(const Grid<float>&, const Grid<float>&, Border);
template Grid<double> warp(const Grid<double>&, const Grid<double>&, Border);
template Grid<float> upsample2x(const Grid<float>&, float);
template Grid<double> upsample2x(const Grid<double>&, double);

}  // namespace reference

#define SEGREG_INSTANTIATE_WARP(T)                                                                        \
  template Grid<T> warp(const Grid<T>&, const Grid<T>&, Border);                                          \
  template void warp_backward(const Grid<T>&, const Grid<T>&, Border, const Grid<T>&, Grid<T>*, Grid<T>*); \
  template Grid<T> upsample2x(const Grid<T>&, T);                                                         \
  template Grid<T> upsample2x_backward(const Grid<T>&, int, int, T);                                      \
  template Grid<T> compose_fields(const Grid<T>&, const Grid<T>&);                                        \
  template void compose_fields_backward(const Grid<T>&, const Grid<T>&, const Grid<T>&, Grid<T>*, Grid<T>*); \
  template Grid<T> avg_pool2x(const Grid<T>&);                                                            \
  template std::vector<Grid<T>> downsample(const Grid<T>&, int);

SEGREG_INSTANTIATE_WARP(float)
SEGREG_INSTANTIATE_WARP(double)

}  // namespace segreg
