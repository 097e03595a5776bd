#include "segreg/losses.hpp"

#include <cmath>

namespace segreg {

template <typename T>
LossValue soft_dice_loss(const Grid<T>& pred, const Grid<T>& target, Grid<T>* grad_pred) {
  require(pred.same_shape(target) && !pred.empty(), "soft_dice_loss: shape mismatch");
  require(!grad_pred || grad_pred->same_shape(pred), "soft_dice_loss: gradient shape mismatch");
  const auto p = pred.values(), t = target.values();
  double inter = 0, pp = 0, tt = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += double(p[i]) * t[i];
    pp += double(p[i]) * p[i];
    tt += double(t[i]) * t[i];
  }
  const double num = 2.0 * inter + kLossEpsilon;
  const double den = pp + tt + kLossEpsilon;
  LossValue out{1.0 - num / den, pp + tt == 0.0};
  if (grad_pred) {
    auto g = grad_pred->values();
    const double inv = 1.0 / (den * den);
    for (std::size_t i = 0; i < p.size(); ++i) {
      g[i] += static_cast<T>(-(2.0 * t[i] * den - num * 2.0 * p[i]) * inv);
    }
  }
  return out;
}

template <typename T>
LossValue gncc(const Grid<T>& x, const Grid<T>& y, Grid<T>* grad_x) {
  require(x.same_shape(y) && !x.empty(), "gncc: shape mismatch");
  require(!grad_x || grad_x->same_shape(x), "gncc: gradient shape mismatch");
  const auto xs = x.values(), ys = y.values();
  const double n = static_cast<double>(xs.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double a = xs[i] - mx, b = ys[i] - my;
    sxy += a * b;
    sxx += a * a;
    syy += b * b;
  }
  const double cov = sxy / n;
  const double sx = std::sqrt(sxx / n), sy = std::sqrt(syy / n);
  // The floor keeps flat images finite without disturbing affine invariance.
  const bool flat = sx * sy < kLossEpsilon;
  const double s = flat ? kLossEpsilon : sx * sy;
  LossValue out{-cov / s, flat};
  if (grad_x) {
    auto g = grad_x->values();
    const double inv = 1.0 / (s * s);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double a = xs[i] - mx, b = ys[i] - my;
      const double ds = flat ? 0.0 : sy * a / (n * sx);
      g[i] += static_cast<T>(-((b / n) * s - cov * ds) * inv);
    }
  }
  return out;
}

template <typename T>
LossValue smoothness_penalty(const Grid<T>& d, Grid<T>* grad_d) {
  require_field(d, "smoothness_penalty");
  require(!grad_d || grad_d->same_shape(d), "smoothness_penalty: gradient shape mismatch");
  const int rows = d.rows(), cols = d.cols();
  double total = 0;
  if (rows > 1) {
    const double count = 2.0 * (rows - 1) * cols;
    double acc = 0;
    for (int ch = 0; ch < 2; ++ch) {
      for (int r = 0; r + 1 < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
          const double e = double(d(r + 1, c, ch)) - d(r, c, ch);
          acc += e * e;
          if (grad_d) {
            (*grad_d)(r + 1, c, ch) += static_cast<T>(2.0 * e / count);
            (*grad_d)(r, c, ch) -= static_cast<T>(2.0 * e / count);
          }
        }
      }
    }
    total += acc / count;
  }
  if (cols > 1) {
    const double count = 2.0 * rows * (cols - 1);
    double acc = 0;
    for (int ch = 0; ch < 2; ++ch) {
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c + 1 < cols; ++c) {
          const double e = double(d(r, c + 1, ch)) - d(r, c, ch);
          acc += e * e;
          if (grad_d) {
            (*grad_d)(r, c + 1, ch) += static_cast<T>(2.0 * e / count);
            (*grad_d)(r, c, ch) -= static_cast<T>(2.0 * e / count);
          }
        }
      }
    }
    total += acc / count;
  }
  return {total, rows == 1 && cols == 1};
}

LambdaSchedule LambdaSchedule::halving(double first, int levels) {
  require(first > 0.0 && levels >= 1, "LambdaSchedule: invalid parameters");
  LambdaSchedule s;
  double w = first;
  for (int i = 0; i < levels; ++i, w *= 0.5) s.weights.push_back(w);
  return s;
}

RegistrationLoss registration_objective(const DisplacementPyramid& pyramid, const Image& source, const Image& target,
                                        const Image* source_mask, const Image* target_mask,
                                        const LambdaSchedule& schedule, bool want_grad) {
  const int k = static_cast<int>(pyramid.size());
  require(k >= 1 && schedule.size() == pyramid.size(), "registration_objective: pyramid depth != schedule length");
  require((source_mask == nullptr) == (target_mask == nullptr),
          "registration_objective: masks must be both present or both absent");
  require(source.same_shape(target), "registration_objective: image shapes differ");
  require_image(source, "registration_objective");
  const auto xs = downsample(source, k), xt = downsample(target, k);
  std::vector<Image> ys, yt;
  if (source_mask) {
    require(source_mask->same_shape(source) && target_mask->same_shape(source),
            "registration_objective: mask shape mismatch");
    ys = downsample(*source_mask, k);
    yt = downsample(*target_mask, k);
  }

  RegistrationLoss out;
  const double inv_k = 1.0 / k;
  for (int i = 0; i < k; ++i) {
    const Field& d = pyramid[i];
    require(d.channels() == 2 && d.same_extent(xs[i]), "registration_objective: pyramid level has wrong shape");
    Field grad;
    if (want_grad) grad = Field(d.rows(), d.cols(), 2);

    const Image warped = warp(xs[i], d, Border::clamp);
    Image g_img;
    if (want_grad) g_img = Image(d.rows(), d.cols());
    const double sim = gncc(warped, xt[i], want_grad ? &g_img : nullptr).value;
    if (want_grad) warp_backward(xs[i], d, Border::clamp, g_img, &grad, static_cast<Image*>(nullptr));

    double dice = 0.0;
    if (source_mask) {
      const Image warped_mask = warp(ys[i], d, Border::zero);
      Image g_mask;
      if (want_grad) g_mask = Image(d.rows(), d.cols());
      dice = soft_dice_loss(warped_mask, yt[i], want_grad ? &g_mask : nullptr).value;
      if (want_grad) warp_backward(ys[i], d, Border::zero, g_mask, &grad, static_cast<Image*>(nullptr));
    }

    const double smooth = smoothness_penalty(d).value;
    if (want_grad) {
      Field g_smooth(d.rows(), d.cols(), 2);
      smoothness_penalty(d, &g_smooth);
      auto g = grad.values();
      const auto gs = g_smooth.values();
      const float lam = static_cast<float>(schedule.weights[i]);
      for (std::size_t j = 0; j < g.size(); ++j) g[j] = static_cast<float>(inv_k) * (g[j] + lam * gs[j]);
      out.grad.push_back(std::move(grad));
    }
    out.similarity.push_back(sim);
    out.dice.push_back(dice);
    out.smoothness.push_back(smooth);
    out.total += inv_k * (sim + dice + schedule.weights[i] * smooth);
  }
  return out;
}

template LossValue soft_dice_loss(const Grid<float>&, const Grid<float>&, Grid<float>*);
template LossValue soft_dice_loss(const Grid<double>&, const Grid<double>&, Grid<double>*);
template LossValue gncc(const Grid<float>&, const Grid<float>&, Grid<float>*);
template LossValue gncc(const Grid<double>&, const Grid<double>&, Grid<double>*);
template LossValue smoothness_penalty(const Grid<float>&, Grid<float>*);
template LossValue smoothness_penalty(const Grid<double>&, Grid<double>*);

}  // namespace segreg
