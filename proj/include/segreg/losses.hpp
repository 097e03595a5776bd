#pragma once

#include <optional>
#include <vector>

#include "segreg/grid.hpp"
#include "segreg/warp.hpp"

namespace segreg {

/// Stabiliser added to the soft Dice numerator and denominator; also the
/// floor applied to the sigma product of the correlation.
inline constexpr double kLossEpsilon = 1e-6;

struct LossValue {
  double value = 0.0;
  /// Set when the stabiliser decided the value (empty masks, flat image).
  bool degenerate = false;
};

/// 1 - (2 sum(pred*target) + eps) / (sum(pred^2) + sum(target^2) + eps).
/// When `grad_pred` is given, dL/dpred is accumulated into it.
template <typename T>
LossValue soft_dice_loss(const Grid<T>& pred, const Grid<T>& target, Grid<T>* grad_pred = nullptr);

/// Negated global normalised cross-correlation; sigma is the population
/// standard deviation. Range [-1, 1]; -1 is perfect alignment.
template <typename T>
LossValue gncc(const Grid<T>& x, const Grid<T>& y, Grid<T>* grad_x = nullptr);

/// Sum over the two axes of the mean squared forward difference, the mean
/// taken over both channels and all in-bounds difference pairs.
template <typename T>
LossValue smoothness_penalty(const Grid<T>& d, Grid<T>* grad_d = nullptr);

/// Per-level smoothness weights, coarsest level first.
struct LambdaSchedule {
  std::vector<double> weights;

  /// weights[0] = first, each subsequent level halved.
  static LambdaSchedule halving(double first, int levels);
  std::size_t size() const { return weights.size(); }
};

struct RegistrationLoss {
  double total = 0.0;
  std::vector<double> similarity;  ///< per level gncc
  std::vector<double> dice;        ///< per level soft Dice (0 without masks)
  std::vector<double> smoothness;  ///< per level, unweighted
  /// dTotal/dD_i per level; filled only when gradients were requested.
  std::vector<Grid<float>> grad;
};

/// Multi-resolution registration objective averaged over the K pyramid
/// levels. Images and masks are average-pooled down to each level; masks
/// are either both given or both absent.
RegistrationLoss registration_objective(const DisplacementPyramid& pyramid, const Image& source, const Image& target,
                                        const Image* source_mask, const Image* target_mask,
                                        const LambdaSchedule& schedule, bool want_grad = false);

}  // namespace segreg
