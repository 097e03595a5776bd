#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "segreg/grid.hpp"

namespace segreg {

/// How bilinear sampling treats coordinates that fall outside the grid.
enum class Border {
  clamp,  ///< clamp the sampling coordinate to the edge (images)
  zero,   ///< neighbours outside the grid contribute 0 (masks)
};

/// Coarse-to-fine stack of cumulative displacement fields; levels[k+1] is
/// exactly twice the size of levels[k].
using DisplacementPyramid = std::vector<Field>;

/// Resample `input` (any channel count) at p + d(p), bilinearly.
/// Convention: output(p) = input(p + d(p)), d in pixel units, channel 0 = rows.
template <typename T>
Grid<T> warp(const Grid<T>& input, const Grid<T>& field, Border border);

/// Adjoint of warp. Either output pointer may be null. Gradients are
/// accumulated (added) into the targets, which must already be shaped.
template <typename T>
void warp_backward(const Grid<T>& input, const Grid<T>& field, Border border,
                   const Grid<T>& grad_out, Grid<T>* grad_field, Grid<T>* grad_input);

/// Bilinear 2x upsampling with fine(2i, 2j) = coarse(i, j) * scale.
/// `scale` = 2 for displacement fields (pixel units double), 1 for features.
template <typename T>
Grid<T> upsample2x(const Grid<T>& coarse, T scale);

/// Adjoint of upsample2x; returns a grid of the coarse shape.
template <typename T>
Grid<T> upsample2x_backward(const Grid<T>& grad_fine, int coarse_rows, int coarse_cols, T scale);

template <typename T>
Grid<T> upsample_field(const Grid<T>& d) {
  require_field(d, "upsample_field");
  return upsample2x(d, T(2));
}

/// out(p) = residual(p) + coarse_up(p + residual(p)), clamp-sampled.
template <typename T>
Grid<T> compose_fields(const Grid<T>& coarse_up, const Grid<T>& residual);

/// Adjoint of compose_fields; gradients are accumulated into the outputs.
template <typename T>
void compose_fields_backward(const Grid<T>& coarse_up, const Grid<T>& residual, const Grid<T>& grad_out,
                             Grid<T>* grad_coarse_up, Grid<T>* grad_residual);

/// 2x2 average pooling.
template <typename T>
Grid<T> avg_pool2x(const Grid<T>& g);

/// Repeated 2x average pooling. Returned coarse-to-fine: result.back() is
/// the input itself, result.front() the coarsest level.
template <typename T>
std::vector<Grid<T>> downsample(const Grid<T>& g, int levels);

/// Test-time augmentation: contrast x^gamma first, then rotation about the
/// image centre, then flips.
struct AugmentSpec {
  double rotation_deg = 0.0;
  bool flip_h = false;  ///< mirror columns
  bool flip_v = false;  ///< mirror rows
  double contrast_gamma = 1.0;

  bool is_identity() const {
    return rotation_deg == 0.0 && !flip_h && !flip_v && contrast_gamma == 1.0;
  }
};

struct AugmentRanges {
  double max_rotation_deg = 15.0;
  double flip_probability = 0.5;
  double gamma_min = 0.7;
  double gamma_max = 1.4;
};

AugmentSpec sample_augment(std::mt19937_64& rng, const AugmentRanges& ranges = {});

Image apply_augment(const Image& img, const AugmentSpec& a);
/// Spatial part only, as applied to a mask (zero border).
Image apply_spatial(const Image& mask, const AugmentSpec& a);
/// Inverse spatial ops only; contrast has no spatial inverse.
Image invert_augment(const Image& mask, const AugmentSpec& a);

/// Displacement field file: "DFLD", u32 rows, u32 cols, u32 channels (=2),
/// then rows*cols*2 little-endian float32 values, pixel-interleaved
/// (row offset, col offset).
void write_field(const std::filesystem::path& path, const Field& d);
Field read_field(const std::filesystem::path& path);

namespace reference {
// Straightforward serial implementations kept as test oracles for the
// OpenMP kernels above.
template <typename T>
Grid<T> warp(const Grid<T>& input, const Grid<T>& field, Border border);
template <typename T>
Grid<T> upsample2x(const Grid<T>& coarse, T scale);
}  // namespace reference

}  // namespace segreg
