#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "segreg/grid.hpp"
#include "segreg/nn/layers.hpp"
#include "segreg/warp.hpp"

namespace segreg {

struct SegConfig {
  int image_size = 256;
  int base_width = 16;
  int depth = 4;  ///< number of 2x downsampling stages
  std::uint64_t seed = 0;
};

/// Residual U-Net: one ResBlock per encoder/decoder stage, max pooling on
/// the way down, bilinear upsampling + skip concatenation on the way up,
/// 1x1 head with sigmoid.
class SegModel {
 public:
  explicit SegModel(const SegConfig& cfg);

  /// Probabilistic mask in (0,1); caches activations for backward().
  Image forward(const Image& img);
  /// Accumulates parameter gradients given dL/d(output mask).
  void backward(const Image& grad_mask);

  std::vector<nn::Parameter*> parameters();
  std::vector<const nn::Parameter*> parameters() const;
  const SegConfig& config() const { return cfg_; }

 private:
  SegConfig cfg_;
  std::vector<nn::ResBlock> enc_, dec_;
  nn::Conv2d head_;
  std::vector<nn::Tensor> skips_;
  std::vector<std::vector<int>> pool_idx_;
  std::vector<int> up_rows_, up_cols_;
  nn::Tensor out_;
};

struct RegConfig {
  int image_size = 256;
  int levels = 5;  ///< K
  int base_width = 16;
  int max_width = 32;
  std::uint64_t seed = 0;
};

/// Multi-resolution registration network. A shared encoder runs on the
/// stacked (source, target) pair; each decoder level emits a residual field
/// that is composed with the upsampled field of the level below. Residual
/// heads start at zero, so an untrained model is the identity transform.
class RegModel {
 public:
  explicit RegModel(const RegConfig& cfg);

  /// Cumulative fields D_1..D_K, coarsest first.
  DisplacementPyramid forward(const Image& source, const Image& target);
  /// Accumulates parameter gradients given dL/dD_i for every level.
  void backward(const std::vector<Field>& grad_pyramid);

  std::vector<nn::Parameter*> parameters();
  std::vector<const nn::Parameter*> parameters() const;
  const RegConfig& config() const { return cfg_; }

 private:
  int width(int level) const;

  RegConfig cfg_;
  std::vector<nn::ResBlock> enc_;  ///< enc_[i] runs at pyramid level i (0 = coarsest)
  std::vector<nn::ResBlock> dec_;  ///< dec_[i] for i >= 1
  std::vector<nn::Conv2d> heads_;
  std::vector<std::vector<int>> pool_idx_;
  std::vector<nn::Tensor> enc_out_, dec_out_;
  std::vector<Field> residual_, upsampled_;
};

nlohmann::json to_json(const SegConfig& c);
nlohmann::json to_json(const RegConfig& c);

/// Checkpoint = directory holding one raw little-endian float32 file per
/// named parameter plus manifest.json (architecture, seed, iteration, shapes).
void save_checkpoint(const std::filesystem::path& dir, const std::vector<const nn::Parameter*>& params,
                     const nlohmann::json& manifest);
/// Loads parameter values by name; returns the manifest.
nlohmann::json load_checkpoint(const std::filesystem::path& dir, const std::vector<nn::Parameter*>& params);

void save_seg_model(const std::filesystem::path& dir, const SegModel& m, int iteration);
void save_reg_model(const std::filesystem::path& dir, const RegModel& m, int iteration);
SegModel load_seg_model(const std::filesystem::path& dir);
RegModel load_reg_model(const std::filesystem::path& dir);

}  // namespace segreg
