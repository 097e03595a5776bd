#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "segreg/dataset.hpp"
#include "segreg/losses.hpp"
#include "segreg/models.hpp"
#include "segreg/pseudo_mask.hpp"

namespace segreg {

struct MeanTeacherParams {
  double ema_decay = 0.99;
  double consistency_weight = 1.0;
  int ramp_start = 100;  ///< epochs, before scaling; EMA also starts here
  int ramp_end = 200;
  double noise_std = 0.03;
};

/// Every training hyperparameter. Defaults are the published protocol at
/// 256x256; the desk profile in configs/ overrides sizes and epoch scaling.
struct ExperimentConfig {
  double annotation_rate = 0.01;
  int n_pseudo = 5;  ///< N
  int k_levels = 5;  ///< K
  std::vector<double> lambda = {128, 64, 32, 16, 8};

  double seg_lr_initial = 1e-4, seg_lr_later = 1e-5;
  int seg_epochs_initial = 500, seg_epochs_later = 100;
  double reg_lr_initial = 1e-3, reg_lr_later = 1e-4;
  int reg_epochs_initial = 200, reg_epochs_later = 50;

  int n_iterations = 8;
  std::uint64_t seed = 0;
  MeanTeacherParams mt;
  /// Chance that a segmentation training step sees a random augmentation
  /// drawn from the test-time family (mask follows the spatial part).
  double seg_augment_prob = 0.5;

  /// Multiplies every epoch count (rounded, at least 1 when nonzero).
  double epoch_scale = 1.0;
  /// Steps per epoch; 0 means one pass over the phase's training pool.
  int samples_per_epoch = 0;
  /// Random source translation (pixels) mixed into registration pairs.
  double reg_shift_px = 0.0;
  /// Chance that a registration pair is an image and its own shifted copy
  /// rather than two different images (pretraining and fine-tuning).
  double reg_self_pair_prob = 0.0;

  int image_size = 256;
  int seg_base_width = 16;
  int seg_depth = 4;
  int reg_base_width = 16;
  int reg_max_width = 32;

  // Dataset used by the CLI.
  int dataset_count = 250;
  std::uint64_t data_seed = 1;

  int scaled(int epochs) const;
  LambdaSchedule schedule() const;
  SegConfig seg_config() const;
  RegConfig reg_config() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
/// Keys present in `j` override the defaults; unknown keys are rejected.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Per-epoch CSV and per-step batch-id log under a run directory. A
/// default-constructed log discards everything.
class RunLog {
 public:
  RunLog() = default;
  explicit RunLog(const std::filesystem::path& run_dir, bool append = false);

  struct Epoch {
    std::string phase;
    int iteration = 0, epoch = 0, steps = 0;
    double loss = 0, dice = 0, similarity = 0, smoothness = 0, consistency = 0;
    double val_dsc = -1;
  };
  void epoch(const Epoch& e);
  void batch(const std::string& phase, int iteration, int epoch, int step, const std::vector<std::string>& ids);
  bool enabled() const { return epochs_ != nullptr; }

 private:
  std::shared_ptr<std::ofstream> epochs_, batches_;
};

struct HistoryEntry {
  int iteration = 0;
  double val_dsc = 0;             ///< segmenter on the validation set
  int n_pseudo_masks = 0;         ///< masks generated from this iteration's models
  double pseudo_entropy = 0;      ///< mean binary entropy of the fused masks
  double pseudo_confidence = 0;   ///< mean |2c - 1| of the fused masks
};

struct TrainState {
  int iteration = 0;
  SegModel seg;
  RegModel reg;
  std::map<std::string, SoftPseudoMask> pseudo_masks;
  std::vector<HistoryEntry> history;
};

/// Mean DSC of the thresholded segmentation over samples with masks.
double mean_dsc(SegModel& model, const std::vector<Sample>& samples);

SegModel pretrain_segmentation(const ExperimentConfig& cfg, const std::vector<const Sample*>& annotated,
                               const std::vector<Sample>& validation, RunLog& log);
RegModel pretrain_registration(const ExperimentConfig& cfg, const std::vector<const Sample*>& images, RunLog& log);

/// Pseudo-masks for every unannotated training image from the current
/// models, then one round of segmentation and registration fine-tuning.
/// With a non-empty run_dir the masks and checkpoints are written to
/// run_dir/iter_<k>/.
TrainState run_iteration(TrainState state, const ExperimentConfig& cfg, const DatasetSplit& data, RunLog& log,
                         const std::filesystem::path& run_dir = {});

/// Pretraining plus cfg.n_iterations iterations. When `resume` is set and
/// run_dir holds completed iterations, training continues from the last one.
TrainState train_joint(const ExperimentConfig& cfg, const DatasetSplit& data,
                       const std::filesystem::path& run_dir = {}, bool resume = false);

SegModel train_fully_supervised(const ExperimentConfig& cfg, const DatasetSplit& data, RunLog& log);
/// Returns the EMA teacher.
SegModel train_mean_teacher(const ExperimentConfig& cfg, const DatasetSplit& data, RunLog& log);

/// EMA update: teacher = decay * teacher + (1 - decay) * student.
void ema_update(SegModel& teacher, const SegModel& student, double decay);

nlohmann::json to_json(const HistoryEntry& h);

}  // namespace segreg
