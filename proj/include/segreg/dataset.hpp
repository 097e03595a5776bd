#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "segreg/grid.hpp"

namespace segreg {

struct Sample {
  std::string id;
  Image image;                ///< values in [0,1]
  std::optional<Image> mask;  ///< binary {0,1}; present iff annotated (or loaded from disk)
  bool annotated = false;
};

struct SyntheticConfig {
  int count = 250;
  int image_size = 256;
};

/// Seeded synthetic "mid-brain" dataset. Every mask is one 4-connected
/// region covering 5-35% of the image.
std::vector<Sample> generate_synthetic(const SyntheticConfig& cfg, std::uint64_t seed);

/// Number of 4-connected foreground components (foreground = value > 0.5).
int count_components(const Image& mask);
double foreground_fraction(const Image& mask);

struct SplitPolicy {
  double test_fraction = 0.2;
  double validation_fraction = 0.05;  ///< of the training share
  int test_count = -1;                ///< overrides the fraction when >= 0
  int validation_count = -1;
};

/// Annotated count for a training pool of `pool` images.
int annotated_count(double rate, int pool);

class DatasetSplit {
 public:
  std::vector<Sample> train_annotated, train_unannotated, validation, test;
  double rate = 0.0;
  std::uint64_t seed = 0;

  /// Ground truth of an unannotated training image. Evaluation and audit
  /// code only; training code never calls this.
  const Image& audit_hidden_mask(const std::string& id) const;
  const std::map<std::string, Image>& audit_hidden_masks() const { return hidden_; }

  /// All training images (annotated first), masks as visible to training.
  std::vector<const Sample*> training_samples() const;

  nlohmann::json ids_json() const;

 private:
  friend DatasetSplit make_split(const std::vector<Sample>&, double, std::uint64_t, const SplitPolicy&);
  std::map<std::string, Image> hidden_;
};

/// test, then validation from the remaining training share, then the
/// annotated subset at `rate`; other training masks are moved to the audit
/// store. Pure function of its arguments.
DatasetSplit make_split(const std::vector<Sample>& samples, double rate, std::uint64_t seed,
                        const SplitPolicy& policy = {});

struct Preprocessed {
  Image image;
  bool constant = false;  ///< raw input was flat; output is all zeros
};

/// Bilinear resize to size x size (pixel-centre alignment), then min-max.
Preprocessed preprocess(const Image& raw, int size = 256);
Image resize_bilinear(const Image& img, int rows, int cols);

/// "0.01" style tag used in file and run-directory names.
std::string rate_tag(double rate);

// PNG IO. 16-bit images map [0,1] to [0,65535]; 8-bit masks store {0,255}.
void write_png16(const std::filesystem::path& path, const Image& img);
void write_mask_png(const std::filesystem::path& path, const Image& mask);
void write_png8(const std::filesystem::path& path, const Grid<std::uint8_t>& img);
/// Reads an 8- or 16-bit grayscale PNG, scaled to [0,1].
Image read_png(const std::filesystem::path& path);
Grid<std::uint16_t> read_png_raw(const std::filesystem::path& path, int* bit_depth = nullptr);

/// images/<id>.png and masks/<id>.png under `dir`.
void save_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples);
std::vector<Sample> load_dataset(const std::filesystem::path& dir);
/// Writes split_<rate>_<seed>.json; returns its path.
std::filesystem::path save_split(const std::filesystem::path& dir, const DatasetSplit& split);

}  // namespace segreg
