#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "segreg/dataset.hpp"
#include "segreg/models.hpp"

namespace segreg {

/// Reported for an empty mask; such rows are left out of HD aggregates.
inline constexpr double kUndefinedHd = -1.0;

/// 2|A n B| / (|A| + |B|), 1 when both are empty. Inputs must be {0,1}.
double dsc(const Image& pred, const Image& gt);
/// Exact symmetric Hausdorff distance (pixels, Euclidean) between the
/// foreground pixel sets; kUndefinedHd if either set is empty.
double hausdorff(const Image& pred, const Image& gt);
/// value > 0.5 -> 1, else 0.
Image binarize(const Image& soft);

struct WilcoxonResult {
  double p = 1.0;
  double w_plus = 0.0;     ///< rank sum of positive differences
  int n = 0;               ///< pairs left after dropping zero differences
  bool exact = false;
  bool all_zero = false;   ///< every difference was zero; p = 1
};

/// Two-sided signed-rank test of a - b. Zero differences are dropped; ties
/// get mid-ranks. Exact enumeration for n <= 12, otherwise normal
/// approximation with tie and continuity correction. Requires n >= 6.
WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b);
/// The two paths on their own, for any n >= 1.
WilcoxonResult wilcoxon_exact(const std::vector<double>& a, const std::vector<double>& b);
WilcoxonResult wilcoxon_normal(const std::vector<double>& a, const std::vector<double>& b);

struct MetricsRow {
  std::string method;
  double rate = 0;
  std::string image_id;
  double dsc = 0;
  double hd = 0;
};

struct MethodSummary {
  std::string method;
  int n = 0;
  double dsc_mean = 0, dsc_std = 0;
  double hd_mean = 0, hd_std = 0;
  int hd_undefined = 0;
};

struct MetricsReport {
  std::vector<MetricsRow> rows;
  /// Methods that were requested but had no model; reported as n/a.
  std::vector<std::string> missing;

  std::vector<std::string> methods() const;
  std::vector<MetricsRow> rows_for(const std::string& method) const;
  /// Mean and sample standard deviation recomputed from the rows.
  MethodSummary summary(const std::string& method) const;
  /// Paired by image id.
  WilcoxonResult compare(const std::string& a, const std::string& b, bool use_hd = false) const;
  nlohmann::json summary_json() const;
};

void save_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> load_metrics_csv(const std::filesystem::path& path);

/// Per-image scores of a soft prediction against ground truth.
MetricsRow score(const std::string& method, double rate, const std::string& id, const Image& soft_pred,
                 const Image& gt);

struct EvalModels {
  std::optional<SegModel> fs, mt, joint;
  std::optional<RegModel> joint_reg;  ///< with joint, enables the Combined row
  std::vector<const Sample*> annotated;  ///< registration source pool for Combined
  int n_pseudo = 5;
  std::uint64_t seed = 0;
};

/// FS, MT, Joint and Combined rows on every test image (those with masks).
MetricsReport evaluate(EvalModels& models, const std::vector<Sample>& test, double rate);

struct PseudoAudit {
  int iteration = 0;
  int n = 0;
  double seg_dsc = 0, reg_dsc = 0, fused_dsc = 0;
};

/// Mean DSC of the stored pseudo-masks (thresholded) against the hidden
/// ground truth, for every iter_<k>/pseudo directory under run_dir.
std::vector<PseudoAudit> audit_pseudo_masks(const std::filesystem::path& run_dir, const DatasetSplit& split);

struct PanelLayout {
  int tile = 0;      ///< tile side in pixels
  int gutter = 2;
  int columns = 0;
  std::vector<int> gaps;  ///< iterations with missing artefacts
};

/// Rows seg / reg / fused, one column per iteration 0..max found. Tiles are
/// the stored 16-bit confidences as round(v / 257); a missing tile is drawn
/// as a gap marker (a cross). Writes out_png and returns the 8-bit image.
Grid<std::uint8_t> render_iteration_panel(const std::filesystem::path& run_dir, const std::string& image_id,
                                          const std::filesystem::path& out_png, PanelLayout* layout = nullptr);

}  // namespace segreg
