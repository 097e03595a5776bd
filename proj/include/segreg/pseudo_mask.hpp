#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "segreg/dataset.hpp"
#include "segreg/models.hpp"
#include "segreg/warp.hpp"

namespace segreg {

struct Contributor {
  enum class Kind { seg, reg };
  Kind kind = Kind::seg;
  AugmentSpec augment;    ///< seg contributors
  std::string source_id;  ///< reg contributors
};

struct SoftPseudoMask {
  Image confidence;
  std::vector<Contributor> contributors;
};

/// invert_augment(seg(apply_augment(img, a)), a) for each given spec.
std::vector<Image> tta_seg_masks(SegModel& model, const Image& img, const std::vector<AugmentSpec>& specs);
/// Same with n specs drawn from a generator seeded by `seed`; the drawn
/// specs are returned through `specs` when non-null.
std::vector<Image> tta_seg_masks(SegModel& model, const Image& img, int n, std::uint64_t seed,
                                 std::vector<AugmentSpec>* specs = nullptr, const AugmentRanges& ranges = {});

/// The n pool members with the largest |gncc| to `target`, best first (ties
/// keep pool order). A pool of at most n is returned whole, in pool order.
std::vector<const Sample*> select_sources(const Image& target, const std::vector<const Sample*>& pool, int n);

/// Each source mask warped by the finest level of reg(source, target).
std::vector<Image> reg_masks(RegModel& model, const Image& target, const std::vector<const Sample*>& sources);

/// Per-pixel mean of all seg and reg masks (equal list lengths required).
SoftPseudoMask fuse(const std::vector<Image>& seg_masks, const std::vector<Image>& reg_masks,
                    std::vector<Contributor> contributors = {});

struct PseudoMaskSet {
  std::vector<Image> seg, reg;
  SoftPseudoMask fused;
};

/// N is capped at the pool size so both halves stay the same length.
PseudoMaskSet generate_pseudo_masks(SegModel& seg, RegModel& reg, const Image& img,
                                    const std::vector<const Sample*>& pool, int n, std::uint64_t seed);

/// Test-time fusion of TTA segmentation and registered annotated masks.
SoftPseudoMask combined_inference(SegModel& seg, RegModel& reg, const Image& img,
                                  const std::vector<const Sample*>& pool, int n, std::uint64_t seed);

/// Mean per-pixel binary entropy (nats) of a soft mask.
double mean_entropy(const Image& soft);

}  // namespace segreg
