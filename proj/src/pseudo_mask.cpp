#include "segreg/pseudo_mask.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "segreg/losses.hpp"

namespace segreg {

std::vector<Image> tta_seg_masks(SegModel& model, const Image& img, const std::vector<AugmentSpec>& specs) {
  std::vector<Image> out;
  out.reserve(specs.size());
  for (const auto& a : specs) {
    if (a.is_identity()) {
      out.push_back(model.forward(img));
    } else {
      out.push_back(invert_augment(model.forward(apply_augment(img, a)), a));
    }
  }
  return out;
}

std::vector<Image> tta_seg_masks(SegModel& model, const Image& img, int n, std::uint64_t seed,
                                 std::vector<AugmentSpec>* specs, const AugmentRanges& ranges) {
  require(n >= 1, "tta_seg_masks: n must be at least 1");
  std::mt19937_64 rng(seed);
  std::vector<AugmentSpec> drawn;
  for (int i = 0; i < n; ++i) drawn.push_back(sample_augment(rng, ranges));
  if (specs) *specs = drawn;
  return tta_seg_masks(model, img, drawn);
}

std::vector<const Sample*> select_sources(const Image& target, const std::vector<const Sample*>& pool, int n) {
  require(!pool.empty(), "select_sources: empty annotated pool");
  require(n >= 1, "select_sources: n must be at least 1");
  if (static_cast<int>(pool.size()) <= n) return pool;
  std::vector<double> score(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) score[i] = std::abs(gncc(pool[i]->image, target).value);
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  std::vector<const Sample*> out;
  for (int i = 0; i < n; ++i) out.push_back(pool[order[i]]);
  return out;
}

std::vector<Image> reg_masks(RegModel& model, const Image& target, const std::vector<const Sample*>& sources) {
  std::vector<Image> out;
  out.reserve(sources.size());
  for (const Sample* s : sources) {
    require(s->mask.has_value(), "reg_masks: source " + s->id + " has no mask");
    const auto pyramid = model.forward(s->image, target);
    out.push_back(warp(*s->mask, pyramid.back(), Border::zero));
  }
  return out;
}

SoftPseudoMask fuse(const std::vector<Image>& seg_masks, const std::vector<Image>& reg_masks,
                    std::vector<Contributor> contributors) {
  require(!seg_masks.empty() && seg_masks.size() == reg_masks.size(),
          "fuse: need N segmentation and N registration masks");
  const Image& first = seg_masks.front();
  SoftPseudoMask out;
  out.confidence = Image(first.rows(), first.cols());
  std::vector<double> acc(first.size(), 0.0);
  auto add = [&](const Image& m) {
    require(m.same_shape(first), "fuse: mask shape mismatch");
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += m.values()[i];
  };
  for (const auto& m : seg_masks) add(m);
  for (const auto& m : reg_masks) add(m);
  const double total = static_cast<double>(seg_masks.size() + reg_masks.size());
  for (std::size_t i = 0; i < acc.size(); ++i)
    out.confidence.values()[i] = static_cast<float>(std::clamp(acc[i] / total, 0.0, 1.0));
  if (contributors.empty()) {
    for (std::size_t i = 0; i < seg_masks.size(); ++i) contributors.push_back({Contributor::Kind::seg, {}, {}});
    for (std::size_t i = 0; i < reg_masks.size(); ++i) contributors.push_back({Contributor::Kind::reg, {}, {}});
  }
  require(contributors.size() == seg_masks.size() + reg_masks.size(), "fuse: contributor count must be 2N");
  out.contributors = std::move(contributors);
  return out;
}

PseudoMaskSet generate_pseudo_masks(SegModel& seg, RegModel& reg, const Image& img,
                                    const std::vector<const Sample*>& pool, int n, std::uint64_t seed) {
  require(!pool.empty(), "generate_pseudo_masks: empty annotated pool");
  const int n_eff = std::min<int>(n, static_cast<int>(pool.size()));
  PseudoMaskSet out;
  std::vector<AugmentSpec> specs;
  out.seg = tta_seg_masks(seg, img, n_eff, seed, &specs);
  const auto sources = select_sources(img, pool, n_eff);
  out.reg = reg_masks(reg, img, sources);
  std::vector<Contributor> who;
  for (const auto& a : specs) who.push_back({Contributor::Kind::seg, a, {}});
  for (const Sample* s : sources) who.push_back({Contributor::Kind::reg, {}, s->id});
  out.fused = fuse(out.seg, out.reg, std::move(who));
  return out;
}

SoftPseudoMask combined_inference(SegModel& seg, RegModel& reg, const Image& img,
                                  const std::vector<const Sample*>& pool, int n, std::uint64_t seed) {
  return generate_pseudo_masks(seg, reg, img, pool, n, seed).fused;
}

double mean_entropy(const Image& soft) {
  double acc = 0;
  for (float v : soft.values()) {
    const double p = std::clamp<double>(v, 1e-12, 1.0 - 1e-12);
    acc -= p * std::log(p) + (1 - p) * std::log(1 - p);
  }
  return acc / soft.size();
}

}  // namespace segreg
