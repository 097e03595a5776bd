#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "segreg/pseudo_mask.hpp"
#include "test_support.hpp"

using namespace segreg;
using namespace segreg::testing;

namespace {

std::vector<const Sample*> pointers(const std::vector<Sample>& v) {
  std::vector<const Sample*> out;
  for (const auto& s : v) out.push_back(&s);
  return out;
}

}  // namespace

TEST_CASE("identity TTA equals the plain forward pass") {
  SegModel m(SegConfig{32, 8, 3, 1});
  std::mt19937_64 rng(1);
  const auto img = random_grid<float>(rng, 32, 32);
  const auto masks = tta_seg_masks(m, img, std::vector<AugmentSpec>{AugmentSpec{}});
  REQUIRE(masks.size() == 1);
  CHECK(masks[0] == m.forward(img));
}

TEST_CASE("TTA is deterministic in the seed and draws n masks") {
  SegModel m(SegConfig{32, 8, 3, 2});
  std::mt19937_64 rng(2);
  const auto img = random_grid<float>(rng, 32, 32);
  std::vector<AugmentSpec> s1, s2;
  const auto a = tta_seg_masks(m, img, 5, 77, &s1), b = tta_seg_masks(m, img, 5, 77, &s2);
  REQUIRE(a.size() == 5);
  for (int i = 0; i < 5; ++i) {
    CHECK(a[i] == b[i]);
    CHECK(s1[i].rotation_deg == s2[i].rotation_deg);
  }
  for (const auto& m : a)
    for (float v : m.values()) REQUIRE((v >= 0.0f && v <= 1.0f));
}

TEST_CASE("source selection") {
  const auto data = generate_synthetic({25, 32}, 3);
  std::vector<Sample> pool(data.begin(), data.begin() + 20);
  const auto ptrs = pointers(pool);

  SUBCASE("pool no larger than n is returned whole, in order") {
    std::vector<const Sample*> five(ptrs.begin(), ptrs.begin() + 5);
    CHECK(select_sources(data[22].image, five, 5) == five);
  }
  SUBCASE("an exact copy of the target ranks first") {
    CHECK(select_sources(pool[13].image, ptrs, 5).front() == ptrs[13]);
  }
  SUBCASE("matches exhaustive scoring") {
    const Image& target = data[24].image;
    std::vector<std::pair<double, int>> scored;
    for (int i = 0; i < 20; ++i)
      scored.push_back({-std::abs(oracle::gncc(pool[i].image.cast<double>(), target.cast<double>())), i});
    std::sort(scored.begin(), scored.end());
    const auto got = select_sources(target, ptrs, 5);
    REQUIRE(got.size() == 5);
    for (int k = 0; k < 5; ++k) CHECK(got[k] == ptrs[scored[k].second]);
  }
  CHECK_THROWS_AS(select_sources(data[0].image, {}, 5), ContractViolation);
}

TEST_CASE("registration masks: identity model reproduces the source mask") {
  const auto data = generate_synthetic({10, 32}, 4);
  RegModel m(RegConfig{32, 3, 8, 16, 1});
  const auto ptrs = pointers(data);
  std::vector<const Sample*> five(ptrs.begin(), ptrs.begin() + 5);
  const auto masks = reg_masks(m, data[0].image, five);
  REQUIRE(masks.size() == 5);
  for (int i = 0; i < 5; ++i) CHECK(masks[i] == *data[i].mask);

  Sample bare = data[1];
  bare.mask.reset();
  CHECK_THROWS_AS(reg_masks(m, data[0].image, {&bare}), ContractViolation);
}

TEST_CASE("fuse: closed-form cases") {
  std::mt19937_64 rng(5);
  const auto m = random_grid<float>(rng, 6, 6);
  const auto same = fuse({m, m, m}, {m, m, m});
  for (std::size_t i = 0; i < m.size(); ++i) CHECK(same.confidence.values()[i] == doctest::Approx(m.values()[i]).epsilon(1e-6));
  CHECK(same.contributors.size() == 6);

  const Image ones(4, 4, 1, 1.0f), zeros(4, 4);
  const auto half = fuse({ones, ones}, {zeros, zeros});
  for (float v : half.confidence.values()) CHECK(v == 0.5f);

  CHECK_THROWS_AS(fuse({ones, ones}, {zeros}), ContractViolation);
  CHECK_THROWS_AS(fuse({ones}, {Image(4, 5)}), ContractViolation);
}

TEST_CASE("fuse: random masks match direct summation, bounds, permutation, unanimity") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Image> seg, reg;
    for (int i = 0; i < 5; ++i) {
      seg.push_back(random_grid<float>(rng, 4, 4));
      reg.push_back(random_grid<float>(rng, 4, 4));
    }
    const auto f = fuse(seg, reg);
    std::vector<Image> all = seg;
    all.insert(all.end(), reg.begin(), reg.end());
    for (int p = 0; p < 16; ++p) {
      long double sum = 0;
      float lo = 1, hi = 0;
      bool all_hi = true, all_lo = true;
      for (const auto& m : all) {
        const float v = m.values()[p];
        sum += v;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        all_hi = all_hi && v > 0.5f;
        all_lo = all_lo && v < 0.5f;
      }
      const float c = f.confidence.values()[p];
      CHECK(std::abs(c - double(sum / 10)) < 1e-7);
      CHECK(c >= lo);
      CHECK(c <= hi);
      if (all_hi) CHECK(c > 0.5f);
      if (all_lo) CHECK(c < 0.5f);
    }
    std::shuffle(all.begin(), all.end(), rng);
    const auto g = fuse(std::vector<Image>(all.begin(), all.begin() + 5), std::vector<Image>(all.begin() + 5, all.end()));
    for (int p = 0; p < 16; ++p) CHECK(g.confidence.values()[p] == doctest::Approx(f.confidence.values()[p]).epsilon(1e-6));
  }
}

TEST_CASE("combined inference: own-mask pool with identity registration") {
  const auto data = generate_synthetic({10, 32}, 7);
  SegModel seg(SegConfig{32, 8, 3, 1});
  RegModel reg(RegConfig{32, 3, 8, 16, 1});
  const std::vector<const Sample*> pool{&data[2]};
  const auto out = combined_inference(seg, reg, data[2].image, pool, 5, 9);
  CHECK(out.contributors.size() == 2);
  // (seg + mask) / 2 with seg in (0,1) thresholds to the mask itself.
  for (std::size_t i = 0; i < out.confidence.size(); ++i)
    REQUIRE((out.confidence.values()[i] > 0.5f) == (data[2].mask->values()[i] > 0.5f));
  CHECK(combined_inference(seg, reg, data[2].image, pool, 5, 9).confidence == out.confidence);
}

TEST_CASE("pseudo-mask generation caps N at the pool size") {
  const auto data = generate_synthetic({10, 32}, 8);
  SegModel seg(SegConfig{32, 8, 3, 1});
  RegModel reg(RegConfig{32, 3, 8, 16, 1});
  const std::vector<const Sample*> pool{&data[0], &data[1]};
  const auto set = generate_pseudo_masks(seg, reg, data[5].image, pool, 5, 1);
  CHECK(set.seg.size() == 2);
  CHECK(set.reg.size() == 2);
  CHECK(set.fused.contributors.size() == 4);
  CHECK(set.fused.contributors[2].kind == Contributor::Kind::reg);
}

TEST_CASE("mean entropy") {
  CHECK(mean_entropy(Image(3, 3, 1, 0.5f)) == doctest::Approx(std::log(2.0)));
  CHECK(mean_entropy(Image(3, 3, 1, 1.0f)) < 1e-9);
}
