#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "segreg/warp.hpp"
#include "test_support.hpp"

using namespace segreg;
using namespace segreg::testing;

namespace {

Grid<double> fractional_field(std::mt19937_64& rng, int rows, int cols) {
  // Offsets whose fractional part stays clear of the bilinear kinks.
  std::uniform_real_distribution<double> frac(0.2, 0.8);
  std::uniform_int_distribution<int> whole(-2, 1);
  Grid<double> d(rows, cols, 2);
  for (auto& v : d.values()) v = whole(rng) + frac(rng);
  return d;
}

/// Sum of Gaussian bumps kept away from the border.
Image smooth_mask(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> pos(0.35 * n, 0.65 * n), rad(0.06 * n, 0.14 * n);
  Image m(n, n);
  for (int k = 0; k < 3; ++k) {
    const double cy = pos(rng), cx = pos(rng), s = rad(rng);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c)
        m(r, c) += static_cast<float>(std::exp(-((r - cy) * (r - cy) + (c - cx) * (c - cx)) / (2 * s * s)));
  }
  for (float& v : m.values()) v = std::min(v, 1.0f);
  return m;
}

}  // namespace

TEST_CASE("warp with the zero field is the exact identity") {
  std::mt19937_64 rng(1);
  const auto img = random_grid<float>(rng, 13, 9);
  const auto zero = make_field<float>(13, 9);
  CHECK(warp(img, zero, Border::clamp) == img);
  CHECK(warp(img, zero, Border::zero) == img);
}

TEST_CASE("constant integer shift on a ramp") {
  Image ramp(6, 10);
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 10; ++c) ramp(r, c) = static_cast<float>(10 * r + c);
  const auto out = warp(ramp, make_field<float>(6, 10, 0.0f, 2.0f), Border::clamp);
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 10; ++c) CHECK(out(r, c) == ramp(r, std::min(c + 2, 9)));
}

TEST_CASE("integer fields equal array shifting on the interior") {
  std::mt19937_64 rng(2);
  const auto img = random_grid<float>(rng, 16, 16);
  for (int dr = -3; dr <= 3; dr += 2) {
    for (int dc = -2; dc <= 2; ++dc) {
      for (Border b : {Border::clamp, Border::zero}) {
        const auto out = warp(img, make_field<float>(16, 16, float(dr), float(dc)), b);
        for (int r = 3; r < 13; ++r)
          for (int c = 3; c < 13; ++c) REQUIRE(out(r, c) == img(r + dr, c + dc));
      }
    }
  }
}

TEST_CASE("half-pixel row offset blends a step edge") {
  Image step(8, 5);
  for (int r = 4; r < 8; ++r)
    for (int c = 0; c < 5; ++c) step(r, c) = 1.0f;
  const auto out = warp(step, make_field<float>(8, 5, 0.5f, 0.0f), Border::clamp);
  CHECK(out(3, 2) == doctest::Approx(0.5));
  CHECK(out(2, 2) == 0.0f);
  CHECK(out(4, 2) == 1.0f);
}

TEST_CASE("warp output stays within the input range") {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 10; ++i) {
    const auto img = random_grid<float>(rng, 12, 12, 1, 0.2, 0.7);
    const auto d = random_grid<float>(rng, 12, 12, 2, -5.0, 5.0);
    const auto [lo, hi] = std::minmax_element(img.values().begin(), img.values().end());
    const auto out = warp(img, d, Border::clamp);
    for (float v : out.values()) {
      CHECK(v >= *lo - 1e-6f);
      CHECK(v <= *hi + 1e-6f);
    }
  }
}

TEST_CASE("parallel warp matches the serial reference") {
  std::mt19937_64 rng(4);
  for (Border b : {Border::clamp, Border::zero}) {
    const auto img = random_grid<float>(rng, 20, 17, 2);
    const auto d = random_grid<float>(rng, 20, 17, 2, -25.0, 25.0);
    const auto fast = warp(img, d, b), slow = reference::warp(img, d, b);
    for (std::size_t i = 0; i < fast.size(); ++i) CHECK(fast.values()[i] == doctest::Approx(slow.values()[i]).epsilon(1e-5));
  }
}

TEST_CASE("non-finite displacement is a contract violation") {
  Image img(4, 4);
  auto d = make_field<float>(4, 4);
  d(1, 1, 0) = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(warp(img, d, Border::clamp), ContractViolation);
  CHECK_THROWS_AS(warp(img, make_field<float>(4, 5), Border::clamp), ContractViolation);
}

TEST_CASE("warp gradients match central differences") {
  std::mt19937_64 rng(5);
  for (Border b : {Border::clamp, Border::zero}) {
    const auto img = random_grid(rng, 8, 8);
    const auto d = fractional_field(rng, 8, 8);
    const auto w = random_grid(rng, 8, 8, 1, -1.0, 1.0);  // L = <w, warp(img, d)>
    auto loss = [&](const Grid<double>& im, const Grid<double>& f) {
      const auto out = warp(im, f, b);
      double s = 0;
      for (std::size_t i = 0; i < out.size(); ++i) s += w.values()[i] * out.values()[i];
      return s;
    };
    Grid<double> gd(8, 8, 2), gi(8, 8);
    warp_backward(img, d, b, w, &gd, &gi);
    CHECK(relative_error(gd, numeric_gradient([&](const Grid<double>& f) { return loss(img, f); }, d)) < 1e-4);
    CHECK(relative_error(gi, numeric_gradient([&](const Grid<double>& im) { return loss(im, d); }, img)) < 1e-4);
  }
}

TEST_CASE("upsample_field: units double, zero stays zero") {
  const auto up = upsample_field(make_field<float>(4, 4, 1.0f, 0.0f));
  CHECK(up.rows() == 8);
  CHECK(up.cols() == 8);
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c) {
      CHECK(up(r, c, 0) == 2.0f);
      CHECK(up(r, c, 1) == 0.0f);
    }
  const auto z = upsample_field(make_field<float>(3, 5));
  CHECK(z == make_field<float>(6, 10));
}

TEST_CASE("upsample_field of an impulse is a bilinear tent") {
  Grid<double> coarse = make_field<double>(5, 5);
  coarse(2, 2, 0) = 1.0;
  const auto up = upsample_field(coarse);
  auto tent = [](double t) { return std::max(0.0, 1.0 - std::abs(t)); };
  for (int r = 0; r < 10; ++r)
    for (int c = 0; c < 10; ++c) {
      CHECK(up(r, c, 0) == doctest::Approx(2.0 * tent(r / 2.0 - 2) * tent(c / 2.0 - 2)));
      CHECK(up(r, c, 1) == 0.0);
    }
}

TEST_CASE("upsample reproduces 2x the coarse values at even sites and matches the reference") {
  std::mt19937_64 rng(6);
  const auto coarse = random_grid<float>(rng, 6, 7, 2, -3.0, 3.0);
  const auto up = upsample_field(coarse);
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 7; ++c)
      for (int ch = 0; ch < 2; ++ch) CHECK(up(2 * r, 2 * c, ch) == 2.0f * coarse(r, c, ch));
  const auto ref = reference::upsample2x(coarse, 2.0f);
  for (std::size_t i = 0; i < up.size(); ++i) CHECK(up.values()[i] == doctest::Approx(ref.values()[i]));
}

TEST_CASE("upsample backward is the adjoint") {
  std::mt19937_64 rng(7);
  const auto x = random_grid(rng, 4, 5, 2), y = random_grid(rng, 8, 10, 2);
  const auto ux = upsample2x(x, 2.0), by = upsample2x_backward(y, 4, 5, 2.0);
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < ux.size(); ++i) lhs += ux.values()[i] * y.values()[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x.values()[i] * by.values()[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("compose_fields identities and constant closed form") {
  std::mt19937_64 rng(8);
  const auto a = random_grid<float>(rng, 8, 8, 2, -2.0, 2.0);
  const auto zero = make_field<float>(8, 8);
  CHECK(compose_fields(a, zero) == a);
  CHECK(compose_fields(zero, a) == a);
  const auto sum = compose_fields(make_field<float>(8, 8, 1.5f, -0.5f), make_field<float>(8, 8, 0.25f, 2.0f));
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c) {
      CHECK(sum(r, c, 0) == doctest::Approx(1.75));
      CHECK(sum(r, c, 1) == doctest::Approx(1.5));
    }
}

TEST_CASE("compose_fields gradients match central differences") {
  std::mt19937_64 rng(9);
  const auto coarse = random_grid(rng, 8, 8, 2, -1.0, 1.0);
  const auto resid = fractional_field(rng, 8, 8);
  const auto w = random_grid(rng, 8, 8, 2, -1.0, 1.0);
  auto loss = [&](const Grid<double>& c, const Grid<double>& r) {
    const auto out = compose_fields(c, r);
    double s = 0;
    for (std::size_t i = 0; i < out.size(); ++i) s += w.values()[i] * out.values()[i];
    return s;
  };
  Grid<double> gc(8, 8, 2), gr(8, 8, 2);
  compose_fields_backward(coarse, resid, w, &gc, &gr);
  CHECK(relative_error(gc, numeric_gradient([&](const Grid<double>& c) { return loss(c, resid); }, coarse)) < 1e-4);
  CHECK(relative_error(gr, numeric_gradient([&](const Grid<double>& r) { return loss(coarse, r); }, resid)) < 1e-4);
}

TEST_CASE("downsample by repeated average pooling") {
  const auto levels = downsample(Image(8, 8, 1, 0.3f), 3);
  REQUIRE(levels.size() == 3);
  CHECK(levels[0].rows() == 2);
  for (const auto& l : levels)
    for (float v : l.values()) CHECK(v == doctest::Approx(0.3f));

  Image checker(2, 2);
  checker(0, 1) = checker(1, 0) = 1.0f;
  const auto one = downsample(checker, 2);
  CHECK(one[0].rows() == 1);
  CHECK(one[0](0, 0) == 0.5f);

  std::mt19937_64 rng(10);
  const auto img = random_grid(rng, 8, 8);
  const auto pyr = downsample(img, 3);
  for (int level = 0; level < 3; ++level) {
    const int block = 1 << (2 - level);
    for (int r = 0; r < pyr[level].rows(); ++r)
      for (int c = 0; c < pyr[level].cols(); ++c) {
        double s = 0;
        for (int i = 0; i < block; ++i)
          for (int j = 0; j < block; ++j) s += img(r * block + i, c * block + j);
        CHECK(pyr[level](r, c) == doctest::Approx(s / (block * block)).epsilon(1e-12));
      }
  }
  CHECK_THROWS_AS(downsample(Image(6, 8), 3), ContractViolation);
}

TEST_CASE("augment identity and flip involution") {
  std::mt19937_64 rng(11);
  const auto img = random_grid<float>(rng, 16, 16);
  CHECK(apply_augment(img, AugmentSpec{}) == img);
  CHECK(invert_augment(img, AugmentSpec{}) == img);
  AugmentSpec h;
  h.flip_h = true;
  CHECK(apply_spatial(apply_spatial(img, h), h) == img);
  CHECK(apply_spatial(img, h) != img);
}

TEST_CASE("contrast gamma acts pointwise") {
  Image img(4, 4, 1, 0.25f);
  AugmentSpec a;
  a.contrast_gamma = 2.0;
  const auto out = apply_augment(img, a);
  for (float v : out.values()) CHECK(v == doctest::Approx(0.0625f));
}

TEST_CASE("TTA round trip recovers smooth masks") {
  std::mt19937_64 rng(12);
  for (int i = 0; i < 20; ++i) {
    const auto m = smooth_mask(rng, 64);
    const auto a = sample_augment(rng);
    CHECK(std::abs(a.rotation_deg) <= 15.0);
    CHECK(a.contrast_gamma >= 0.7);
    CHECK(a.contrast_gamma <= 1.4);
    const auto back = invert_augment(apply_spatial(m, a), a);
    double mae = 0;
    for (std::size_t k = 0; k < m.size(); ++k) mae += std::abs(back.values()[k] - m.values()[k]);
    CHECK(mae / m.size() < 0.02);
  }
}

TEST_CASE("displacement field file round trip and header layout") {
  std::mt19937_64 rng(13);
  const auto d = random_grid<float>(rng, 5, 3, 2, -4.0, 4.0);
  const auto path = std::filesystem::temp_directory_path() / "segreg_field_test.dfld";
  write_field(path, d);
  CHECK(read_field(path) == d);
  CHECK(std::filesystem::file_size(path) == 16 + 5 * 3 * 2 * 4);
  std::ifstream is(path, std::ios::binary);
  char head[16];
  is.read(head, 16);
  CHECK(std::string(head, 4) == "DFLD");
  CHECK(head[4] == 5);
  CHECK(head[8] == 3);
  CHECK(head[12] == 2);
  std::filesystem::remove(path);
}
