#include "segreg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <queue>
#include <random>

namespace segreg {

namespace {

constexpr double kPi = 3.14159265358979323846;

double smoothstep_edge(double signed_dist, double width) {
  // 1 inside (signed_dist < 0), 0 outside, linear ramp of `width`.
  return std::clamp(0.5 - signed_dist / width, 0.0, 1.0);
}

struct Blob {
  double y, x, sigma, amp;
};

struct Subject {
  // affine, canonical <- image
  double scale, angle, ty, tx;
  // smooth deformation: three sinusoid modes per axis
  double def_amp[2][3], def_fy[2][3], def_fx[2][3], def_ph[2][3];
  // head
  double ah, bh;
  double i_bg, i_skull, i_csf, i_gm, i_wm;
  // target, in head coordinates
  double cy, cx, ra, rb, rot, power;
  double wobble_amp[4], wobble_ph[4];
  double i_target;
  std::vector<Blob> blobs;
  // acquisition
  double bias, bias_dir, noise;
};

Subject sample_subject(std::mt19937_64& rng) {
  auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  Subject s{};
  s.scale = u(0.9, 1.1);
  s.angle = u(-12.0, 12.0) * kPi / 180.0;
  s.ty = u(-0.06, 0.06);
  s.tx = u(-0.06, 0.06);
  for (int a = 0; a < 2; ++a)
    for (int k = 0; k < 3; ++k) {
      s.def_amp[a][k] = u(-0.025, 0.025);
      s.def_fy[a][k] = u(1.0, 3.0);
      s.def_fx[a][k] = u(1.0, 3.0);
      s.def_ph[a][k] = u(0.0, 2 * kPi);
    }
  s.ah = u(0.78, 0.9);
  s.bh = u(0.62, 0.76);
  s.i_bg = u(0.0, 0.05);
  s.i_skull = u(0.75, 0.95);
  s.i_csf = u(0.05, 0.2);
  s.i_gm = u(0.35, 0.5);
  s.i_wm = u(0.5, 0.68);

  s.cy = 0.15 * s.ah + u(-0.06, 0.06);
  s.cx = u(-0.06, 0.06);
  s.ra = s.ah * u(0.32, 0.42);
  s.rb = s.bh * u(0.42, 0.55);
  s.rot = u(-15.0, 15.0) * kPi / 180.0;
  s.power = u(2.0, 3.5);
  for (int k = 0; k < 4; ++k) {
    s.wobble_amp[k] = u(0.0, 0.07);
    s.wobble_ph[k] = u(0.0, 2 * kPi);
  }
  // Contrast polarity of the target varies between subjects.
  const double sign = u(0.0, 1.0) < 0.5 ? -1.0 : 1.0;
  s.i_target = s.i_wm + sign * u(0.15, 0.3);

  const int n_blobs = 2 + static_cast<int>(u(0.0, 2.0));
  for (int b = 0; b < n_blobs; ++b) {
    // Placed in the brain, on the far side of the head from the target.
    const double theta = u(0.15 * kPi, 0.85 * kPi);
    const double rho = u(0.35, 0.6);
    const double bsign = u(0.0, 1.0) < 0.5 ? -1.0 : 1.0;
    s.blobs.push_back({-rho * s.ah * std::sin(theta), rho * s.bh * std::cos(theta), u(0.05, 0.09),
                       bsign * u(0.15, 0.3)});
  }
  s.bias = u(0.0, 0.25);
  s.bias_dir = u(0.0, 2 * kPi);
  s.noise = u(0.01, 0.04);
  return s;
}

// Canonical coordinates of image point (v, u), both in [-1, 1].
void to_canonical(const Subject& s, double v, double u, double& qy, double& qx) {
  const double py = (v - s.ty) / s.scale, px = (u - s.tx) / s.scale;
  const double ca = std::cos(-s.angle), sa = std::sin(-s.angle);
  qy = ca * py - sa * px;
  qx = sa * py + ca * px;
  double dy = 0, dx = 0;
  for (int k = 0; k < 3; ++k) {
    dy += s.def_amp[0][k] * std::sin(s.def_fy[0][k] * qy + s.def_fx[0][k] * qx + s.def_ph[0][k]);
    dx += s.def_amp[1][k] * std::sin(s.def_fy[1][k] * qy + s.def_fx[1][k] * qx + s.def_ph[1][k]);
  }
  qy += dy;
  qx += dx;
}

// < 1 inside the target. Star-shaped about its centre.
double target_level(const Subject& s, double qy, double qx) {
  const double y = qy - s.cy, x = qx - s.cx;
  const double c = std::cos(s.rot), sn = std::sin(s.rot);
  const double ry = c * y - sn * x, rx = sn * y + c * x;
  const double r = std::pow(std::pow(std::abs(ry / s.ra), s.power) + std::pow(std::abs(rx / s.rb), s.power),
                            1.0 / s.power);
  const double theta = std::atan2(ry, rx);
  double radius = 1.0;
  for (int k = 0; k < 4; ++k) radius += s.wobble_amp[k] * std::cos((k + 2) * theta + s.wobble_ph[k]);
  return r / radius;
}

void render(const Subject& s, int n, std::mt19937_64& rng, Image& img, Image& mask) {
  img = Image(n, n);
  mask = Image(n, n);
  const double px = 2.0 / n;  // one pixel in normalized units
  std::normal_distribution<double> noise(0.0, s.noise);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const double v = (2.0 * r + 1) / n - 1.0, u = (2.0 * c + 1) / n - 1.0;
      double qy, qx;
      to_canonical(s, v, u, qy, qx);
      const double rho = std::hypot(qy / s.ah, qx / s.bh);
      const double w = 1.5 * px / std::min(s.ah, s.bh);
      // Nested rings from the outside in.
      double val = s.i_bg;
      val += (s.i_skull - val) * smoothstep_edge(rho - 1.0, w);
      val += (s.i_csf - val) * smoothstep_edge(rho - 0.88, w);
      val += (s.i_gm - val) * smoothstep_edge(rho - 0.8, w);
      val += (s.i_wm - val) * smoothstep_edge(rho - 0.62, w);
      for (const Blob& b : s.blobs) {
        const double d2 = (qy - b.y) * (qy - b.y) + (qx - b.x) * (qx - b.x);
        val += b.amp * std::exp(-d2 / (2 * b.sigma * b.sigma)) * smoothstep_edge(rho - 0.8, w);
      }
      const double level = target_level(s, qy, qx);
      val += (s.i_target - val) * smoothstep_edge(level - 1.0, 1.5 * px / std::min(s.ra, s.rb));
      val *= 1.0 + s.bias * (std::cos(s.bias_dir) * u + std::sin(s.bias_dir) * v);
      img(r, c) = static_cast<float>(val + noise(rng));
      mask(r, c) = level < 1.0 ? 1.0f : 0.0f;
    }
  }
}

}  // namespace

std::vector<Sample> generate_synthetic(const SyntheticConfig& cfg, std::uint64_t seed) {
  require(cfg.count >= 10, "generate_synthetic: need at least 10 samples");
  require(cfg.image_size >= 16, "generate_synthetic: image too small");
  std::vector<Sample> out(cfg.count);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < cfg.count; ++i) {
    std::seed_seq seq{seed, static_cast<std::uint64_t>(i), std::uint64_t{0x5e9}};
    std::mt19937_64 rng(seq);
    Image img, mask;
    for (;;) {
      const Subject s = sample_subject(rng);
      render(s, cfg.image_size, rng, img, mask);
      const double f = foreground_fraction(mask);
      if (f >= 0.05 && f <= 0.35 && count_components(mask) == 1) break;
    }
    char id[16];
    std::snprintf(id, sizeof id, "s%04d", i);
    out[i] = Sample{id, preprocess(img, cfg.image_size).image, std::move(mask), true};
  }
  return out;
}

int count_components(const Image& mask) {
  require_image(mask, "count_components");
  const int rows = mask.rows(), cols = mask.cols();
  std::vector<char> seen(mask.size(), 0);
  int count = 0;
  std::queue<int> q;
  for (int start = 0; start < rows * cols; ++start) {
    if (seen[start] || mask.values()[start] <= 0.5f) continue;
    ++count;
    seen[start] = 1;
    q.push(start);
    while (!q.empty()) {
      const int p = q.front();
      q.pop();
      const int r = p / cols, c = p % cols;
      const int nb[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
      for (auto [nr, nc] : nb) {
        if (nr < 0 || nc < 0 || nr >= rows || nc >= cols) continue;
        const int k = nr * cols + nc;
        if (!seen[k] && mask.values()[k] > 0.5f) {
          seen[k] = 1;
          q.push(k);
        }
      }
    }
  }
  return count;
}

double foreground_fraction(const Image& mask) {
  const auto v = mask.values();
  return static_cast<double>(std::count_if(v.begin(), v.end(), [](float x) { return x > 0.5f; })) / v.size();
}

int annotated_count(double rate, int pool) {
  return static_cast<int>(std::lround(rate * pool));
}

const Image& DatasetSplit::audit_hidden_mask(const std::string& id) const {
  const auto it = hidden_.find(id);
  require(it != hidden_.end(), "audit_hidden_mask: no hidden mask for " + id);
  return it->second;
}

std::vector<const Sample*> DatasetSplit::training_samples() const {
  std::vector<const Sample*> out;
  for (const auto& s : train_annotated) out.push_back(&s);
  for (const auto& s : train_unannotated) out.push_back(&s);
  return out;
}

nlohmann::json DatasetSplit::ids_json() const {
  auto ids = [](const std::vector<Sample>& v) {
    std::vector<std::string> out;
    for (const auto& s : v) out.push_back(s.id);
    return out;
  };
  return {{"rate", rate},
          {"seed", seed},
          {"train_annotated", ids(train_annotated)},
          {"train_unannotated", ids(train_unannotated)},
          {"validation", ids(validation)},
          {"test", ids(test)}};
}

DatasetSplit make_split(const std::vector<Sample>& samples, double rate, std::uint64_t seed,
                        const SplitPolicy& policy) {
  require(rate > 0.0 && rate <= 1.0, "make_split: rate must lie in (0, 1]");
  for (const auto& s : samples) require(s.mask.has_value(), "make_split: sample " + s.id + " has no mask");
  const int n = static_cast<int>(samples.size());
  const int n_test = policy.test_count >= 0 ? policy.test_count
                                            : static_cast<int>(std::lround(policy.test_fraction * n));
  const int n_train_share = n - n_test;
  const int n_val = policy.validation_count >= 0
                        ? policy.validation_count
                        : static_cast<int>(std::lround(policy.validation_fraction * n_train_share));
  const int pool = n_train_share - n_val;
  require(n_test >= 0 && n_val >= 0 && pool >= 1, "make_split: not enough samples");
  const int n_annot = annotated_count(rate, pool);
  require(n_annot >= 1, "make_split: rate yields no annotated image");

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  DatasetSplit split;
  split.rate = rate;
  split.seed = seed;
  for (int k = 0; k < n; ++k) {
    Sample s = samples[order[k]];
    if (k < n_test) {
      split.test.push_back(std::move(s));
    } else if (k < n_test + n_val) {
      split.validation.push_back(std::move(s));
    } else if (k < n_test + n_val + n_annot) {
      s.annotated = true;
      split.train_annotated.push_back(std::move(s));
    } else {
      split.hidden_.emplace(s.id, std::move(*s.mask));
      s.mask.reset();
      s.annotated = false;
      split.train_unannotated.push_back(std::move(s));
    }
  }
  // Stable id order inside each partition.
  for (auto* part : {&split.test, &split.validation, &split.train_annotated, &split.train_unannotated})
    std::sort(part->begin(), part->end(), [](const Sample& a, const Sample& b) { return a.id < b.id; });
  for (auto& s : split.test) s.annotated = false;
  for (auto& s : split.validation) s.annotated = false;
  return split;
}

Image resize_bilinear(const Image& img, int rows, int cols) {
  require_image(img, "resize_bilinear");
  require(rows > 0 && cols > 0, "resize_bilinear: empty target size");
  Image out(rows, cols);
  const double sy = static_cast<double>(img.rows()) / rows, sx = static_cast<double>(img.cols()) / cols;
  for (int r = 0; r < rows; ++r) {
    const double y = std::clamp((r + 0.5) * sy - 0.5, 0.0, img.rows() - 1.0);
    const int y0 = static_cast<int>(y), y1 = std::min(y0 + 1, img.rows() - 1);
    const double fy = y - y0;
    for (int c = 0; c < cols; ++c) {
      const double x = std::clamp((c + 0.5) * sx - 0.5, 0.0, img.cols() - 1.0);
      const int x0 = static_cast<int>(x), x1 = std::min(x0 + 1, img.cols() - 1);
      const double fx = x - x0;
      out(r, c) = static_cast<float>((1 - fy) * ((1 - fx) * img(y0, x0) + fx * img(y0, x1)) +
                                     fy * ((1 - fx) * img(y1, x0) + fx * img(y1, x1)));
    }
  }
  return out;
}

Preprocessed preprocess(const Image& raw, int size) {
  require_image(raw, "preprocess");
  Preprocessed out;
  out.image = (raw.rows() == size && raw.cols() == size) ? raw : resize_bilinear(raw, size, size);
  const auto [lo, hi] = std::minmax_element(out.image.values().begin(), out.image.values().end());
  const double mn = *lo, mx = *hi;
  if (!(mx > mn)) {
    out.image.fill(0.0f);
    out.constant = true;
    return out;
  }
  for (float& v : out.image.values()) v = static_cast<float>((v - mn) / (mx - mn));
  return out;
}

std::string rate_tag(double rate) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", rate);
  return buf;
}

void save_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  for (const auto& s : samples) {
    write_png16(dir / "images" / (s.id + ".png"), s.image);
    if (s.mask) write_mask_png(dir / "masks" / (s.id + ".png"), *s.mask);
  }
}

std::vector<Sample> load_dataset(const std::filesystem::path& dir) {
  require(std::filesystem::is_directory(dir / "images"), "load_dataset: missing " + (dir / "images").string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir / "images"))
    if (e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<Sample> out(files.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < files.size(); ++i) {
    Sample s;
    s.id = files[i].stem().string();
    s.image = read_png(files[i]);
    const auto mpath = dir / "masks" / files[i].filename();
    if (std::filesystem::exists(mpath)) {
      Image m = read_png(mpath);
      for (float& v : m.values()) v = v > 0.5f ? 1.0f : 0.0f;
      s.mask = std::move(m);
      s.annotated = true;
    }
    out[i] = std::move(s);
  }
  return out;
}

std::filesystem::path save_split(const std::filesystem::path& dir, const DatasetSplit& split) {
  std::filesystem::create_directories(dir);
  const auto path = dir / ("split_" + rate_tag(split.rate) + "_" + std::to_string(split.seed) + ".json");
  std::ofstream(path) << split.ids_json().dump(2) << "\n";
  return path;
}

}  // namespace segreg
