#include "segreg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <regex>
#include <set>
#include <sstream>

#include "segreg/pseudo_mask.hpp"

namespace segreg {

namespace {

void require_binary(const Image& m, const char* what) {
  for (float v : m.values()) require(v == 0.0f || v == 1.0f, std::string(what) + ": mask is not binary");
}

constexpr double kFar = 1e20;

// Squared distance transform along one line (lower envelope of parabolas).
void edt_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<int>& v, std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  auto cross = [&](int q, int p) { return ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * q - 2.0 * p); };
  for (int q = 1; q < n; ++q) {
    double s = cross(q, v[k]);
    while (s <= z[k]) s = cross(q, v[--k]);
    v[++k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    d[q] = double(q - v[k]) * (q - v[k]) + f[v[k]];
  }
}

/// Exact squared Euclidean distance to the nearest foreground pixel.
std::vector<double> squared_edt(const Image& mask) {
  const int rows = mask.rows(), cols = mask.cols();
  std::vector<double> g(mask.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = mask.values()[i] > 0.5f ? 0.0 : kFar;
  const int n = std::max(rows, cols);
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<int> v(n);
  for (int c = 0; c < cols; ++c) {
    f.resize(rows), d.resize(rows);
    for (int r = 0; r < rows; ++r) f[r] = g[r * cols + c];
    edt_1d(f, d, v, z);
    for (int r = 0; r < rows; ++r) g[r * cols + c] = d[r];
  }
  for (int r = 0; r < rows; ++r) {
    f.resize(cols), d.resize(cols);
    for (int c = 0; c < cols; ++c) f[c] = g[r * cols + c];
    edt_1d(f, d, v, z);
    for (int c = 0; c < cols; ++c) g[r * cols + c] = d[c];
  }
  return g;
}

double directed(const Image& from, const std::vector<double>& to_edt) {
  double worst = 0;
  for (std::size_t i = 0; i < from.size(); ++i)
    if (from.values()[i] > 0.5f) worst = std::max(worst, to_edt[i]);
  return worst;
}

struct Signed {
  std::vector<double> ranks;  // mid-ranks of |d|
  std::vector<bool> positive;
  double tie_term = 0;        // sum (t^3 - t)
};

Signed rank_differences(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size(), "wilcoxon: samples must have equal length");
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) d.push_back(a[i] - b[i]);
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return std::abs(d[x]) < std::abs(d[y]); });
  Signed out;
  out.ranks.resize(d.size());
  out.positive.resize(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) out.positive[i] = d[i] > 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    const double mid = (i + j) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) out.ranks[order[k]] = mid;
    const double t = static_cast<double>(j - i + 1);
    out.tie_term += t * t * t - t;
    i = j + 1;
  }
  return out;
}

double w_plus_of(const Signed& s) {
  double w = 0;
  for (std::size_t i = 0; i < s.ranks.size(); ++i)
    if (s.positive[i]) w += s.ranks[i];
  return w;
}

double sample_std(const std::vector<double>& v, double mean) {
  if (v.size() < 2) return 0.0;
  double acc = 0;
  for (double x : v) acc += (x - mean) * (x - mean);
  return std::sqrt(acc / (v.size() - 1));
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

Image binarize(const Image& soft) {
  Image out(soft.rows(), soft.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = soft.values()[i] > 0.5f ? 1.0f : 0.0f;
  return out;
}

double dsc(const Image& pred, const Image& gt) {
  require(pred.same_shape(gt), "dsc: shape mismatch");
  require_binary(pred, "dsc");
  require_binary(gt, "dsc");
  double inter = 0, a = 0, b = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += pred.values()[i] * gt.values()[i];
    a += pred.values()[i];
    b += gt.values()[i];
  }
  return a + b == 0 ? 1.0 : 2 * inter / (a + b);
}

double hausdorff(const Image& pred, const Image& gt) {
  require(pred.same_shape(gt), "hausdorff: shape mismatch");
  require_binary(pred, "hausdorff");
  require_binary(gt, "hausdorff");
  const auto any = [](const Image& m) { return std::any_of(m.values().begin(), m.values().end(), [](float v) { return v > 0.5f; }); };
  if (!any(pred) || !any(gt)) return kUndefinedHd;
  return std::sqrt(std::max(directed(pred, squared_edt(gt)), directed(gt, squared_edt(pred))));
}

WilcoxonResult wilcoxon_exact(const std::vector<double>& a, const std::vector<double>& b) {
  const Signed s = rank_differences(a, b);
  WilcoxonResult r;
  r.n = static_cast<int>(s.ranks.size());
  r.exact = true;
  if (r.n == 0) {
    r.all_zero = true;
    return r;
  }
  r.w_plus = w_plus_of(s);
  // Distribution of twice the positive rank sum over all 2^n sign patterns.
  std::vector<int> twice(r.n);
  int total = 0;
  for (int i = 0; i < r.n; ++i) total += twice[i] = static_cast<int>(std::lround(2 * s.ranks[i]));
  std::vector<double> count(total + 1, 0.0);
  count[0] = 1;
  for (int t : twice)
    for (int v = total; v >= t; --v) count[v] += count[v - t];
  const double all = std::ldexp(1.0, r.n);
  const int w2 = static_cast<int>(std::lround(2 * r.w_plus));
  double lo = 0, hi = 0;
  for (int v = 0; v <= total; ++v) {
    if (v <= w2) lo += count[v];
    if (v >= w2) hi += count[v];
  }
  r.p = std::min(1.0, 2 * std::min(lo, hi) / all);
  return r;
}

WilcoxonResult wilcoxon_normal(const std::vector<double>& a, const std::vector<double>& b) {
  const Signed s = rank_differences(a, b);
  WilcoxonResult r;
  r.n = static_cast<int>(s.ranks.size());
  if (r.n == 0) {
    r.all_zero = true;
    return r;
  }
  r.w_plus = w_plus_of(s);
  const double n = r.n;
  const double mean = n * (n + 1) / 4;
  const double var = n * (n + 1) * (2 * n + 1) / 24 - s.tie_term / 48;
  if (var <= 0) return r;
  const double z = std::max(0.0, std::abs(r.w_plus - mean) - 0.5) / std::sqrt(var);
  r.p = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
  return r;
}

WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size(), "wilcoxon: samples must have equal length");
  int nonzero = 0;
  for (std::size_t i = 0; i < a.size(); ++i) nonzero += a[i] != b[i];
  if (nonzero == 0) {
    WilcoxonResult r;
    r.all_zero = true;
    return r;
  }
  require(nonzero >= 6, "wilcoxon: need at least 6 nonzero differences");
  return nonzero <= 12 ? wilcoxon_exact(a, b) : wilcoxon_normal(a, b);
}

std::vector<std::string> MetricsReport::methods() const {
  std::vector<std::string> out;
  for (const auto& r : rows)
    if (std::find(out.begin(), out.end(), r.method) == out.end()) out.push_back(r.method);
  return out;
}

std::vector<MetricsRow> MetricsReport::rows_for(const std::string& method) const {
  std::vector<MetricsRow> out;
  for (const auto& r : rows)
    if (r.method == method) out.push_back(r);
  return out;
}

MethodSummary MetricsReport::summary(const std::string& method) const {
  MethodSummary s;
  s.method = method;
  std::vector<double> d, h;
  for (const auto& r : rows_for(method)) {
    d.push_back(r.dsc);
    if (r.hd < 0) {
      ++s.hd_undefined;
    } else {
      h.push_back(r.hd);
    }
  }
  s.n = static_cast<int>(d.size());
  if (!d.empty()) s.dsc_mean = std::accumulate(d.begin(), d.end(), 0.0) / d.size();
  if (!h.empty()) s.hd_mean = std::accumulate(h.begin(), h.end(), 0.0) / h.size();
  s.dsc_std = sample_std(d, s.dsc_mean);
  s.hd_std = sample_std(h, s.hd_mean);
  return s;
}

WilcoxonResult MetricsReport::compare(const std::string& a, const std::string& b, bool use_hd) const {
  std::map<std::string, double> va;
  for (const auto& r : rows_for(a)) va[r.image_id] = use_hd ? r.hd : r.dsc;
  std::vector<double> xa, xb;
  for (const auto& r : rows_for(b)) {
    const auto it = va.find(r.image_id);
    const double vb = use_hd ? r.hd : r.dsc;
    if (it == va.end() || (use_hd && (it->second < 0 || vb < 0))) continue;
    xa.push_back(it->second);
    xb.push_back(vb);
  }
  return wilcoxon_signed_rank(xa, xb);
}

nlohmann::json MetricsReport::summary_json() const {
  nlohmann::json j;
  j["methods"] = nlohmann::json::object();
  for (const auto& m : methods()) {
    const auto s = summary(m);
    j["methods"][m] = {{"n", s.n},
                       {"dsc_mean", s.dsc_mean},
                       {"dsc_std", s.dsc_std},
                       {"hd_mean", s.hd_mean},
                       {"hd_std", s.hd_std},
                       {"hd_undefined", s.hd_undefined}};
  }
  for (const auto& m : missing) j["methods"][m] = "n/a";
  j["wilcoxon"] = nlohmann::json::object();
  const auto present = methods();
  for (std::size_t i = 0; i < present.size(); ++i)
    for (std::size_t k = i + 1; k < present.size(); ++k)
      for (bool hd : {false, true}) {
        nlohmann::json e;
        try {
          const auto w = compare(present[i], present[k], hd);
          e = {{"p", w.p}, {"n", w.n}, {"exact", w.exact}, {"all_zero", w.all_zero}, {"significant", w.p < 0.05}};
        } catch (const ContractViolation& ex) {
          e = {{"error", ex.what()}};
        }
        j["wilcoxon"][present[i] + " vs " + present[k]][hd ? "hd" : "dsc"] = e;
      }
  return j;
}

void save_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  std::ofstream os(path);
  require(static_cast<bool>(os), "cannot write " + path.string());
  os << "method,rate,image_id,dsc,hd\n";
  for (const auto& r : rows) os << r.method << ',' << fmt(r.rate) << ',' << r.image_id << ',' << fmt(r.dsc) << ',' << fmt(r.hd) << '\n';
}

std::vector<MetricsRow> load_metrics_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), "cannot open " + path.string());
  std::string line;
  std::getline(is, line);
  require(line == "method,rate,image_id,dsc,hd", "metrics csv: unexpected header in " + path.string());
  std::vector<MetricsRow> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[5];
    for (auto& s : f) std::getline(ss, s, ',');
    out.push_back({f[0], std::stod(f[1]), f[2], std::stod(f[3]), std::stod(f[4])});
  }
  return out;
}

MetricsRow score(const std::string& method, double rate, const std::string& id, const Image& soft_pred,
                 const Image& gt) {
  const Image pred = binarize(soft_pred), truth = binarize(gt);
  return {method, rate, id, dsc(pred, truth), hausdorff(pred, truth)};
}

MetricsReport evaluate(EvalModels& models, const std::vector<Sample>& test, double rate) {
  MetricsReport rep;
  auto run = [&](const char* name, std::optional<SegModel>& m) {
    if (!m) {
      rep.missing.push_back(name);
      return;
    }
    for (const auto& s : test)
      if (s.mask) rep.rows.push_back(score(name, rate, s.id, m->forward(s.image), *s.mask));
  };
  run("FS", models.fs);
  run("MT", models.mt);
  run("Joint", models.joint);
  if (models.joint && models.joint_reg && !models.annotated.empty()) {
    for (std::size_t i = 0; i < test.size(); ++i) {
      const Sample& s = test[i];
      if (!s.mask) continue;
      std::seed_seq seq{models.seed, std::uint64_t{7}, static_cast<std::uint64_t>(i)};
      std::uint32_t w[2];
      seq.generate(w, w + 2);
      const auto fused = combined_inference(*models.joint, *models.joint_reg, s.image, models.annotated,
                                            models.n_pseudo, (std::uint64_t{w[0]} << 32) | w[1]);
      rep.rows.push_back(score("Combined", rate, s.id, fused.confidence, *s.mask));
    }
  } else {
    rep.missing.push_back("Combined");
  }
  return rep;
}

std::vector<PseudoAudit> audit_pseudo_masks(const std::filesystem::path& run_dir, const DatasetSplit& split) {
  std::vector<PseudoAudit> out;
  const std::regex iter_re("iter_([0-9]+)");
  std::vector<int> iters;
  for (const auto& e : std::filesystem::directory_iterator(run_dir)) {
    std::smatch m;
    const std::string name = e.path().filename().string();
    if (std::regex_match(name, m, iter_re) && std::filesystem::exists(e.path() / "pseudo")) iters.push_back(std::stoi(m[1]));
  }
  std::sort(iters.begin(), iters.end());
  for (int k : iters) {
    const auto dir = run_dir / ("iter_" + std::to_string(k)) / "pseudo";
    PseudoAudit a;
    a.iteration = k;
    for (const auto& s : split.train_unannotated) {
      const Image gt = binarize(split.audit_hidden_mask(s.id));
      const auto file = s.id + ".png";
      if (!std::filesystem::exists(dir / "fused" / file)) continue;
      a.seg_dsc += dsc(binarize(read_png(dir / "seg" / file)), gt);
      a.reg_dsc += dsc(binarize(read_png(dir / "reg" / file)), gt);
      a.fused_dsc += dsc(binarize(read_png(dir / "fused" / file)), gt);
      ++a.n;
    }
    if (a.n > 0) {
      a.seg_dsc /= a.n;
      a.reg_dsc /= a.n;
      a.fused_dsc /= a.n;
    }
    out.push_back(a);
  }
  return out;
}

Grid<std::uint8_t> render_iteration_panel(const std::filesystem::path& run_dir, const std::string& image_id,
                                          const std::filesystem::path& out_png, PanelLayout* layout) {
  const std::regex iter_re("iter_([0-9]+)");
  int last = -1;
  for (const auto& e : std::filesystem::directory_iterator(run_dir)) {
    std::smatch m;
    const std::string name = e.path().filename().string();
    if (std::regex_match(name, m, iter_re)) last = std::max(last, std::stoi(m[1]));
  }
  require(last >= 0, "panel: no iteration directories under " + run_dir.string());
  static const char* kRows[3] = {"seg", "reg", "fused"};

  PanelLayout lay;
  lay.columns = last + 1;
  std::vector<std::optional<Grid<std::uint16_t>>> tiles(3 * lay.columns);
  for (int k = 0; k <= last; ++k) {
    bool complete = true;
    for (int r = 0; r < 3; ++r) {
      const auto p = run_dir / ("iter_" + std::to_string(k)) / "pseudo" / kRows[r] / (image_id + ".png");
      if (!std::filesystem::exists(p)) {
        complete = false;
        continue;
      }
      auto raw = read_png_raw(p);
      if (lay.tile == 0) lay.tile = raw.rows();
      require(raw.rows() == lay.tile && raw.cols() == lay.tile, "panel: tiles differ in size");
      tiles[r * lay.columns + k] = std::move(raw);
    }
    if (!complete) lay.gaps.push_back(k);
  }
  require(lay.tile > 0, "panel: no pseudo-masks stored for " + image_id);

  const int t = lay.tile, g = lay.gutter;
  Grid<std::uint8_t> panel(3 * t + 2 * g, lay.columns * t + (lay.columns - 1) * g, 1, std::uint8_t{64});
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < lay.columns; ++k) {
      const int r0 = r * (t + g), c0 = k * (t + g);
      const auto& tile = tiles[r * lay.columns + k];
      for (int i = 0; i < t; ++i)
        for (int j = 0; j < t; ++j) {
          std::uint8_t v;
          if (tile) {
            v = static_cast<std::uint8_t>(std::lround((*tile)(i, j) / 257.0));
          } else {
            v = (i == j || i + j == t - 1) ? 255 : 0;
          }
          panel(r0 + i, c0 + j) = v;
        }
    }
  if (!out_png.empty()) write_png8(out_png, panel);
  if (layout) *layout = lay;
  return panel;
}

}  // namespace segreg
