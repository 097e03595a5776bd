// End-to-end acceptance run. Criteria 1-4 are in-process oracle suites;
// 5-9 drive the command-line tool through a full desk-scale experiment and
// inspect what it leaves on disk.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "segreg/experiment.hpp"
#include "test_support.hpp"

using namespace segreg;
using namespace segreg::testing;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, const char* name, bool pass, double secs, const std::string& detail) {
  std::printf("criterion %d: %s %s [%.1fs] %s\n", id, pass ? "PASS" : "FAIL", name, secs, detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

Grid<double> fractional_field(std::mt19937_64& rng, int n, double span) {
  // Offsets keep clear of integer crossings so central differences stay on one bilinear patch.
  std::uniform_int_distribution<int> whole(static_cast<int>(-span), static_cast<int>(span));
  std::uniform_real_distribution<double> frac(0.15, 0.85);
  Grid<double> d(n, n, 2);
  for (double& v : d.values()) v = whole(rng) + frac(rng);
  return d;
}

// 1. Loss oracles on 50 random 8x8 inputs.
void criterion_losses() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  double worst = 0;
  for (int t = 0; t < 50; ++t) {
    const auto p = random_grid(rng, 8, 8), q = random_grid(rng, 8, 8);
    const auto d = random_grid(rng, 8, 8, 2, -3.0, 3.0);
    worst = std::max(worst, std::abs(soft_dice_loss(p, q).value - oracle::soft_dice(p, q)));
    worst = std::max(worst, std::abs(gncc(p, q).value - oracle::gncc(p, q)));
    worst = std::max(worst, std::abs(smoothness_penalty(d).value - oracle::smoothness(d)));
  }
  const double secs = seconds_since(t0);
  report(1, "loss oracles", worst <= 1e-6 && secs < 10, secs, fmt("max abs error %.3g (limit 1e-6)", worst));
}

// 2. Analytic vs central-difference gradients on 8x8 inputs.
void criterion_gradients() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(202);
  double worst = 0;
  for (int t = 0; t < 10; ++t) {
    const auto p = random_grid(rng, 8, 8, 1, 0.05, 0.95), q = random_grid(rng, 8, 8);
    Grid<double> g(8, 8);
    soft_dice_loss(p, q, &g);
    worst = std::max(worst, relative_error(g, numeric_gradient([&](const Grid<double>& x) { return soft_dice_loss(x, q).value; }, p, 1e-6)));
    g = Grid<double>(8, 8);
    gncc(p, q, &g);
    worst = std::max(worst, relative_error(g, numeric_gradient([&](const Grid<double>& x) { return gncc(x, q).value; }, p, 1e-6)));
    const auto d = random_grid(rng, 8, 8, 2, -3.0, 3.0);
    Grid<double> gd(8, 8, 2);
    smoothness_penalty(d, &gd);
    worst = std::max(worst, relative_error(gd, numeric_gradient([&](const Grid<double>& x) { return smoothness_penalty(x).value; }, d, 1e-6)));

    for (Border b : {Border::clamp, Border::zero}) {
      const auto f = fractional_field(rng, 8, 2);
      const auto w = random_grid(rng, 8, 8, 1, -1.0, 1.0);
      auto loss = [&](const Grid<double>& field) {
        const auto out = warp(p, field, b);
        double s = 0;
        for (std::size_t i = 0; i < out.size(); ++i) s += w.values()[i] * out.values()[i];
        return s;
      };
      Grid<double> gf(8, 8, 2);
      warp_backward(p, f, b, w, &gf, static_cast<Grid<double>*>(nullptr));
      worst = std::max(worst, relative_error(gf, numeric_gradient(loss, f, 1e-6)));
    }
  }
  const double secs = seconds_since(t0);
  report(2, "gradient checks", worst < 1e-4 && secs < 60, secs, fmt("max relative error %.3g (limit 1e-4)", worst));
}

// 3. Warp invariants.
void criterion_warp() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(303);
  bool identity = true, shift = true;
  for (int t = 0; t < 20; ++t) {
    const auto img = random_grid<float>(rng, 32, 32);
    identity = identity && warp(img, make_field<float>(32, 32), Border::clamp) == img &&
               warp(img, make_field<float>(32, 32), Border::zero) == img;
    const int dr = static_cast<int>(rng() % 7) - 3, dc = static_cast<int>(rng() % 7) - 3;
    const auto out = warp(img, make_field<float>(32, 32, float(dr), float(dc)), Border::zero);
    for (int r = 3; r < 29; ++r)
      for (int c = 3; c < 29; ++c) shift = shift && out(r, c) == img(r + dr, c + dc);
  }
  // Round trip of the spatial augmentation on smooth masks over the configured ranges.
  const auto masks = generate_synthetic({20, 64}, 304);
  double worst_mae = 0;
  for (const auto& s : masks) {
    for (int k = 0; k < 5; ++k) {
      const AugmentSpec a = sample_augment(rng);
      const auto back = invert_augment(apply_spatial(*s.mask, a), a);
      double mae = 0;
      for (std::size_t i = 0; i < back.size(); ++i) mae += std::abs(back.values()[i] - s.mask->values()[i]);
      worst_mae = std::max(worst_mae, mae / back.size());
    }
  }
  const double secs = seconds_since(t0);
  report(3, "warp invariants", identity && shift && worst_mae < 0.02 && secs < 30, secs,
         std::string("identity ") + (identity ? "exact" : "BROKEN") + ", integer shift " + (shift ? "exact" : "BROKEN") +
             fmt(", worst TTA round-trip MAE %.4f (limit 0.02)", worst_mae));
}

double brute_hausdorff(const Image& a, const Image& b) {
  auto directed = [](const Image& x, const Image& y) {
    double worst = 0;
    for (int i = 0; i < x.rows(); ++i)
      for (int j = 0; j < x.cols(); ++j) {
        if (x(i, j) < 0.5f) continue;
        double best = 1e300;
        for (int k = 0; k < y.rows(); ++k)
          for (int l = 0; l < y.cols(); ++l)
            if (y(k, l) > 0.5f) best = std::min(best, std::hypot(double(i - k), double(j - l)));
        worst = std::max(worst, best);
      }
    return worst;
  };
  return std::max(directed(a, b), directed(b, a));
}

// 4. Metric oracles.
void criterion_metrics() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(404);
  int hd_ok = 0;
  for (int t = 0; t < 100; ++t) {
    std::bernoulli_distribution on(0.05 + 0.4 * (t % 5) / 4.0);
    Image a(16, 16), b(16, 16);
    for (float& v : a.values()) v = on(rng);
    for (float& v : b.values()) v = on(rng);
    a(t % 16, 0) = 1;
    b(0, t % 16) = 1;
    hd_ok += std::abs(hausdorff(a, b) - brute_hausdorff(a, b)) < 1e-12;
  }
  Image a(4, 4), b(4, 4), c(4, 4);
  a(1, 1) = a(1, 2) = a(2, 1) = a(2, 2) = 1;
  b(1, 2) = b(1, 3) = b(2, 2) = b(2, 3) = 1;
  c(3, 0) = 1;
  const bool dsc_ok = dsc(a, a) == 1.0 && dsc(a, b) == 0.5 && dsc(a, c) == 0.0 && dsc(Image(4, 4), Image(4, 4)) == 1.0;
  const double p6 = wilcoxon_signed_rank({1, 2, 3, 4, 5, 6}, std::vector<double>(6, 0.0)).p;
  const double secs = seconds_since(t0);
  report(4, "metric oracles", hd_ok == 100 && dsc_ok && std::abs(p6 - 0.03125) < 1e-12 && secs < 60, secs,
         fmt("hausdorff %g/100 match brute force, wilcoxon n=6 p=%.6g (expect 0.03125), dsc hand cases ", hd_ok, p6) +
             (dsc_ok ? "match" : "MISMATCH"));
}

struct Pipeline {
  fs::path cli, config, work;
  ExperimentConfig cfg;
  double train_secs = 0;  // fs + mt + joint + eval for run a
  bool ok = true;
  std::string error;

  fs::path root_a() const { return work / "a"; }
  fs::path root_b() const { return work / "b"; }
  fs::path run(const fs::path& root, const char* method) const {
    return root / run_name(method, cfg.annotation_rate, cfg.seed);
  }

  bool sh(const std::string& args, const fs::path& root) {
    const std::string cmd = "\"" + cli.string() + "\" " + args + " --config \"" + config.string() + "\" --out \"" +
                            root.string() + "\" --data \"" + (work / "data").string() + "\" >> \"" +
                            (root / "cli.log").string() + "\" 2>&1";
    fs::create_directories(root);
    const auto t0 = Clock::now();
    std::printf("  running: segreg %s (%s)\n", args.c_str(), root.filename().c_str());
    std::fflush(stdout);
    const int rc = std::system(cmd.c_str());
    std::printf("    done in %.1fs, exit %d\n", seconds_since(t0), rc);
    std::fflush(stdout);
    if (rc != 0) {
      ok = false;
      error = "segreg " + args + " failed; see " + (root / "cli.log").string();
    }
    return rc == 0;
  }

  void run_all(bool reuse) {
    const bool have = fs::exists(run(root_a(), "joint") / "metrics.csv") && fs::exists(run(root_b(), "joint") / "metrics.csv");
    if (reuse && have) {
      std::printf("  reusing runs under %s\n", work.c_str());
      return;
    }
    fs::remove_all(work);
    const auto t0 = Clock::now();
    ok = sh("gen-data", work) && sh("train --method fs", root_a()) && sh("train --method mt", root_a()) &&
         sh("train --method joint", root_a()) && sh("eval", root_a());
    train_secs = seconds_since(t0);
    ok = ok && sh("train --method joint", root_b()) && sh("eval", root_b());
  }
};

// 5. Registration recovers known translations on held-out test images.
void criterion_registration(const Pipeline& p) {
  const auto t0 = Clock::now();
  const auto reg_dir = p.run(p.root_a(), "joint") / "final" / "reg";
  if (!fs::exists(reg_dir)) return report(5, "known-translation registration", false, 0, "no trained model");
  RegModel reg = load_reg_model(reg_dir);
  const auto samples = load_dataset(p.work / "data");
  const auto split = experiment_split(samples, p.cfg);
  std::mt19937_64 rng(505);
  std::uniform_real_distribution<double> radius(0, 1), angle(0, 2 * M_PI);
  const int n = p.cfg.image_size;
  std::vector<double> errors;
  int improved = 0;
  const int pairs = 40;
  for (int k = 0; k < pairs; ++k) {
    const Image& src = split.test[k % split.test.size()].image;
    const double r = 6.0 * std::sqrt(radius(rng)), th = angle(rng);
    const double tr = r * std::sin(th), tc = r * std::cos(th);
    const Image tgt = warp(src, make_field<float>(n, n, float(tr), float(tc)), Border::clamp);
    const Field d = reg.forward(src, tgt).back();
    std::vector<float> dr(d.plane(0).begin(), d.plane(0).end()), dc(d.plane(1).begin(), d.plane(1).end());
    std::nth_element(dr.begin(), dr.begin() + dr.size() / 2, dr.end());
    std::nth_element(dc.begin(), dc.begin() + dc.size() / 2, dc.end());
    errors.push_back(std::hypot(dr[dr.size() / 2] - tr, dc[dc.size() / 2] - tc));
    improved += gncc(warp(src, d, Border::clamp), tgt).value < gncc(src, tgt).value;
  }
  std::vector<double> sorted = errors;
  std::sort(sorted.begin(), sorted.end());
  const double worst = sorted.back(), median = sorted[sorted.size() / 2];
  const int within = static_cast<int>(std::count_if(errors.begin(), errors.end(), [](double e) { return e <= 1.0; }));
  const double frac = double(improved) / pairs;
  const double secs = seconds_since(t0);
  const bool pass = within == pairs && frac >= 0.8;
  report(5, "known-translation registration", pass, secs,
         fmt("median-displacement error <= 1 px on %g/40 pairs (median %.3f, worst %.3f px); ", within, median, worst) +
             fmt("GNCC improved on %.0f%% of pairs (need 80%%)", 100 * frac));
}

// 6. Ordering of the four rows at 1%.
void criterion_table(const Pipeline& p) {
  const auto path = p.root_a() / ("eval_" + rate_tag(p.cfg.annotation_rate) + "_" + std::to_string(p.cfg.seed)) / "metrics.csv";
  if (!fs::exists(path)) return report(6, "table ordering", false, 0, "no metrics");
  MetricsReport rep;
  rep.rows = load_metrics_csv(path);
  const double fs_ = rep.summary("FS").dsc_mean, mt = rep.summary("MT").dsc_mean, joint = rep.summary("Joint").dsc_mean,
               comb = rep.summary("Combined").dsc_mean;
  const bool c1 = comb >= joint - 0.02, c2 = joint >= fs_ + 0.05, c3 = joint >= mt;
  report(6, "table ordering", c1 && c2 && c3 && p.train_secs < 45 * 60, p.train_secs,
         fmt("DSC FS %.4f, MT %.4f, Joint %.4f, ", fs_, mt, joint) + fmt("Combined %.4f; ", comb) +
             "Combined>=Joint-0.02 " + (c1 ? "yes" : "NO") + ", Joint>=FS+0.05 " + (c2 ? "yes" : "NO") +
             ", Joint>=MT " + (c3 ? "yes" : "NO"));
}

// 7. Fused pseudo-masks improve over the iterations.
void criterion_pseudo(const Pipeline& p) {
  const auto t0 = Clock::now();
  const auto samples = load_dataset(p.work / "data");
  const auto split = experiment_split(samples, p.cfg);
  const auto audit = audit_pseudo_masks(p.run(p.root_a(), "joint"), split);
  if (audit.size() < 2) return report(7, "pseudo-mask improvement", false, 0, "fewer than two iterations stored");
  const double gain = audit.back().fused_dsc - audit.front().fused_dsc;
  std::string trace;
  for (const auto& a : audit) trace += fmt(" %.4f", a.fused_dsc);
  report(7, "pseudo-mask improvement", gain >= 0.05, seconds_since(t0),
         fmt("fused DSC vs hidden truth, iteration %g -> %g:", audit.front().iteration, audit.back().iteration) + trace +
             fmt(" (gain %.4f, need 0.05)", gain));
}

std::string slurp(const fs::path& path) {
  std::ifstream is(path);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// 8. Two joint runs with the same seed give identical metric CSVs.
void criterion_determinism(const Pipeline& p) {
  const auto a = p.run(p.root_a(), "joint") / "metrics.csv", b = p.run(p.root_b(), "joint") / "metrics.csv";
  if (!fs::exists(a) || !fs::exists(b)) return report(8, "determinism", false, 0, "metrics missing");
  const auto sa = slurp(a), sb = slurp(b);
  const auto lines = std::count(sa.begin(), sa.end(), '\n');
  report(8, "determinism", !sa.empty() && sa == sb, 0,
         fmt("joint metrics.csv (%g lines) ", double(lines)) + (sa == sb ? "byte-identical" : "DIFFER"));
}

// 9. No test image in any training batch of any method.
void criterion_hygiene(const Pipeline& p) {
  const auto t0 = Clock::now();
  const auto samples = load_dataset(p.work / "data");
  const auto split = experiment_split(samples, p.cfg);
  std::set<std::string> test;
  for (const auto& s : split.test) test.insert(s.id);
  long entries = 0, leaks = 0, logs = 0;
  bool split_files_agree = true;
  for (const auto& root : {p.root_a(), p.root_b()})
    for (const char* m : {"fs", "mt", "joint"}) {
      const auto dir = p.run(root, m);
      if (!fs::exists(dir / "batches.log")) continue;
      ++logs;
      std::ifstream sj(dir / ("split_" + rate_tag(p.cfg.annotation_rate) + "_" + std::to_string(p.cfg.seed) + ".json"));
      split_files_agree = split_files_agree && sj && nlohmann::json::parse(sj)["test"] == split.ids_json()["test"];
      std::ifstream is(dir / "batches.log");
      std::string line;
      while (std::getline(is, line)) {
        std::istringstream ls(line);
        std::string phase, tok;
        int it, ep, step;
        ls >> phase >> it >> ep >> step;
        while (ls >> tok) {
          ++entries;
          leaks += test.count(tok);
        }
      }
    }
  report(9, "split hygiene", logs >= 4 && leaks == 0 && entries > 0 && split_files_agree, seconds_since(t0),
         fmt("%g batch logs, %g logged ids, %g test ids among them", double(logs), double(entries), double(leaks)) +
             (split_files_agree ? "" : "; stored split disagrees with recomputed split"));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria 1-9"};
  Pipeline p;
  std::string cli, config, work;
  bool reuse = false;
  app.add_option("--cli", cli, "segreg executable")->required();
  app.add_option("--config", config, "desk config")->required()->check(CLI::ExistingFile);
  app.add_option("--work", work, "scratch directory for the runs")->required();
  app.add_flag("--reuse", reuse, "reuse finished runs in --work");
  CLI11_PARSE(app, argc, argv);
  p.cli = fs::absolute(cli);
  p.config = fs::absolute(config);
  p.work = fs::absolute(work);
  p.cfg = load_config(p.config);

  criterion_losses();
  criterion_gradients();
  criterion_warp();
  criterion_metrics();

  std::printf("desk experiment: rate %g, seed %llu, %d images at %dx%d, %d iterations\n", p.cfg.annotation_rate,
              static_cast<unsigned long long>(p.cfg.seed), p.cfg.dataset_count, p.cfg.image_size, p.cfg.image_size,
              p.cfg.n_iterations);
  p.run_all(reuse);
  if (!p.ok) std::printf("  pipeline error: %s\n", p.error.c_str());
  criterion_registration(p);
  criterion_table(p);
  criterion_pseudo(p);
  criterion_determinism(p);
  criterion_hygiene(p);

  std::printf("%d of 9 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
