#include "segreg/experiment.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace segreg {

namespace fs = std::filesystem;

namespace {

nlohmann::json data_meta(const ExperimentConfig& cfg) {
  return {{"count", cfg.dataset_count}, {"image_size", cfg.image_size}, {"data_seed", cfg.data_seed}};
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  require(static_cast<bool>(os), "cannot write " + path.string());
  os << j.dump(2) << "\n";
}

std::optional<SegModel> try_load_seg(const fs::path& dir) {
  if (!fs::exists(dir)) return std::nullopt;
  return load_seg_model(dir);
}

}  // namespace

std::string run_name(const std::string& method, double rate, std::uint64_t seed) {
  return method + "_" + rate_tag(rate) + "_" + std::to_string(seed);
}

std::vector<Sample> load_or_generate(const ExperimentConfig& cfg, const fs::path& data_dir) {
  const auto meta_path = data_dir / "meta.json";
  if (fs::exists(meta_path)) {
    std::ifstream is(meta_path);
    const auto meta = nlohmann::json::parse(is);
    require(meta == data_meta(cfg), "dataset in " + data_dir.string() + " was generated with different settings (" +
                                        meta.dump() + ")");
    return load_dataset(data_dir);
  }
  save_dataset(data_dir, generate_synthetic({cfg.dataset_count, cfg.image_size}, cfg.data_seed));
  write_json(meta_path, data_meta(cfg));
  // Reload so every caller trains on the same quantised images.
  return load_dataset(data_dir);
}

DatasetSplit experiment_split(const std::vector<Sample>& samples, const ExperimentConfig& cfg) {
  return make_split(samples, cfg.annotation_rate, cfg.seed);
}

fs::path train_method(const std::string& method, const ExperimentConfig& cfg, const std::vector<Sample>& samples,
                      const fs::path& out_root, bool resume) {
  require(method == "fs" || method == "mt" || method == "joint", "unknown method '" + method + "'");
  const auto dir = out_root / run_name(method, cfg.annotation_rate, cfg.seed);
  if (!resume) fs::remove_all(dir);
  fs::create_directories(dir);
  write_json(dir / "config.json", to_json(cfg));
  const auto split = experiment_split(samples, cfg);
  save_split(dir, split);

  if (method == "joint") {
    const auto state = train_joint(cfg, split, dir, resume);
    save_seg_model(dir / "final" / "seg", state.seg, state.iteration);
    save_reg_model(dir / "final" / "reg", state.reg, state.iteration);
    return dir;
  }
  RunLog log(dir, resume);
  const SegModel m = method == "fs" ? train_fully_supervised(cfg, split, log) : train_mean_teacher(cfg, split, log);
  save_seg_model(dir / "final" / "seg", m, 0);
  return dir;
}

MetricsReport evaluate_runs(const ExperimentConfig& cfg, const std::vector<Sample>& samples, const fs::path& out_root) {
  const auto split = experiment_split(samples, cfg);
  const double rate = cfg.annotation_rate;
  const auto dir_of = [&](const char* m) { return out_root / run_name(m, rate, cfg.seed); };

  EvalModels models;
  models.fs = try_load_seg(dir_of("fs") / "final" / "seg");
  models.mt = try_load_seg(dir_of("mt") / "final" / "seg");
  models.joint = try_load_seg(dir_of("joint") / "final" / "seg");
  if (fs::exists(dir_of("joint") / "final" / "reg")) models.joint_reg = load_reg_model(dir_of("joint") / "final" / "reg");
  for (const auto& s : split.train_annotated) models.annotated.push_back(&s);
  models.n_pseudo = cfg.n_pseudo;
  models.seed = cfg.seed;

  const auto rep = evaluate(models, split.test, rate);
  const auto eval_dir = out_root / ("eval_" + rate_tag(rate) + "_" + std::to_string(cfg.seed));
  fs::create_directories(eval_dir);
  save_metrics_csv(eval_dir / "metrics.csv", rep.rows);
  write_json(eval_dir / "summary.json", rep.summary_json());

  const std::pair<const char*, std::vector<const char*>> owners[] = {
      {"fs", {"FS"}}, {"mt", {"MT"}}, {"joint", {"Joint", "Combined"}}};
  for (const auto& [dir, names] : owners) {
    if (!fs::exists(dir_of(dir))) continue;
    std::vector<MetricsRow> rows;
    for (const char* n : names)
      for (const auto& r : rep.rows_for(n)) rows.push_back(r);
    save_metrics_csv(dir_of(dir) / "metrics.csv", rows);
  }
  if (fs::exists(dir_of("joint"))) {
    nlohmann::json audit = nlohmann::json::array();
    for (const auto& a : audit_pseudo_masks(dir_of("joint"), split))
      audit.push_back({{"iteration", a.iteration}, {"n", a.n}, {"seg_dsc", a.seg_dsc}, {"reg_dsc", a.reg_dsc},
                       {"fused_dsc", a.fused_dsc}});
    write_json(dir_of("joint") / "pseudo_audit.json", audit);
  }
  return rep;
}

std::string compare_table(const fs::path& out_root, const std::vector<double>& rates, std::uint64_t seed) {
  static const char* kMethods[] = {"FS", "MT", "Joint", "Combined"};
  std::ostringstream os;
  os << "| method |";
  for (double r : rates) os << " DSC " << rate_tag(100 * r) << "% | HD " << rate_tag(100 * r) << "% |";
  os << "\n|---|";
  for (std::size_t i = 0; i < rates.size(); ++i) os << "---|---|";
  os << "\n";
  std::vector<MetricsReport> reports;
  for (double r : rates) {
    MetricsReport rep;
    const auto path = out_root / ("eval_" + rate_tag(r) + "_" + std::to_string(seed)) / "metrics.csv";
    if (fs::exists(path)) rep.rows = load_metrics_csv(path);
    reports.push_back(std::move(rep));
  }
  char buf[64];
  for (const char* m : kMethods) {
    os << "| " << m << " |";
    for (const auto& rep : reports) {
      const auto s = rep.summary(m);
      if (s.n == 0) {
        os << " n/a | n/a |";
        continue;
      }
      std::snprintf(buf, sizeof buf, " %.2f ± %.2f | %.2f ± %.2f |", s.dsc_mean, s.dsc_std, s.hd_mean, s.hd_std);
      os << buf;
    }
    os << "\n";
  }
  // Significance of MT against Combined, per rate.
  os << "\nWilcoxon MT vs Combined (DSC):";
  for (std::size_t i = 0; i < rates.size(); ++i) {
    os << " " << rate_tag(100 * rates[i]) << "%: ";
    try {
      const auto w = reports[i].compare("MT", "Combined");
      std::snprintf(buf, sizeof buf, "p=%.3g%s", w.p, w.p < 0.05 ? "*" : "");
      os << buf;
    } catch (const ContractViolation&) {
      os << "n/a";
    }
  }
  os << "\n";
  return os.str();
}

}  // namespace segreg
