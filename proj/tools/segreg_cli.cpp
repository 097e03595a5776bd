#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "segreg/experiment.hpp"

using namespace segreg;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::string out = "runs";
  std::string data;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON config; missing keys keep their defaults")->check(CLI::ExistingFile);
  app->add_option("--out", c.out, "root directory for runs")->capture_default_str();
  app->add_option("--data", c.data, "dataset directory (default <out>/data)");
}

ExperimentConfig config_of(const Common& c) { return c.config.empty() ? ExperimentConfig{} : load_config(c.config); }

fs::path data_dir(const Common& c) { return c.data.empty() ? fs::path(c.out) / "data" : fs::path(c.data); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint segmentation and registration with soft pseudo-masks"};
  app.require_subcommand(1);

  Common gen_c;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  add_common(gen, gen_c);

  Common train_c;
  std::string method;
  double rate = -1;
  long long seed = -1;
  bool resume = false;
  auto* train = app.add_subcommand("train", "train one method");
  add_common(train, train_c);
  train->add_option("--method", method, "fs | mt | joint")->required()->check(CLI::IsMember({"fs", "mt", "joint"}));
  train->add_option("--rate", rate, "annotation rate, overrides the config");
  train->add_option("--seed", seed, "seed, overrides the config");
  train->add_flag("--resume", resume, "continue a joint run from its last completed iteration");

  Common eval_c;
  double eval_rate = -1;
  long long eval_seed = -1;
  auto* eval = app.add_subcommand("eval", "score every trained method for one rate and seed");
  add_common(eval, eval_c);
  eval->add_option("--rate", eval_rate, "annotation rate, overrides the config");
  eval->add_option("--seed", eval_seed, "seed, overrides the config");

  Common cmp_c;
  std::vector<double> cmp_rates{0.01, 0.1, 0.5};
  long long cmp_seed = -1;
  auto* compare = app.add_subcommand("compare", "table of evaluated runs across rates");
  add_common(compare, cmp_c);
  compare->add_option("--rates", cmp_rates, "annotation rates")->capture_default_str();
  compare->add_option("--seed", cmp_seed, "seed, overrides the config");

  Common panel_c;
  double panel_rate = -1;
  long long panel_seed = -1;
  std::string image_id, panel_out;
  auto* panel = app.add_subcommand("panel", "iteration panel of one unannotated image from a joint run");
  add_common(panel, panel_c);
  panel->add_option("--rate", panel_rate, "annotation rate, overrides the config");
  panel->add_option("--seed", panel_seed, "seed, overrides the config");
  panel->add_option("--image", image_id, "image id (default: first unannotated image)");
  panel->add_option("--output", panel_out, "PNG path (default <run>/panel_<id>.png)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const auto cfg = config_of(gen_c);
      const auto samples = load_or_generate(cfg, data_dir(gen_c));
      std::printf("%zu images in %s\n", samples.size(), data_dir(gen_c).c_str());
    } else if (train->parsed()) {
      auto cfg = config_of(train_c);
      if (rate >= 0) cfg.annotation_rate = rate;
      if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
      const auto samples = load_or_generate(cfg, data_dir(train_c));
      const auto dir = train_method(method, cfg, samples, train_c.out, resume);
      std::printf("%s\n", dir.c_str());
    } else if (eval->parsed()) {
      auto cfg = config_of(eval_c);
      if (eval_rate >= 0) cfg.annotation_rate = eval_rate;
      if (eval_seed >= 0) cfg.seed = static_cast<std::uint64_t>(eval_seed);
      const auto samples = load_or_generate(cfg, data_dir(eval_c));
      const auto rep = evaluate_runs(cfg, samples, eval_c.out);
      std::cout << rep.summary_json().dump(2) << "\n";
    } else if (compare->parsed()) {
      auto cfg = config_of(cmp_c);
      if (cmp_seed >= 0) cfg.seed = static_cast<std::uint64_t>(cmp_seed);
      const auto table = compare_table(cmp_c.out, cmp_rates, cfg.seed);
      std::ofstream(fs::path(cmp_c.out) / ("compare_" + std::to_string(cfg.seed) + ".md")) << table;
      std::cout << table;
    } else if (panel->parsed()) {
      auto cfg = config_of(panel_c);
      if (panel_rate >= 0) cfg.annotation_rate = panel_rate;
      if (panel_seed >= 0) cfg.seed = static_cast<std::uint64_t>(panel_seed);
      const auto run = fs::path(panel_c.out) / run_name("joint", cfg.annotation_rate, cfg.seed);
      if (image_id.empty()) {
        const auto split = experiment_split(load_or_generate(cfg, data_dir(panel_c)), cfg);
        require(!split.train_unannotated.empty(), "panel: the split has no unannotated images");
        image_id = split.train_unannotated.front().id;
      }
      const fs::path out = panel_out.empty() ? run / ("panel_" + image_id + ".png") : fs::path(panel_out);
      PanelLayout lay;
      render_iteration_panel(run, image_id, out, &lay);
      std::printf("%s (%d iterations", out.c_str(), lay.columns);
      if (!lay.gaps.empty()) std::printf(", %zu missing", lay.gaps.size());
      std::printf(")\n");
    }
  } catch (const ContractViolation& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
