#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "segreg/trainer.hpp"
#include "test_support.hpp"

using namespace segreg;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny() {
  ExperimentConfig c;
  c.image_size = 32;
  c.seg_base_width = 8;
  c.seg_depth = 3;
  c.reg_base_width = 8;
  c.reg_max_width = 16;
  c.k_levels = 3;
  c.lambda = {128, 64, 32};
  c.seg_epochs_initial = 2;
  c.seg_epochs_later = 1;
  c.reg_epochs_initial = 1;
  c.reg_epochs_later = 1;
  c.samples_per_epoch = 3;
  c.n_pseudo = 2;
  c.n_iterations = 2;
  c.seed = 3;
  c.annotation_rate = 0.1;
  c.mt.ramp_start = 1;
  c.mt.ramp_end = 2;
  return c;
}

const std::vector<Sample>& corpus() {
  static const auto data = generate_synthetic({40, 32}, 5);
  return data;
}

DatasetSplit tiny_split(double rate = 0.1) { return make_split(corpus(), rate, 9); }

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("segreg_trainer_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<std::vector<float>> values(const SegModel& m) {
  std::vector<std::vector<float>> out;
  for (const auto* p : m.parameters()) out.push_back(p->value);
  return out;
}

std::vector<std::vector<float>> values(const RegModel& m) {
  std::vector<std::vector<float>> out;
  for (const auto* p : m.parameters()) out.push_back(p->value);
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config: JSON round trip and rejection of bad input") {
  ExperimentConfig c = tiny();
  c.mt.ema_decay = 0.95;
  c.reg_shift_px = 2.5;
  const auto back = config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK(back.mt.ema_decay == 0.95);

  const auto partial = config_from_json(nlohmann::json{{"n_iterations", 3}});
  CHECK(partial.n_iterations == 3);
  CHECK(partial.seg_lr_initial == 1e-4);
  CHECK(partial.lambda.size() == 5);

  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"n_iteration", 3}}), ContractViolation);
  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"mt", {{"decay", 0.5}}}}), ContractViolation);
  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"k_levels", 4}}), ContractViolation);
  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"annotation_rate", 0.0}}), ContractViolation);
}

TEST_CASE("config: epoch scaling") {
  ExperimentConfig c;
  c.epoch_scale = 0.01;
  CHECK(c.scaled(500) == 5);
  CHECK(c.scaled(50) == 1);
  CHECK(c.scaled(0) == 0);
}

TEST_CASE("EMA update algebra") {
  std::mt19937_64 rng(4);
  SegModel teacher(SegConfig{32, 8, 3, 1}), student(SegConfig{32, 8, 3, 2});
  const auto t0 = values(teacher), s0 = values(student);
  REQUIRE(t0 != s0);

  SegModel t = teacher;
  ema_update(t, student, 1.0);
  CHECK(values(t) == t0);
  ema_update(t, student, 0.0);
  CHECK(values(t) == s0);

  t = teacher;
  ema_update(t, student, 0.9);
  const auto got = values(t);
  double worst = 0;
  for (std::size_t k = 0; k < got.size(); ++k)
    for (std::size_t i = 0; i < got[k].size(); ++i)
      worst = std::max(worst, std::abs(got[k][i] - (0.9 * t0[k][i] + 0.1 * s0[k][i])));
  CHECK(worst < 1e-6);
}

TEST_CASE("joint training: iteration bookkeeping and artefacts") {
  const auto cfg = tiny();
  const auto data = tiny_split();
  REQUIRE(data.train_annotated.size() == 3);
  const auto dir = scratch("bookkeeping");
  const auto state = train_joint(cfg, data, dir);

  CHECK(state.iteration == 2);
  REQUIRE(state.history.size() == 3);
  for (int k = 0; k <= 2; ++k) {
    CHECK(state.history[k].iteration == k);
    CHECK(fs::exists(dir / ("iter_" + std::to_string(k)) / "state.json"));
    CHECK(fs::exists(dir / ("iter_" + std::to_string(k)) / "seg"));
    CHECK(state.history[k].n_pseudo_masks == static_cast<int>(data.train_unannotated.size()));
    std::size_t fused = 0;
    for (const auto& e : fs::directory_iterator(dir / ("iter_" + std::to_string(k)) / "pseudo" / "fused")) {
      (void)e;
      ++fused;
    }
    CHECK(fused == data.train_unannotated.size());
  }
  CHECK(fs::exists(dir / "history.json"));
  CHECK(fs::exists(dir / "epochs.csv"));

  // Pseudo-masks exist for exactly the unannotated images; annotated masks stay ground truth.
  std::set<std::string> keys, unannotated;
  for (const auto& [id, m] : state.pseudo_masks) keys.insert(id);
  for (const auto& s : data.train_unannotated) unannotated.insert(s.id);
  CHECK(keys == unannotated);
  for (const auto& s : data.train_annotated) {
    CHECK(state.pseudo_masks.count(s.id) == 0);
    for (const auto& c : corpus())
      if (c.id == s.id) CHECK(*s.mask == *c.mask);
  }

  // No evaluation image reaches a training step.
  std::set<std::string> held;
  for (const auto& s : data.test) held.insert(s.id);
  for (const auto& s : data.validation) held.insert(s.id);
  std::istringstream log(slurp(dir / "batches.log"));
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    std::istringstream ls(line);
    std::string phase, tok;
    int it, ep, step;
    ls >> phase >> it >> ep >> step;
    while (ls >> tok) REQUIRE(held.count(tok) == 0);
    ++lines;
  }
  CHECK(lines > 0);
}

TEST_CASE("joint training with zero iterations is the supervised segmenter") {
  auto cfg = tiny();
  cfg.n_iterations = 0;
  const auto data = tiny_split();
  const auto state = train_joint(cfg, data);
  CHECK(state.iteration == 0);
  CHECK(state.history.size() == 1);
  CHECK(state.pseudo_masks.empty());
  RunLog none;
  CHECK(values(state.seg) == values(train_fully_supervised(cfg, data, none)));
}

TEST_CASE("joint training is deterministic and resumable") {
  const auto cfg = tiny();
  const auto data = tiny_split();
  const auto a_dir = scratch("det_a"), b_dir = scratch("det_b"), r_dir = scratch("resume");
  const auto a = train_joint(cfg, data, a_dir);
  const auto b = train_joint(cfg, data, b_dir);
  CHECK(values(a.seg) == values(b.seg));
  CHECK(values(a.reg) == values(b.reg));
  CHECK(slurp(a_dir / "epochs.csv") == slurp(b_dir / "epochs.csv"));
  CHECK(slurp(a_dir / "batches.log") == slurp(b_dir / "batches.log"));

  auto first = cfg;
  first.n_iterations = 1;
  train_joint(first, data, r_dir);
  const auto resumed = train_joint(cfg, data, r_dir, true);
  CHECK(resumed.iteration == 2);
  CHECK(resumed.history.size() == 3);
  CHECK(values(resumed.seg) == values(a.seg));
  CHECK(values(resumed.reg) == values(a.reg));
  CHECK(slurp(r_dir / "history.json") == slurp(a_dir / "history.json"));
}

TEST_CASE("joint training without unannotated images") {
  auto cfg = tiny();
  cfg.n_iterations = 1;
  const auto data = tiny_split(1.0);
  REQUIRE(data.train_unannotated.empty());
  const auto state = train_joint(cfg, data);
  CHECK(state.iteration == 1);
  CHECK(state.pseudo_masks.empty());
  CHECK(state.history[1].n_pseudo_masks == 0);
}

TEST_CASE("mean teacher: deterministic, zero consistency weight trains on annotated images only") {
  auto cfg = tiny();
  cfg.seg_epochs_initial = 3;
  const auto data = tiny_split();
  RunLog none;
  CHECK(values(train_mean_teacher(cfg, data, none)) == values(train_mean_teacher(cfg, data, none)));

  cfg.mt.consistency_weight = 0.0;
  const auto dir = scratch("mt_zero");
  {
    RunLog log(dir);
    train_mean_teacher(cfg, data, log);
  }
  std::set<std::string> annotated;
  for (const auto& s : data.train_annotated) annotated.insert(s.id);
  std::istringstream log(slurp(dir / "batches.log"));
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    std::istringstream ls(line);
    std::string phase, tok;
    int it, ep, step;
    ls >> phase >> it >> ep >> step;
    while (ls >> tok) REQUIRE(annotated.count(tok) == 1);
    ++lines;
  }
  CHECK(lines == cfg.scaled(cfg.seg_epochs_initial) * cfg.samples_per_epoch);

  cfg.mt.consistency_weight = 1.0;
  const auto dir2 = scratch("mt_one");
  {
    RunLog log(dir2);
    train_mean_teacher(cfg, data, log);
  }
  // Once the ramp weight is positive every step also draws one unannotated image.
  std::istringstream log2(slurp(dir2 / "batches.log"));
  int paired = 0;
  while (std::getline(log2, line)) paired += std::count(line.begin(), line.end(), ' ') == 5;
  CHECK(paired == (cfg.scaled(cfg.seg_epochs_initial) - 2) * cfg.samples_per_epoch);
}
