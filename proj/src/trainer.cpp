#include "segreg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

namespace segreg {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MeanTeacherParams, ema_decay, consistency_weight, ramp_start, ramp_end,
                                                noise_std)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, annotation_rate, n_pseudo, k_levels, lambda,
                                                seg_lr_initial, seg_lr_later, seg_epochs_initial, seg_epochs_later,
                                                reg_lr_initial, reg_lr_later, reg_epochs_initial, reg_epochs_later,
                                                n_iterations, seed, mt, seg_augment_prob, epoch_scale, samples_per_epoch, reg_shift_px, reg_self_pair_prob,
                                                image_size, seg_base_width, seg_depth, reg_base_width, reg_max_width,
                                                dataset_count, data_seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(HistoryEntry, iteration, val_dsc, n_pseudo_masks, pseudo_entropy,
                                                pseudo_confidence)

namespace {

enum PhaseTag : std::uint64_t { kSegPre = 1, kRegPre, kPseudo, kSegFine, kRegFine, kMeanTeacher };

std::mt19937_64 phase_rng(const ExperimentConfig& cfg, PhaseTag tag, int iteration) {
  std::seed_seq seq{cfg.seed, static_cast<std::uint64_t>(tag), static_cast<std::uint64_t>(iteration)};
  return std::mt19937_64(seq);
}

std::uint64_t derive_seed(const ExperimentConfig& cfg, PhaseTag tag, int iteration, std::size_t index) {
  std::seed_seq seq{cfg.seed, static_cast<std::uint64_t>(tag), static_cast<std::uint64_t>(iteration),
                    static_cast<std::uint64_t>(index)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

/// Cycles through shuffled permutations of [0, n).
class Cycler {
 public:
  Cycler(std::size_t n, std::mt19937_64& rng) : order_(n), rng_(rng) {
    std::iota(order_.begin(), order_.end(), 0);
    pos_ = n;
  }
  std::size_t next() {
    if (pos_ >= order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      pos_ = 0;
    }
    return order_[pos_++];
  }

 private:
  std::vector<std::size_t> order_;
  std::mt19937_64& rng_;
  std::size_t pos_;
};

int steps_for(const ExperimentConfig& cfg, std::size_t pool) {
  return cfg.samples_per_epoch > 0 ? cfg.samples_per_epoch : static_cast<int>(pool);
}

std::vector<std::vector<float>> snapshot(const SegModel& m) {
  std::vector<std::vector<float>> out;
  for (const auto* p : m.parameters()) out.push_back(p->value);
  return out;
}

void restore(SegModel& m, const std::vector<std::vector<float>>& snap) {
  auto params = m.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = snap[i];
}

/// Dice loss and its gradient on one pair, optionally under a random
/// augmentation from the TTA family (mask follows the spatial part).
double dice_step(SegModel& m, const Image& image, const Image& target, double augment_prob, std::mt19937_64& rng) {
  const int n = m.config().image_size;
  Image grad(n, n);
  double loss;
  if (augment_prob > 0 && std::bernoulli_distribution(augment_prob)(rng)) {
    const AugmentSpec a = sample_augment(rng);
    loss = soft_dice_loss(m.forward(apply_augment(image, a)), apply_spatial(target, a), &grad).value;
  } else {
    loss = soft_dice_loss(m.forward(image), target, &grad).value;
  }
  m.backward(grad);
  return loss;
}

struct SegItem {
  const Image* image;
  const Image* target;
  const std::string* id;
};

/// Soft-Dice training with validation-best selection over epochs.
void train_seg_phase(SegModel& m, const std::vector<SegItem>& items, int epochs, double lr, double augment_prob,
                     const std::vector<Sample>& validation, RunLog& log, const std::string& phase, int iteration,
                     std::mt19937_64& rng, int steps_per_epoch) {
  if (epochs <= 0 || items.empty()) return;
  auto params = m.parameters();
  nn::Adam opt(lr);
  Cycler pick(items.size(), rng);
  double best = -1;
  std::vector<std::vector<float>> best_params;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    double loss_sum = 0;
    for (int step = 0; step < steps_per_epoch; ++step) {
      const SegItem& it = items[pick.next()];
      log.batch(phase, iteration, epoch, step, {*it.id});
      nn::zero_grads(params);
      loss_sum += dice_step(m, *it.image, *it.target, augment_prob, rng);
      opt.step(params);
    }
    RunLog::Epoch e{phase, iteration, epoch, steps_per_epoch};
    e.loss = e.dice = loss_sum / steps_per_epoch;
    if (!validation.empty()) {
      e.val_dsc = mean_dsc(m, validation);
      if (e.val_dsc > best) {
        best = e.val_dsc;
        best_params = snapshot(m);
      }
    }
    log.epoch(e);
  }
  if (!best_params.empty()) restore(m, best_params);
}

struct RegPair {
  Image source, target;
  std::optional<Image> source_mask, target_mask;
  std::vector<std::string> ids;
};

template <typename Sampler>
void train_reg_phase(RegModel& m, Sampler&& sample, std::size_t pool, int epochs, double lr,
                     const LambdaSchedule& sched, RunLog& log, const std::string& phase, int iteration,
                     int steps_per_epoch) {
  if (epochs <= 0 || pool == 0) return;
  auto params = m.parameters();
  nn::Adam opt(lr);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    RunLog::Epoch e{phase, iteration, epoch, steps_per_epoch};
    for (int step = 0; step < steps_per_epoch; ++step) {
      const RegPair pr = sample();
      log.batch(phase, iteration, epoch, step, pr.ids);
      const auto pyramid = m.forward(pr.source, pr.target);
      const auto loss = registration_objective(pyramid, pr.source, pr.target, pr.source_mask ? &*pr.source_mask : nullptr,
                                               pr.target_mask ? &*pr.target_mask : nullptr, sched, true);
      nn::zero_grads(params);
      m.backward(loss.grad);
      opt.step(params);
      const double k = static_cast<double>(pyramid.size());
      e.loss += loss.total;
      for (std::size_t i = 0; i < pyramid.size(); ++i) {
        e.similarity += loss.similarity[i] / k;
        e.dice += loss.dice[i] / k;
        e.smoothness += loss.smoothness[i] / k;
      }
    }
    e.loss /= steps_per_epoch;
    e.similarity /= steps_per_epoch;
    e.dice /= steps_per_epoch;
    e.smoothness /= steps_per_epoch;
    log.epoch(e);
  }
}

Field constant_shift(int n, double dr, double dc) {
  return make_field<float>(n, n, static_cast<float>(dr), static_cast<float>(dc));
}

std::string iter_dir_name(int k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "iter_%d", k);
  return buf;
}

Image mean_of(const std::vector<Image>& masks) {
  Image out(masks.front().rows(), masks.front().cols());
  for (const auto& m : masks)
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] += m.values()[i];
  for (float& v : out.values()) v /= static_cast<float>(masks.size());
  return out;
}

/// Regenerates all soft pseudo-masks from the current models and fills in
/// the pseudo statistics of the current history entry.
void refresh_pseudo_masks(TrainState& state, const ExperimentConfig& cfg, const DatasetSplit& data, RunLog& log,
                          const std::filesystem::path& run_dir) {
  state.pseudo_masks.clear();
  std::vector<const Sample*> pool;
  for (const auto& s : data.train_annotated) pool.push_back(&s);
  const auto dir = run_dir.empty() ? run_dir : run_dir / iter_dir_name(state.iteration) / "pseudo";
  if (!dir.empty())
    for (const char* sub : {"seg", "reg", "fused"}) std::filesystem::create_directories(dir / sub);
  double entropy = 0, confidence = 0;
  for (std::size_t i = 0; i < data.train_unannotated.size(); ++i) {
    const Sample& s = data.train_unannotated[i];
    log.batch("pseudo", state.iteration, 0, static_cast<int>(i), {s.id});
    auto set = generate_pseudo_masks(state.seg, state.reg, s.image, pool, cfg.n_pseudo,
                                     derive_seed(cfg, kPseudo, state.iteration, i));
    entropy += mean_entropy(set.fused.confidence);
    double c = 0;
    for (float v : set.fused.confidence.values()) c += std::abs(2.0 * v - 1.0);
    confidence += c / set.fused.confidence.size();
    if (!dir.empty()) {
      write_png16(dir / "seg" / (s.id + ".png"), mean_of(set.seg));
      write_png16(dir / "reg" / (s.id + ".png"), mean_of(set.reg));
      write_png16(dir / "fused" / (s.id + ".png"), set.fused.confidence);
    }
    state.pseudo_masks.emplace(s.id, std::move(set.fused));
  }
  HistoryEntry& h = state.history.at(state.iteration);
  h.n_pseudo_masks = static_cast<int>(data.train_unannotated.size());
  if (h.n_pseudo_masks > 0) {
    h.pseudo_entropy = entropy / h.n_pseudo_masks;
    h.pseudo_confidence = confidence / h.n_pseudo_masks;
  }
}

void save_state(const TrainState& state, const std::filesystem::path& run_dir) {
  const auto dir = run_dir / iter_dir_name(state.iteration);
  save_seg_model(dir / "seg", state.seg, state.iteration);
  save_reg_model(dir / "reg", state.reg, state.iteration);
  nlohmann::json j;
  j["iteration"] = state.iteration;
  j["history"] = state.history;
  std::ofstream(dir / "state.json") << j.dump(2) << "\n";
  std::ofstream(run_dir / "history.json") << j["history"].dump(2) << "\n";
}

}  // namespace

int ExperimentConfig::scaled(int epochs) const {
  if (epochs <= 0) return 0;
  return std::max(1, static_cast<int>(std::lround(epochs * epoch_scale)));
}

LambdaSchedule ExperimentConfig::schedule() const {
  require(static_cast<int>(lambda.size()) == k_levels, "config: lambda list length must equal k_levels");
  return LambdaSchedule{lambda};
}

SegConfig ExperimentConfig::seg_config() const { return SegConfig{image_size, seg_base_width, seg_depth, seed}; }

RegConfig ExperimentConfig::reg_config() const {
  return RegConfig{image_size, k_levels, reg_base_width, reg_max_width, seed ^ 0x9e3779b97f4a7c15ULL};
}

nlohmann::json to_json(const ExperimentConfig& c) { return nlohmann::json(c); }

ExperimentConfig config_from_json(const nlohmann::json& j) {
  require(j.is_object(), "config: expected a JSON object");
  const nlohmann::json defaults = ExperimentConfig{};
  for (const auto& [key, value] : j.items()) {
    require(defaults.contains(key), "config: unknown key '" + key + "'");
    if (key == "mt")
      for (const auto& [k2, v2] : value.items())
        require(defaults["mt"].contains(k2), "config: unknown key 'mt." + k2 + "'");
  }
  ExperimentConfig out = j.get<ExperimentConfig>();
  require(out.annotation_rate > 0 && out.annotation_rate <= 1, "config: annotation_rate must lie in (0, 1]");
  require(out.n_pseudo >= 1 && out.k_levels >= 1 && out.epoch_scale > 0, "config: invalid counts");
  out.schedule();
  return out;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), "cannot open config " + path.string());
  return config_from_json(nlohmann::json::parse(is));
}

nlohmann::json to_json(const HistoryEntry& h) { return nlohmann::json(h); }

RunLog::RunLog(const std::filesystem::path& run_dir, bool append) {
  std::filesystem::create_directories(run_dir);
  const auto mode = append ? std::ios::app : std::ios::trunc;
  const bool fresh = !append || !std::filesystem::exists(run_dir / "epochs.csv");
  epochs_ = std::make_shared<std::ofstream>(run_dir / "epochs.csv", std::ios::out | mode);
  batches_ = std::make_shared<std::ofstream>(run_dir / "batches.log", std::ios::out | mode);
  if (fresh) *epochs_ << "phase,iteration,epoch,steps,loss,dice,similarity,smoothness,consistency,val_dsc\n";
}

void RunLog::epoch(const Epoch& e) {
  if (!epochs_) return;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%d,%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", e.iteration, e.epoch, e.steps, e.loss,
                e.dice, e.similarity, e.smoothness, e.consistency, e.val_dsc);
  *epochs_ << e.phase << ',' << buf << '\n';
  epochs_->flush();
}

void RunLog::batch(const std::string& phase, int iteration, int epoch, int step, const std::vector<std::string>& ids) {
  if (!batches_) return;
  *batches_ << phase << ' ' << iteration << ' ' << epoch << ' ' << step;
  for (const auto& id : ids) *batches_ << ' ' << id;
  *batches_ << '\n';
}

double mean_dsc(SegModel& model, const std::vector<Sample>& samples) {
  double acc = 0;
  int count = 0;
  for (const auto& s : samples) {
    if (!s.mask) continue;
    const Image pred = model.forward(s.image);
    double inter = 0, a = 0, b = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool p = pred.values()[i] > 0.5f, g = s.mask->values()[i] > 0.5f;
      inter += p && g;
      a += p;
      b += g;
    }
    acc += a + b == 0 ? 1.0 : 2 * inter / (a + b);
    ++count;
  }
  return count ? acc / count : 0.0;
}

SegModel pretrain_segmentation(const ExperimentConfig& cfg, const std::vector<const Sample*>& annotated,
                               const std::vector<Sample>& validation, RunLog& log) {
  require(!annotated.empty(), "pretrain_segmentation: no annotated images");
  SegModel m(cfg.seg_config());
  std::vector<SegItem> items;
  for (const Sample* s : annotated) {
    require(s->mask.has_value(), "pretrain_segmentation: annotated sample without mask");
    items.push_back({&s->image, &*s->mask, &s->id});
  }
  auto rng = phase_rng(cfg, kSegPre, 0);
  train_seg_phase(m, items, cfg.scaled(cfg.seg_epochs_initial), cfg.seg_lr_initial, cfg.seg_augment_prob, validation, log, "seg_pretrain", 0,
                  rng, steps_for(cfg, items.size()));
  return m;
}

RegModel pretrain_registration(const ExperimentConfig& cfg, const std::vector<const Sample*>& images, RunLog& log) {
  require(images.size() >= 2, "pretrain_registration: need at least two images");
  RegModel m(cfg.reg_config());
  auto rng = phase_rng(cfg, kRegPre, 0);
  std::uniform_int_distribution<std::size_t> any(0, images.size() - 1);
  std::uniform_real_distribution<double> shift(-cfg.reg_shift_px, cfg.reg_shift_px);
  std::bernoulli_distribution self(cfg.reg_self_pair_prob), side(0.5);
  auto sample = [&] {
    const Sample* a = images[any(rng)];
    const Sample* b = self(rng) ? a : images[any(rng)];
    RegPair p{a->image, b->image, std::nullopt, std::nullopt, {a->id, b->id}};
    if (cfg.reg_shift_px > 0) {
      const double dr = shift(rng), dc = shift(rng);
      // Either side may carry the shift, so clamped borders show up in both.
      auto& moved = side(rng) ? p.target : p.source;
      moved = warp(moved, constant_shift(cfg.image_size, dr, dc), Border::clamp);
    }
    return p;
  };
  train_reg_phase(m, sample, images.size(), cfg.scaled(cfg.reg_epochs_initial), cfg.reg_lr_initial, cfg.schedule(), log,
                  "reg_pretrain", 0, steps_for(cfg, images.size()));
  return m;
}

TrainState run_iteration(TrainState state, const ExperimentConfig& cfg, const DatasetSplit& data, RunLog& log,
                         const std::filesystem::path& run_dir) {
  require(static_cast<int>(state.history.size()) == state.iteration + 1, "run_iteration: history out of step");
  const int it = state.iteration;
  refresh_pseudo_masks(state, cfg, data, log, run_dir);

  // Segmentation: annotated ground truth and soft pseudo-masks, sampled uniformly.
  std::vector<SegItem> items;
  for (const auto& s : data.train_annotated) items.push_back({&s.image, &*s.mask, &s.id});
  for (const auto& s : data.train_unannotated) items.push_back({&s.image, &state.pseudo_masks.at(s.id).confidence, &s.id});
  auto seg_rng = phase_rng(cfg, kSegFine, it);
  train_seg_phase(state.seg, items, cfg.scaled(cfg.seg_epochs_later), cfg.seg_lr_later, cfg.seg_augment_prob, data.validation, log,
                  "seg_finetune", it + 1, seg_rng, steps_for(cfg, items.size()));

  // Registration with Dice guidance: annotated sources, any training target.
  const auto training = data.training_samples();
  auto reg_rng = phase_rng(cfg, kRegFine, it);
  std::uniform_int_distribution<std::size_t> src_pick(0, data.train_annotated.size() - 1), tgt_pick(0, training.size() - 1);
  std::uniform_real_distribution<double> shift(-cfg.reg_shift_px, cfg.reg_shift_px);
  std::bernoulli_distribution side(0.5), self(cfg.reg_self_pair_prob);
  auto sample = [&] {
    const Sample& a = data.train_annotated[src_pick(reg_rng)];
    const Sample* b = self(reg_rng) ? &a : training[tgt_pick(reg_rng)];
    const Image& tmask = b->mask ? *b->mask : state.pseudo_masks.at(b->id).confidence;
    RegPair p{a.image, b->image, *a.mask, tmask, {a.id, b->id}};
    if (cfg.reg_shift_px > 0) {
      const auto f = constant_shift(cfg.image_size, shift(reg_rng), shift(reg_rng));
      const bool on_target = side(reg_rng);
      auto& img = on_target ? p.target : p.source;
      auto& mask = on_target ? p.target_mask : p.source_mask;
      img = warp(img, f, Border::clamp);
      mask = warp(*mask, f, Border::zero);
    }
    return p;
  };
  train_reg_phase(state.reg, sample, training.size(), cfg.scaled(cfg.reg_epochs_later), cfg.reg_lr_later,
                  cfg.schedule(), log, "reg_finetune", it + 1, steps_for(cfg, training.size()));

  state.iteration = it + 1;
  HistoryEntry h;
  h.iteration = state.iteration;
  h.val_dsc = mean_dsc(state.seg, data.validation);
  state.history.push_back(h);
  if (!run_dir.empty()) save_state(state, run_dir);
  return state;
}

TrainState train_joint(const ExperimentConfig& cfg, const DatasetSplit& data, const std::filesystem::path& run_dir,
                       bool resume) {
  require(!data.train_annotated.empty(), "train_joint: no annotated images");
  RunLog log = run_dir.empty() ? RunLog() : RunLog(run_dir, resume);

  int start = -1;
  if (resume && !run_dir.empty()) {
    for (int k = cfg.n_iterations; k >= 0; --k) {
      if (std::filesystem::exists(run_dir / iter_dir_name(k) / "state.json")) {
        start = k;
        break;
      }
    }
  }

  TrainState state{0, SegModel(cfg.seg_config()), RegModel(cfg.reg_config()), {}, {}};
  if (start >= 0) {
    const auto dir = run_dir / iter_dir_name(start);
    std::ifstream is(dir / "state.json");
    const auto j = nlohmann::json::parse(is);
    state.iteration = j.at("iteration").get<int>();
    state.history = j.at("history").get<std::vector<HistoryEntry>>();
    state.seg = load_seg_model(dir / "seg");
    state.reg = load_reg_model(dir / "reg");
  } else {
    std::vector<const Sample*> annotated;
    for (const auto& s : data.train_annotated) annotated.push_back(&s);
    state.seg = pretrain_segmentation(cfg, annotated, data.validation, log);
    state.reg = pretrain_registration(cfg, data.training_samples(), log);
    state.history.push_back(HistoryEntry{0, mean_dsc(state.seg, data.validation)});
    if (!run_dir.empty()) save_state(state, run_dir);
  }

  while (state.iteration < cfg.n_iterations) state = run_iteration(std::move(state), cfg, data, log, run_dir);
  if (cfg.n_iterations > 0) {
    // Masks from the final models, for the record; not trained on.
    refresh_pseudo_masks(state, cfg, data, log, run_dir);
    if (!run_dir.empty()) save_state(state, run_dir);
  }
  return state;
}

SegModel train_fully_supervised(const ExperimentConfig& cfg, const DatasetSplit& data, RunLog& log) {
  std::vector<const Sample*> annotated;
  for (const auto& s : data.train_annotated) annotated.push_back(&s);
  return pretrain_segmentation(cfg, annotated, data.validation, log);
}

void ema_update(SegModel& teacher, const SegModel& student, double decay) {
  auto t = teacher.parameters();
  const auto s = student.parameters();
  require(t.size() == s.size(), "ema_update: architecture mismatch");
  const float d = static_cast<float>(decay), e = static_cast<float>(1.0 - decay);
  for (std::size_t k = 0; k < t.size(); ++k) {
    float* tv = t[k]->value.data();
    const float* sv = s[k]->value.data();
    const std::size_t n = t[k]->size();
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < n; ++i) tv[i] = d * tv[i] + e * sv[i];
  }
}

SegModel train_mean_teacher(const ExperimentConfig& cfg, const DatasetSplit& data, RunLog& log) {
  require(!data.train_annotated.empty(), "train_mean_teacher: no annotated images");
  SegModel student(cfg.seg_config());
  SegModel teacher = student;
  auto params = student.parameters();
  nn::Adam opt(cfg.seg_lr_initial);
  auto rng = phase_rng(cfg, kMeanTeacher, 0);
  Cycler pick_a(data.train_annotated.size(), rng);
  std::unique_ptr<Cycler> pick_u;
  if (!data.train_unannotated.empty()) pick_u = std::make_unique<Cycler>(data.train_unannotated.size(), rng);
  std::normal_distribution<double> noise(0.0, cfg.mt.noise_std);
  std::uniform_real_distribution<double> log_gamma(std::log(0.7), std::log(1.4));

  const int epochs = cfg.scaled(cfg.seg_epochs_initial);
  const int ramp_start = cfg.scaled(cfg.mt.ramp_start), ramp_end = std::max(ramp_start + 1, cfg.scaled(cfg.mt.ramp_end));
  const int steps = steps_for(cfg, data.train_annotated.size());
  const int n = cfg.image_size;
  double best = -1;
  std::vector<std::vector<float>> best_params;

  auto perturb = [&](const Image& img, AugmentSpec a) {
    a.contrast_gamma = std::exp(log_gamma(rng));
    Image out = apply_augment(img, a);
    for (float& v : out.values()) v = static_cast<float>(std::clamp(v + noise(rng), 0.0, 1.0));
    return out;
  };

  for (int epoch = 0; epoch < epochs; ++epoch) {
    const double ramp = std::clamp(static_cast<double>(epoch - ramp_start) / (ramp_end - ramp_start), 0.0, 1.0);
    const double w = cfg.mt.consistency_weight * ramp;
    RunLog::Epoch e{"mt", 0, epoch, steps};
    for (int step = 0; step < steps; ++step) {
      const Sample& a = data.train_annotated[pick_a.next()];
      std::vector<std::string> ids{a.id};
      nn::zero_grads(params);
      const double dice = dice_step(student, a.image, *a.mask, cfg.seg_augment_prob, rng);
      e.dice += dice;
      e.loss += dice;
      if (w > 0 && pick_u) {
        const Sample& u = data.train_unannotated[pick_u->next()];
        ids.push_back(u.id);
        // Shared spatial transform; contrast and noise differ between the two views.
        const AugmentSpec spatial = sample_augment(rng);
        const Image t_pred = teacher.forward(perturb(u.image, spatial));
        const Image s_pred = student.forward(perturb(u.image, spatial));
        Image g(n, n);
        double mse = 0;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double d = double(s_pred.values()[i]) - t_pred.values()[i];
          mse += d * d;
          g.values()[i] = static_cast<float>(2.0 * w * d / g.size());
        }
        mse /= g.size();
        student.backward(g);
        e.consistency += mse;
        e.loss += w * mse;
      }
      log.batch("mt", 0, epoch, step, ids);
      opt.step(params);
      if (epoch < ramp_start) {
        teacher = student;
      } else {
        ema_update(teacher, student, cfg.mt.ema_decay);
      }
    }
    e.loss /= steps;
    e.dice /= steps;
    e.consistency /= steps;
    if (!data.validation.empty()) {
      e.val_dsc = mean_dsc(teacher, data.validation);
      if (e.val_dsc > best) {
        best = e.val_dsc;
        best_params = snapshot(teacher);
      }
    }
    log.epoch(e);
  }
  if (!best_params.empty()) restore(teacher, best_params);
  return teacher;
}

}  // namespace segreg
