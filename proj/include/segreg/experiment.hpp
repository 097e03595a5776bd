#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "segreg/eval.hpp"
#include "segreg/trainer.hpp"

namespace segreg {

/// "<method>_<rate>_<seed>"
std::string run_name(const std::string& method, double rate, std::uint64_t seed);

/// Loads the dataset under data_dir, generating and saving it from the
/// config first if the directory holds none.
std::vector<Sample> load_or_generate(const ExperimentConfig& cfg, const std::filesystem::path& data_dir);

/// Split used by every method for a given (rate, seed).
DatasetSplit experiment_split(const std::vector<Sample>& samples, const ExperimentConfig& cfg);

/// Trains one method ("fs", "mt" or "joint") into out_root/<run_name>/ and
/// returns that directory. Final weights go to final/seg (and final/reg).
std::filesystem::path train_method(const std::string& method, const ExperimentConfig& cfg,
                                   const std::vector<Sample>& samples, const std::filesystem::path& out_root,
                                   bool resume = false);

/// Evaluates whatever fs/mt/joint runs exist for (cfg.annotation_rate,
/// cfg.seed) on the test split. Writes metrics.csv into each run directory
/// (Joint and Combined rows into the joint one), plus the full CSV and a
/// summary JSON under out_root/eval_<rate>_<seed>/.
MetricsReport evaluate_runs(const ExperimentConfig& cfg, const std::vector<Sample>& samples,
                            const std::filesystem::path& out_root);

/// Table of mean +- std per method and rate from eval_<rate>_<seed>/metrics.csv.
std::string compare_table(const std::filesystem::path& out_root, const std::vector<double>& rates, std::uint64_t seed);

}  // namespace segreg
