#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "semfl/experiments/config.hpp"

namespace semfl::experiments {

struct ExperimentData {
  data::Dataset train;
  data::Dataset test;
};

/// Synthetic data is generated from the data seed; real datasets go through
/// the download cache and are optionally subset (stratified, data seed).
ExperimentData load_experiment_data(const ExperimentConfig& cfg);

/// In-memory extraction for the synthetic provider, or the store under
/// cfg.store_dir. Checks extraction hash, dataset identity, C and d.
features::FeatureStore obtain_store(const ExperimentConfig& cfg, const data::Dataset& train);

/// Offline phase for `semfl extract-features`: builds and saves the store.
features::FeatureStore extract_features(const ExperimentConfig& cfg, const data::Dataset& train,
                                        const std::filesystem::path& dir);

struct RunSummary {
  std::filesystem::path dir;
  std::vector<fl::MetricsRecord> history;
  double final_acc = 0.0;
  double best_acc = 0.0;
  int best_round = 0;
  std::string config_hash;
};

/// Run directory contents: config.json, partition.json, metrics.csv,
/// checkpoint/, final_model.{params,json}, summary.json. An existing
/// checkpoint with the same config hash is resumed.
RunSummary run_experiment(const ExperimentConfig& cfg);
RunSummary run_experiment(const std::filesystem::path& config_path);

inline constexpr const char* kMetricsHeader = "round,test_acc,mean_ce,mean_kd,mean_con,clients,wall_time_s";
std::string metrics_csv_row(const fl::MetricsRecord& m);
void write_metrics_csv(const std::filesystem::path& path, const std::vector<fl::MetricsRecord>& history);
/// FormatError on a wrong header or malformed row.
std::vector<fl::MetricsRecord> read_metrics_csv(const std::filesystem::path& path);

enum class SweepAxis { kTemperature, kClients, kEpochs };
std::string to_string(SweepAxis axis);
SweepAxis sweep_axis_from_string(const std::string& name);
/// Base config with one axis set to `value`; the clients axis keeps full
/// participation full and otherwise caps m at K.
ExperimentConfig apply_axis(const ExperimentConfig& base, SweepAxis axis, double value);

struct SweepCell {
  double value = 0.0;
  bool ok = false;
  std::string error;
  std::filesystem::path dir;
  double final_acc = 0.0;
  double best_acc = 0.0;
  int best_round = 0;
};

/// One run per value under dir/<axis>_<value>/; a failing cell is recorded
/// and the others still run. Writes sweep.csv and sweep.json.
std::vector<SweepCell> run_sweep(const ExperimentConfig& base, SweepAxis axis, const std::vector<double>& values,
                                 const std::filesystem::path& dir);

struct AblationCell {
  std::string name;
  bool text_contrastive = false;
  bool visual_kd = false;
  std::vector<double> final_acc;  // one per seed
  double mean = 0.0;
  double std = 0.0;  // sample std, 0 for a single seed
};

/// The 2x2 grid over the text contrastive and visual KD terms. The all-off
/// cell is semanticfl with both lambdas zero, which trains exactly like
/// fedavg. Writes ablation.csv and ablation.md under `dir`.
std::vector<AblationCell> reproduce_ablation(const ExperimentConfig& base, const std::vector<std::uint64_t>& seeds,
                                             const std::filesystem::path& dir);

/// Sample mean and (n-1) standard deviation.
std::pair<double, double> mean_std(const std::vector<double>& v);

}  // namespace semfl::experiments
