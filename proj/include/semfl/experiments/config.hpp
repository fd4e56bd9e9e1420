#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semfl/data/dataset.hpp"
#include "semfl/data/loaders.hpp"
#include "semfl/features/provider.hpp"
#include "semfl/fl/federation.hpp"
#include "semfl/models/model.hpp"
#include "semfl/partition/partition.hpp"

namespace semfl::experiments {

struct DataConfig {
  data::DatasetKind kind = data::DatasetKind::kSynthetic;
  /// Stratified subset sizes; 0 keeps the whole split.
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  std::filesystem::path cache_dir = "data";
  bool download = true;
  std::string checksum;  // "" = built-in, "none", "md5:..", "sha256:.."
  // Synthetic generator only.
  std::size_t synthetic_train = 1000;
  std::size_t synthetic_test = 500;
  int synthetic_classes = 10;
  int synthetic_size = 32;
  double synthetic_noise = 0.15;
  double synthetic_jitter = 1.5;
};

/// Everything one run needs. Sub-seeds (partition, model, training,
/// extraction, synthetic data) derive from `seed`.
struct ExperimentConfig {
  DataConfig data;
  partition::PartitionSpec partition;
  fl::RoundConfig round;
  features::FeatureExtractionConfig extraction;
  features::ProviderKind provider = features::ProviderKind::kSynthetic;
  std::filesystem::path store_dir;  // empty: extract in memory (synthetic provider only)
  std::filesystem::path provider_weights;
  models::Architecture architecture = models::Architecture::kTinyCnn;
  int rounds = 20;
  std::filesystem::path output_dir = "runs/default";
  std::uint64_t seed = 0;
  bool record_wall_time = true;

  int num_classes() const;
  /// Backbone for this dataset; num_classes, d and the input shape follow
  /// the data and extraction settings.
  models::BackboneSpec backbone() const;
  /// Copies of partition/round/extraction specs carrying the derived seeds.
  partition::PartitionSpec seeded_partition() const;
  fl::RoundConfig seeded_round() const;
  features::FeatureExtractionConfig seeded_extraction() const;
  std::uint64_t data_seed() const;
};

/// Every violated constraint, in a fixed order. Empty means valid.
std::vector<std::string> validation_errors(const ExperimentConfig& cfg);
/// Throws ConfigError listing all problems at once.
void validate(const ExperimentConfig& cfg);

nlohmann::json to_json(const ExperimentConfig& cfg);
/// Strict: unknown keys and wrong types are ConfigErrors. Missing keys keep
/// their defaults.
ExperimentConfig config_from_json(const nlohmann::json& doc);
ExperimentConfig load_config(const std::filesystem::path& path);
/// SHA-256 of the canonical JSON without output_dir.
std::string config_hash(const ExperimentConfig& cfg);

/// "smoke" or "desk"; ConfigError otherwise.
ExperimentConfig preset(const std::string& name);
std::vector<std::string> preset_names();

}  // namespace semfl::experiments
