#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace semfl::partition {

enum class Scenario { kDirichlet, kExtreme, kLongtail };

std::string to_string(Scenario s);
Scenario scenario_from_string(const std::string& name);

struct PartitionSpec {
  Scenario scenario = Scenario::kDirichlet;
  int num_clients = 10;
  double alpha = 0.5;            // dirichlet; also the client split for longtail
  int classes_per_client = 2;    // extreme
  double imbalance_ratio = 1.0;  // longtail
  std::uint64_t seed = 0;

  /// Throws InvalidInputError on violated field constraints.
  void validate(int num_classes) const;
};

/// Disjoint assignment of dataset indices to clients. Indices inside each
/// client are sorted ascending.
struct PartitionMap {
  Scenario scenario = Scenario::kDirichlet;
  std::uint64_t seed = 0;
  int num_classes = 0;
  std::vector<std::vector<std::int64_t>> client_indices;
  std::vector<std::vector<std::int64_t>> label_histogram;  // K x C

  int num_clients() const { return static_cast<int>(client_indices.size()); }
  std::int64_t client_size(int k) const {
    return static_cast<std::int64_t>(client_indices[static_cast<std::size_t>(k)].size());
  }
};

PartitionMap dirichlet_partition(std::span<const int> labels, const PartitionSpec& spec);
PartitionMap extreme_partition(std::span<const int> labels, const PartitionSpec& spec);
PartitionMap longtail_partition(std::span<const int> labels, const PartitionSpec& spec);

/// Dispatches on spec.scenario.
PartitionMap make_partition(std::span<const int> labels, const PartitionSpec& spec);

/// Per-class retained counts for the exponential long-tail profile.
std::vector<std::int64_t> longtail_counts(std::int64_t n_max, int num_classes, double rho);

/// Split `total` items by `proportions` using largest-remainder rounding; the
/// result always sums to `total`. Ties go to the lower index.
std::vector<std::int64_t> largest_remainder(std::int64_t total, std::span<const double> proportions);

struct PartitionStats {
  std::vector<std::int64_t> client_sizes;
  std::vector<double> label_entropy;  // natural log
  std::vector<int> label_support;     // number of classes with >= 1 sample
  std::vector<std::vector<double>> pairwise_tv;  // total-variation distance, K x K
};

PartitionStats partition_stats(const PartitionMap& map);

/// Total-variation distance between two count histograms (normalised first).
double total_variation(std::span<const std::int64_t> a, std::span<const std::int64_t> b);

nlohmann::json to_json(const PartitionMap& map);
/// Rebuilds a map from its JSON form; labels are needed for the histogram.
PartitionMap from_json(const nlohmann::json& doc, std::span<const int> labels, int num_classes);

}  // namespace semfl::partition
