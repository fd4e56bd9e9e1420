#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semfl/common/types.hpp"
#include "semfl/data/dataset.hpp"
#include "semfl/features/store.hpp"
#include "semfl/losses/losses.hpp"
#include "semfl/models/model.hpp"
#include "semfl/partition/partition.hpp"

namespace semfl::fl {

enum class Algorithm { kSemanticFL, kFedAvg, kFedProx };

std::string to_string(Algorithm a);
Algorithm algorithm_from_string(const std::string& name);

struct RoundConfig {
  int clients_per_round = 5;
  int local_epochs = 10;
  double lr = 0.01;
  double momentum = 0.9;
  int batch_size = 64;
  double weight_decay = 1e-5;
  Algorithm algorithm = Algorithm::kSemanticFL;
  losses::LossWeights weights;
  std::uint64_t seed = 0;
  /// Round r trains with lr * lr_decay^(r - 1).
  double lr_decay = 1.0;

  /// Throws InvalidInputError; num_clients bounds clients_per_round.
  void validate(int num_clients) const;
  /// Objective actually optimised: fedavg drops every extra term, fedprox
  /// keeps only mu, semanticfl keeps the lambdas and drops mu.
  losses::LossWeights effective_weights() const;
};

/// Read-only view of one client's shard. `visual` rows align with
/// `indices`; either anchor pointer may be null.
struct ClientData {
  const data::Dataset* dataset = nullptr;
  std::span<const std::int64_t> indices;
  const Matrix* visual = nullptr;
  const Matrix* text = nullptr;
};

struct ClientUpdate {
  int client_id = 0;
  std::vector<double> params;
  std::int64_t num_samples = 0;
  std::vector<losses::LossBreakdown> loss_trace;  // per-epoch sample means
};

/// Uniform sample of m distinct ids from [0, K), sorted, fixed by (seed, round).
std::vector<int> select_clients(int num_clients, int m, int round, std::uint64_t seed);

/// E epochs of mini-batch SGD with momentum from `global_params`. The batch
/// order comes from a stream keyed by (seed, round, client), so the result is
/// independent of which other clients run or in what order.
ClientUpdate local_train(models::ClientModel& model, std::span<const double> global_params, const ClientData& client,
                         const RoundConfig& config, int round, int client_id);

/// n_k / sum n.
std::vector<double> aggregation_weights(std::span<const std::int64_t> sample_counts);

/// Sample-weighted mean of the client parameter vectors.
std::vector<double> fedavg_aggregate(const std::vector<ClientUpdate>& updates);

/// Top-1 accuracy; argmax ties resolve to the lowest class index.
double evaluate(models::ClientModel& model, std::span<const double> params, const data::Dataset& test,
                int batch_size = 250);

struct MetricsRecord {
  int round = 0;
  double test_acc = 0.0;
  double mean_ce = 0.0;
  double mean_kd = 0.0;
  double mean_con = 0.0;
  std::vector<int> clients;
  double wall_time_s = 0.0;
};

nlohmann::json to_json(const MetricsRecord& m);
MetricsRecord metrics_from_json(const nlohmann::json& doc);

struct GlobalState {
  int round = 0;
  std::vector<double> params;
  std::vector<MetricsRecord> history;
};

struct Federation {
  const data::Dataset* train = nullptr;
  const data::Dataset* test = nullptr;
  const partition::PartitionMap* partition = nullptr;
  const features::FeatureStore* store = nullptr;  // optional unless anchors are weighted
};

struct RunOptions {
  /// Per-round checkpoint directory; empty disables checkpointing and resume.
  std::filesystem::path checkpoint_dir;
  std::string config_hash;
  bool record_wall_time = true;
  /// Stop after this round even if more remain (-1: run all). Simulates an
  /// interruption in tests.
  int stop_after_round = -1;
  std::function<void(const MetricsRecord&)> on_round;
};

/// Runs rounds state.round + 1 .. rounds. With a checkpoint directory, a
/// matching saved state (same config hash) is resumed first and each
/// finished round is saved atomically.
GlobalState run_rounds(GlobalState state, models::ClientModel& model, const Federation& fed,
                       const RoundConfig& config, int rounds, const RunOptions& options = {});

/// Loads the saved orchestration state, or returns false if none matches.
bool load_round_checkpoint(const std::filesystem::path& dir, const std::string& config_hash, GlobalState& state);

}  // namespace semfl::fl
