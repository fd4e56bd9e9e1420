#include "semfl/fl/federation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "semfl/common/binary_io.hpp"
#include "semfl/common/error.hpp"
#include "semfl/common/rng.hpp"

namespace fs = std::filesystem;

namespace semfl::fl {

std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::kSemanticFL: return "semanticfl";
    case Algorithm::kFedAvg: return "fedavg";
    case Algorithm::kFedProx: return "fedprox";
  }
  return "?";
}

Algorithm algorithm_from_string(const std::string& name) {
  if (name == "semanticfl") return Algorithm::kSemanticFL;
  if (name == "fedavg") return Algorithm::kFedAvg;
  if (name == "fedprox") return Algorithm::kFedProx;
  throw ConfigError("unknown algorithm '" + name + "' (expected semanticfl, fedavg, fedprox)");
}

void RoundConfig::validate(int num_clients) const {
  if (clients_per_round < 1 || clients_per_round > num_clients) {
    throw InvalidInputError("clients_per_round must lie in [1, " + std::to_string(num_clients) + "]");
  }
  if (local_epochs < 1) throw InvalidInputError("local_epochs must be positive");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw InvalidInputError("lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidInputError("momentum must lie in [0, 1)");
  if (batch_size < 1) throw InvalidInputError("batch_size must be positive");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw InvalidInputError("weight_decay must be >= 0");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw InvalidInputError("lr_decay must lie in (0, 1]");
  weights.validate();
}

losses::LossWeights RoundConfig::effective_weights() const {
  losses::LossWeights w = weights;
  switch (algorithm) {
    case Algorithm::kFedAvg:
      w.lambda_kd = w.lambda_con = w.mu_prox = 0.0;
      break;
    case Algorithm::kFedProx:
      w.lambda_kd = w.lambda_con = 0.0;
      break;
    case Algorithm::kSemanticFL:
      w.mu_prox = 0.0;
      break;
  }
  return w;
}

std::vector<int> select_clients(int num_clients, int m, int round, std::uint64_t seed) {
  if (m < 1 || num_clients < 1) throw InvalidInputError("need at least one client");
  if (m > num_clients) {
    throw InvalidInputError("cannot select " + std::to_string(m) + " of " + std::to_string(num_clients) + " clients");
  }
  std::vector<int> ids(static_cast<std::size_t>(num_clients));
  for (int k = 0; k < num_clients; ++k) ids[static_cast<std::size_t>(k)] = k;
  Rng rng(derive_seed(seed, {hash_string("select"), static_cast<std::uint64_t>(round)}));
  // Partial Fisher-Yates: the first m slots become the sample.
  for (int i = 0; i < m; ++i) {
    auto j = static_cast<std::size_t>(i) + rng() % static_cast<std::uint64_t>(num_clients - i);
    std::swap(ids[static_cast<std::size_t>(i)], ids[j]);
  }
  ids.resize(static_cast<std::size_t>(m));
  std::sort(ids.begin(), ids.end());
  return ids;
}

ClientUpdate local_train(models::ClientModel& model, std::span<const double> global_params, const ClientData& client,
                         const RoundConfig& config, int round, int client_id) {
  if (client.dataset == nullptr || client.indices.empty()) {
    throw InvalidInputError("client " + std::to_string(client_id) + " has no samples");
  }
  const auto n = client.indices.size();
  if (client.visual && static_cast<std::size_t>(client.visual->rows()) != n) {
    throw StateError("visual anchors do not cover client " + std::to_string(client_id) + "'s samples");
  }
  const losses::LossWeights weights = config.effective_weights();
  model.unflatten(global_params);

  const auto& params = model.parameters();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (auto* p : params) {
    offsets.push_back(total);
    total += p->value.size();
  }
  std::vector<double> velocity(total, 0.0);
  const double lr = config.lr * std::pow(config.lr_decay, std::max(round - 1, 0));

  Rng rng(derive_seed(config.seed, {hash_string("local"), static_cast<std::uint64_t>(round),
                                    static_cast<std::uint64_t>(client_id)}));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  ClientUpdate update;
  update.client_id = client_id;
  update.num_samples = static_cast<std::int64_t>(n);
  const auto B = static_cast<std::size_t>(config.batch_size);
  std::vector<std::int64_t> batch_ids;
  std::vector<int> labels;
  Matrix z;

  for (int epoch = 0; epoch < config.local_epochs; ++epoch) {
    shuffle_in_place(order, rng);
    losses::LossBreakdown sum;
    for (std::size_t start = 0; start < n; start += B) {
      const std::size_t b = std::min(B, n - start);
      batch_ids.resize(b);
      labels.resize(b);
      if (client.visual) z.resize(static_cast<Eigen::Index>(b), client.visual->cols());
      for (std::size_t i = 0; i < b; ++i) {
        const std::size_t pos = order[start + i];
        batch_ids[i] = client.indices[pos];
        labels[i] = client.dataset->labels[static_cast<std::size_t>(batch_ids[i])];
        if (client.visual) z.row(static_cast<Eigen::Index>(i)) = client.visual->row(static_cast<Eigen::Index>(pos));
      }
      nn::Tensor x = data::to_tensor(*client.dataset, batch_ids);

      model.zero_grad();
      auto out = model.forward(x, nn::Mode::kTrain);
      losses::LossGradients grads;
      losses::BatchAnchors anchors{client.visual ? &z : nullptr, client.text};
      auto bd = losses::total_loss(out, anchors, labels, weights, &grads);
      if (!std::isfinite(bd.total)) {
        throw TrainingDivergedError("client " + std::to_string(client_id) + " diverged in round " +
                                        std::to_string(round) + ", epoch " + std::to_string(epoch),
                                    epoch);
      }
      model.backward(grads.logits, grads.features);

      for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto* p = params[pi];
        if (!p->trainable) continue;
        double* v = velocity.data() + offsets[pi];
        const double* w0 = global_params.data() + offsets[pi];
        for (std::size_t j = 0; j < p->value.size(); ++j) {
          double g = p->grad[j] + config.weight_decay * p->value[j];
          if (weights.mu_prox != 0.0) g += weights.mu_prox * (p->value[j] - w0[j]);
          v[j] = config.momentum * v[j] + g;
          p->value[j] -= lr * v[j];
        }
      }
      const auto wb = static_cast<double>(b);
      sum.ce += bd.ce * wb;
      sum.kd += bd.kd * wb;
      sum.con += bd.con * wb;
      sum.total += bd.total * wb;
    }
    const auto dn = static_cast<double>(n);
    update.loss_trace.push_back({sum.ce / dn, sum.kd / dn, sum.con / dn, sum.total / dn});
  }
  update.params = model.flatten();
  for (double v : update.params) {
    if (!std::isfinite(v)) {
      throw TrainingDivergedError("client " + std::to_string(client_id) + " produced non-finite parameters",
                                  config.local_epochs - 1);
    }
  }
  return update;
}

std::vector<double> aggregation_weights(std::span<const std::int64_t> sample_counts) {
  if (sample_counts.empty()) throw InvalidInputError("no sample counts");
  long double total = 0;
  for (auto c : sample_counts) {
    if (c <= 0) throw InvalidInputError("sample counts must be positive");
    total += static_cast<long double>(c);
  }
  std::vector<double> w;
  for (auto c : sample_counts) w.push_back(static_cast<double>(static_cast<long double>(c) / total));
  return w;
}

std::vector<double> fedavg_aggregate(const std::vector<ClientUpdate>& updates) {
  if (updates.empty()) throw InvalidInputError("no client updates to aggregate");
  const std::size_t len = updates.front().params.size();
  for (const auto& u : updates) {
    if (u.params.size() != len) throw InvalidInputError("client parameter vectors differ in length");
    if (u.num_samples <= 0) throw InvalidInputError("client update with no samples");
  }
  // Running weighted mean: exact for a single update and for identical ones.
  std::vector<double> mean = updates.front().params;
  double seen = static_cast<double>(updates.front().num_samples);
  for (std::size_t k = 1; k < updates.size(); ++k) {
    const double nk = static_cast<double>(updates[k].num_samples);
    seen += nk;
    const double r = nk / seen;
    const auto& w = updates[k].params;
    for (std::size_t j = 0; j < len; ++j) mean[j] += (w[j] - mean[j]) * r;
  }
  // Rounding must not leave the convex hull of the inputs.
  for (std::size_t j = 0; j < len; ++j) {
    double lo = updates.front().params[j], hi = lo;
    for (const auto& u : updates) {
      lo = std::min(lo, u.params[j]);
      hi = std::max(hi, u.params[j]);
    }
    mean[j] = std::clamp(mean[j], lo, hi);
  }
  return mean;
}

double evaluate(models::ClientModel& model, std::span<const double> params, const data::Dataset& test,
                int batch_size) {
  if (test.size() == 0) throw InvalidInputError("empty test set");
  model.unflatten(params);
  std::size_t correct = 0;
  std::vector<std::int64_t> ids;
  for (std::size_t start = 0; start < test.size(); start += static_cast<std::size_t>(batch_size)) {
    std::size_t b = std::min(static_cast<std::size_t>(batch_size), test.size() - start);
    ids.resize(b);
    for (std::size_t i = 0; i < b; ++i) ids[i] = static_cast<std::int64_t>(start + i);
    auto out = model.forward(data::to_tensor(test, ids), nn::Mode::kEval);
    for (std::size_t i = 0; i < b; ++i) {
      const auto row = out.logits.row(static_cast<Eigen::Index>(i));
      Eigen::Index best = 0;
      for (Eigen::Index c = 1; c < row.size(); ++c) {
        if (row(c) > row(best)) best = c;
      }
      if (best == test.labels[start + i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

nlohmann::json to_json(const MetricsRecord& m) {
  return {{"round", m.round},       {"test_acc", m.test_acc}, {"mean_ce", m.mean_ce},        {"mean_kd", m.mean_kd},
          {"mean_con", m.mean_con}, {"clients", m.clients},   {"wall_time_s", m.wall_time_s}};
}

MetricsRecord metrics_from_json(const nlohmann::json& doc) {
  MetricsRecord m;
  m.round = doc.at("round").get<int>();
  m.test_acc = doc.at("test_acc").get<double>();
  m.mean_ce = doc.at("mean_ce").get<double>();
  m.mean_kd = doc.at("mean_kd").get<double>();
  m.mean_con = doc.at("mean_con").get<double>();
  m.clients = doc.at("clients").get<std::vector<int>>();
  m.wall_time_s = doc.at("wall_time_s").get<double>();
  return m;
}

namespace {

void save_round_checkpoint(const fs::path& dir, const std::string& config_hash, std::uint64_t seed,
                           const models::BackboneSpec& spec, const GlobalState& state) {
  fs::create_directories(dir);
  // Write everything under temporary names, then rename; state.json last so a
  // crash leaves either the previous round or the new one.
  models::save_checkpoint(dir / "global.tmp", spec, state.params);
  nlohmann::json doc{{"round", state.round}, {"seed", seed}, {"config_hash", config_hash}};
  doc["history"] = nlohmann::json::array();
  for (const auto& m : state.history) doc["history"].push_back(to_json(m));
  io::write_text(dir / "state.json.tmp", doc.dump(2) + "\n");
  fs::rename(dir / "global.tmp.params", dir / "global.params");
  fs::rename(dir / "global.tmp.json", dir / "global.json");
  fs::rename(dir / "state.json.tmp", dir / "state.json");
}

}  // namespace

bool load_round_checkpoint(const fs::path& dir, const std::string& config_hash, GlobalState& state) {
  if (dir.empty() || !fs::exists(dir / "state.json")) return false;
  auto doc = nlohmann::json::parse(io::read_text(dir / "state.json"));
  if (doc.at("config_hash").get<std::string>() != config_hash) return false;
  auto ck = models::load_checkpoint(dir / "global");
  if (!state.params.empty() && ck.params.size() != state.params.size()) {
    throw IntegrityError("checkpoint parameter count differs from the model");
  }
  state.round = doc.at("round").get<int>();
  state.params = std::move(ck.params);
  state.history.clear();
  for (const auto& m : doc.at("history")) state.history.push_back(metrics_from_json(m));
  if (static_cast<int>(state.history.size()) != state.round) throw IntegrityError("checkpoint history is incomplete");
  return true;
}

GlobalState run_rounds(GlobalState state, models::ClientModel& model, const Federation& fed,
                       const RoundConfig& config, int rounds, const RunOptions& options) {
  if (!fed.train || !fed.test || !fed.partition) throw InvalidInputError("federation is missing data or partition");
  const int K = fed.partition->num_clients();
  config.validate(K);
  if (rounds < 0) throw InvalidInputError("rounds must be >= 0");
  if (state.params.empty()) state.params = model.flatten();
  const std::size_t len = state.params.size();
  if (len != model.num_parameters()) throw InvalidInputError("state parameters do not fit the model");

  if (!options.checkpoint_dir.empty()) load_round_checkpoint(options.checkpoint_dir, options.config_hash, state);

  // Anchors are sliced once per client; the broadcast in a round is a copy of
  // the global vector plus these read-only views.
  std::vector<Matrix> visual(static_cast<std::size_t>(K));
  Matrix text;
  if (fed.store) {
    text = fed.store->text.class_features.cast<double>();
    if (text.rows() != fed.train->num_classes()) {
      throw StateError("store has " + std::to_string(text.rows()) + " text anchors for " +
                       std::to_string(fed.train->num_classes()) + " classes");
    }
    for (int k = 0; k < K; ++k) {
      const auto& idx = fed.partition->client_indices[static_cast<std::size_t>(k)];
      visual[static_cast<std::size_t>(k)] = features::slice_store(*fed.store, idx).features.cast<double>();
    }
  }

  while (state.round < rounds) {
    const int r = state.round + 1;
    auto t0 = std::chrono::steady_clock::now();
    auto selected = select_clients(K, config.clients_per_round, r, config.seed);
    std::vector<ClientUpdate> updates;
    for (int k : selected) {
      ClientData cd;
      cd.dataset = fed.train;
      cd.indices = fed.partition->client_indices[static_cast<std::size_t>(k)];
      if (fed.store) {
        cd.visual = &visual[static_cast<std::size_t>(k)];
        cd.text = &text;
      }
      try {
        updates.push_back(local_train(model, state.params, cd, config, r, k));
      } catch (const TrainingDivergedError& e) {
        throw TrainingDivergedError(std::string(e.what()) + " (run aborted at round " + std::to_string(r) + ")",
                                    e.epoch());
      }
    }
    state.params = fedavg_aggregate(updates);
    if (state.params.size() != len) throw StateError("parameter length changed during aggregation");

    MetricsRecord m;
    m.round = r;
    m.clients = selected;
    m.test_acc = evaluate(model, state.params, *fed.test);
    std::vector<std::int64_t> counts;
    for (const auto& u : updates) counts.push_back(u.num_samples);
    auto w = aggregation_weights(counts);
    for (std::size_t i = 0; i < updates.size(); ++i) {
      const auto& last = updates[i].loss_trace.back();
      m.mean_ce += w[i] * last.ce;
      m.mean_kd += w[i] * last.kd;
      m.mean_con += w[i] * last.con;
    }
    if (options.record_wall_time) {
      m.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    state.round = r;
    state.history.push_back(m);
    if (!options.checkpoint_dir.empty()) {
      save_round_checkpoint(options.checkpoint_dir, options.config_hash, config.seed, model.spec(), state);
    }
    if (options.on_round) options.on_round(m);
    if (options.stop_after_round >= 0 && r >= options.stop_after_round) break;
  }
  return state;
}

}  // namespace semfl::fl
