#include "semfl/partition/partition.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "semfl/common/error.hpp"
#include "semfl/common/rng.hpp"

namespace semfl::partition {
namespace {

constexpr int kMaxRedraws = 50;

int infer_num_classes(std::span<const int> labels) {
  int max_label = -1;
  for (int y : labels) {
    if (y < 0) throw InvalidInputError("negative class label " + std::to_string(y));
    max_label = std::max(max_label, y);
  }
  return max_label + 1;
}

std::vector<std::vector<std::int64_t>> group_by_class(std::span<const int> labels, int num_classes) {
  std::vector<std::vector<std::int64_t>> by_class(static_cast<std::size_t>(num_classes));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    by_class[static_cast<std::size_t>(labels[i])].push_back(static_cast<std::int64_t>(i));
  }
  return by_class;
}

void check_common(std::span<const int> labels, const PartitionSpec& spec) {
  if (labels.empty()) throw InvalidInputError("cannot partition an empty dataset");
  if (spec.num_clients < 1) throw InvalidInputError("num_clients must be positive");
  if (static_cast<std::size_t>(spec.num_clients) > labels.size()) {
    throw InfeasiblePartitionError("num_clients (" + std::to_string(spec.num_clients) +
                                   ") exceeds the number of samples (" +
                                   std::to_string(labels.size()) + ")");
  }
}

PartitionMap finish(Scenario scenario, std::uint64_t seed, int num_classes,
                    std::vector<std::vector<std::int64_t>> client_indices,
                    std::span<const int> labels) {
  PartitionMap map;
  map.scenario = scenario;
  map.seed = seed;
  map.num_classes = num_classes;
  map.label_histogram.assign(client_indices.size(),
                             std::vector<std::int64_t>(static_cast<std::size_t>(num_classes), 0));
  for (std::size_t k = 0; k < client_indices.size(); ++k) {
    auto& idx = client_indices[k];
    std::sort(idx.begin(), idx.end());
    for (auto i : idx) ++map.label_histogram[k][static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
  }
  map.client_indices = std::move(client_indices);
  return map;
}

// Core Dirichlet label-shift split. `labels` may be a subset view; returned
// indices are positions into `labels`.
std::vector<std::vector<std::int64_t>> dirichlet_assign(std::span<const int> labels, int num_classes,
                                                         int num_clients, double alpha, Rng& rng) {
  auto by_class = group_by_class(labels, num_classes);
  const auto K = static_cast<std::size_t>(num_clients);
  const auto C = static_cast<std::size_t>(num_classes);

  for (auto& members : by_class) shuffle_in_place(members, rng);

  std::vector<std::vector<std::int64_t>> counts(C);
  auto draw_class = [&](std::size_t c) {
    auto p = dirichlet(rng, alpha, K);
    counts[c] = largest_remainder(static_cast<std::int64_t>(by_class[c].size()), p);
  };
  for (std::size_t c = 0; c < C; ++c) draw_class(c);

  auto client_totals = [&] {
    std::vector<std::int64_t> totals(K, 0);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t k = 0; k < K; ++k) totals[k] += counts[c][k];
    return totals;
  };
  auto has_empty = [](const std::vector<std::int64_t>& totals) {
    return std::find(totals.begin(), totals.end(), 0) != totals.end();
  };

  auto totals = client_totals();
  for (int attempt = 0; attempt < kMaxRedraws && has_empty(totals); ++attempt) {
    std::size_t c = rng() % C;
    if (by_class[c].empty()) continue;
    draw_class(c);
    totals = client_totals();
  }
  // Fallback: donate one sample from the largest client to each empty one.
  while (has_empty(totals)) {
    auto empty = static_cast<std::size_t>(std::find(totals.begin(), totals.end(), 0) - totals.begin());
    auto donor = static_cast<std::size_t>(std::max_element(totals.begin(), totals.end()) - totals.begin());
    std::size_t best_class = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (counts[c][donor] > counts[best_class][donor]) best_class = c;
    --counts[best_class][donor];
    ++counts[best_class][empty];
    --totals[donor];
    ++totals[empty];
  }

  std::vector<std::vector<std::int64_t>> clients(K);
  for (std::size_t c = 0; c < C; ++c) {
    std::size_t cursor = 0;
    for (std::size_t k = 0; k < K; ++k) {
      for (std::int64_t j = 0; j < counts[c][k]; ++j) clients[k].push_back(by_class[c][cursor++]);
    }
  }
  return clients;
}

}  // namespace

std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::kDirichlet:
      return "dirichlet";
    case Scenario::kExtreme:
      return "extreme";
    case Scenario::kLongtail:
      return "longtail";
  }
  return "unknown";
}

Scenario scenario_from_string(const std::string& name) {
  if (name == "dirichlet") return Scenario::kDirichlet;
  if (name == "extreme") return Scenario::kExtreme;
  if (name == "longtail") return Scenario::kLongtail;
  throw InvalidInputError("unknown partition scenario '" + name + "'");
}

void PartitionSpec::validate(int num_classes) const {
  if (num_clients < 1) throw InvalidInputError("num_clients must be positive");
  switch (scenario) {
    case Scenario::kDirichlet:
      if (!(alpha > 0.0) || !std::isfinite(alpha)) throw InvalidInputError("alpha must be > 0");
      break;
    case Scenario::kExtreme:
      if (classes_per_client < 1) throw InvalidInputError("classes_per_client must be >= 1");
      if (num_classes > 0 && classes_per_client > num_classes) {
        throw InvalidInputError("classes_per_client (" + std::to_string(classes_per_client) +
                                ") exceeds the number of classes (" + std::to_string(num_classes) + ")");
      }
      break;
    case Scenario::kLongtail:
      if (!(imbalance_ratio >= 1.0) || !std::isfinite(imbalance_ratio)) {
        throw InvalidInputError("imbalance_ratio must be >= 1");
      }
      if (!(alpha > 0.0)) throw InvalidInputError("alpha must be > 0");
      break;
  }
}

std::vector<std::int64_t> largest_remainder(std::int64_t total, std::span<const double> proportions) {
  const auto n = proportions.size();
  std::vector<std::int64_t> out(n, 0);
  if (n == 0) return out;
  double mass = std::accumulate(proportions.begin(), proportions.end(), 0.0);
  std::vector<double> remainder(n, 0.0);
  std::int64_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double exact = mass > 0.0 ? static_cast<double>(total) * proportions[i] / mass : 0.0;
    out[i] = static_cast<std::int64_t>(std::floor(exact));
    remainder[i] = exact - static_cast<double>(out[i]);
    assigned += out[i];
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t j = 0; assigned < total; j = (j + 1) % n, ++assigned) ++out[order[j]];
  return out;
}

PartitionMap dirichlet_partition(std::span<const int> labels, const PartitionSpec& spec) {
  if (spec.scenario != Scenario::kDirichlet) throw InvalidInputError("spec scenario is not dirichlet");
  check_common(labels, spec);
  const int C = infer_num_classes(labels);
  spec.validate(C);
  auto by_class = group_by_class(labels, C);
  for (int c = 0; c < C; ++c) {
    if (by_class[static_cast<std::size_t>(c)].empty()) {
      throw InvalidInputError("class " + std::to_string(c) + " has no samples");
    }
  }
  Rng rng(derive_seed(spec.seed, {hash_string("dirichlet")}));
  auto clients = dirichlet_assign(labels, C, spec.num_clients, spec.alpha, rng);
  return finish(Scenario::kDirichlet, spec.seed, C, std::move(clients), labels);
}

PartitionMap extreme_partition(std::span<const int> labels, const PartitionSpec& spec) {
  if (spec.scenario != Scenario::kExtreme) throw InvalidInputError("spec scenario is not extreme");
  check_common(labels, spec);
  const int C = infer_num_classes(labels);
  spec.validate(C);
  const int K = spec.num_clients;
  const int s = spec.classes_per_client;
  if (static_cast<long>(s) * K < C) {
    throw InfeasiblePartitionError("classes_per_client * num_clients < num_classes; some class would be unassigned");
  }
  Rng rng(derive_seed(spec.seed, {hash_string("extreme")}));
  std::vector<int> class_order(static_cast<std::size_t>(C));
  std::iota(class_order.begin(), class_order.end(), 0);
  shuffle_in_place(class_order, rng);

  // Round-robin: slot q = k*s + j takes class_order[q mod C].
  std::vector<std::vector<int>> holders(static_cast<std::size_t>(C));
  for (int k = 0; k < K; ++k) {
    for (int j = 0; j < s; ++j) {
      int c = class_order[static_cast<std::size_t>((k * s + j) % C)];
      holders[static_cast<std::size_t>(c)].push_back(k);
    }
  }

  auto by_class = group_by_class(labels, C);
  std::vector<std::vector<std::int64_t>> clients(static_cast<std::size_t>(K));
  for (int c = 0; c < C; ++c) {
    auto& members = by_class[static_cast<std::size_t>(c)];
    shuffle_in_place(members, rng);
    const auto& owners = holders[static_cast<std::size_t>(c)];
    std::vector<double> equal(owners.size(), 1.0);
    auto counts = largest_remainder(static_cast<std::int64_t>(members.size()), equal);
    std::size_t cursor = 0;
    for (std::size_t o = 0; o < owners.size(); ++o) {
      for (std::int64_t j = 0; j < counts[o]; ++j) {
        clients[static_cast<std::size_t>(owners[o])].push_back(members[cursor++]);
      }
    }
  }
  return finish(Scenario::kExtreme, spec.seed, C, std::move(clients), labels);
}

std::vector<std::int64_t> longtail_counts(std::int64_t n_max, int num_classes, double rho) {
  if (!(rho >= 1.0)) throw InvalidInputError("imbalance_ratio must be >= 1");
  std::vector<std::int64_t> out(static_cast<std::size_t>(num_classes), n_max);
  if (num_classes < 2) return out;
  for (int c = 0; c < num_classes; ++c) {
    double exponent = -static_cast<double>(c) / static_cast<double>(num_classes - 1);
    auto n = static_cast<std::int64_t>(std::llround(static_cast<double>(n_max) * std::pow(rho, exponent)));
    out[static_cast<std::size_t>(c)] = std::max<std::int64_t>(n, 1);
  }
  return out;
}

PartitionMap longtail_partition(std::span<const int> labels, const PartitionSpec& spec) {
  if (spec.scenario != Scenario::kLongtail) throw InvalidInputError("spec scenario is not longtail");
  if (!(spec.imbalance_ratio >= 1.0)) throw InvalidInputError("imbalance_ratio must be >= 1");
  check_common(labels, spec);
  const int C = infer_num_classes(labels);
  spec.validate(C);
  auto by_class = group_by_class(labels, C);
  std::int64_t n_max = -1;
  for (const auto& members : by_class) {
    if (members.empty()) throw InvalidInputError("every class needs at least one sample");
    auto n = static_cast<std::int64_t>(members.size());
    n_max = n_max < 0 ? n : std::min(n_max, n);
  }
  auto targets = longtail_counts(n_max, C, spec.imbalance_ratio);

  Rng rng(derive_seed(spec.seed, {hash_string("longtail")}));
  std::vector<std::int64_t> retained;
  for (int c = 0; c < C; ++c) {
    auto& members = by_class[static_cast<std::size_t>(c)];
    shuffle_in_place(members, rng);
    members.resize(static_cast<std::size_t>(targets[static_cast<std::size_t>(c)]));
    std::sort(members.begin(), members.end());
    retained.insert(retained.end(), members.begin(), members.end());
  }
  std::sort(retained.begin(), retained.end());
  if (static_cast<std::size_t>(spec.num_clients) > retained.size()) {
    throw InfeasiblePartitionError("num_clients exceeds the number of retained samples");
  }
  std::vector<int> sub_labels(retained.size());
  for (std::size_t i = 0; i < retained.size(); ++i) sub_labels[i] = labels[static_cast<std::size_t>(retained[i])];

  auto local = dirichlet_assign(sub_labels, C, spec.num_clients, spec.alpha, rng);
  for (auto& client : local)
    for (auto& i : client) i = retained[static_cast<std::size_t>(i)];
  return finish(Scenario::kLongtail, spec.seed, C, std::move(local), labels);
}

PartitionMap make_partition(std::span<const int> labels, const PartitionSpec& spec) {
  switch (spec.scenario) {
    case Scenario::kDirichlet:
      return dirichlet_partition(labels, spec);
    case Scenario::kExtreme:
      return extreme_partition(labels, spec);
    case Scenario::kLongtail:
      return longtail_partition(labels, spec);
  }
  throw InvalidInputError("unknown scenario");
}

double total_variation(std::span<const std::int64_t> a, std::span<const std::int64_t> b) {
  if (a.size() != b.size()) throw InvalidInputError("histogram length mismatch");
  double na = 0.0, nb = 0.0;
  for (auto v : a) na += static_cast<double>(v);
  for (auto v : b) nb += static_cast<double>(v);
  if (na == 0.0 || nb == 0.0) return na == nb ? 0.0 : 1.0;
  double tv = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    tv += std::abs(static_cast<double>(a[i]) / na - static_cast<double>(b[i]) / nb);
  }
  return 0.5 * tv;
}

PartitionStats partition_stats(const PartitionMap& map) {
  PartitionStats stats;
  const auto K = map.client_indices.size();
  for (std::size_t k = 0; k < K; ++k) {
    const auto& hist = map.label_histogram[k];
    auto n = static_cast<std::int64_t>(map.client_indices[k].size());
    stats.client_sizes.push_back(n);
    double h = 0.0;
    int support = 0;
    for (auto count : hist) {
      if (count == 0) continue;
      ++support;
      double p = static_cast<double>(count) / static_cast<double>(n);
      h -= p * std::log(p);
    }
    stats.label_entropy.push_back(h);
    stats.label_support.push_back(support);
  }
  stats.pairwise_tv.assign(K, std::vector<double>(K, 0.0));
  for (std::size_t a = 0; a < K; ++a)
    for (std::size_t b = a + 1; b < K; ++b) {
      double tv = total_variation(map.label_histogram[a], map.label_histogram[b]);
      stats.pairwise_tv[a][b] = stats.pairwise_tv[b][a] = tv;
    }
  return stats;
}

nlohmann::json to_json(const PartitionMap& map) {
  return nlohmann::json{{"scenario", to_string(map.scenario)},
                        {"seed", map.seed},
                        {"clients", map.client_indices}};
}

PartitionMap from_json(const nlohmann::json& doc, std::span<const int> labels, int num_classes) {
  try {
    auto scenario = scenario_from_string(doc.at("scenario").get<std::string>());
    auto seed = doc.at("seed").get<std::uint64_t>();
    auto clients = doc.at("clients").get<std::vector<std::vector<std::int64_t>>>();
    std::vector<char> seen(labels.size(), 0);
    for (const auto& client : clients)
      for (auto i : client) {
        if (i < 0 || static_cast<std::size_t>(i) >= labels.size()) {
          throw InvalidInputError("partition index " + std::to_string(i) + " outside the dataset");
        }
        if (seen[static_cast<std::size_t>(i)]++) {
          throw InvalidInputError("partition index " + std::to_string(i) + " assigned twice");
        }
      }
    return finish(scenario, seed, num_classes, std::move(clients), labels);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed partition document: ") + e.what());
  }
}

}  // namespace semfl::partition
