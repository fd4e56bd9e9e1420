#include "semfl/experiments/config.hpp"

#include <cmath>
#include <set>

#include "semfl/common/binary_io.hpp"
#include "semfl/common/error.hpp"
#include "semfl/common/hash.hpp"
#include "semfl/common/rng.hpp"

namespace fs = std::filesystem;

namespace semfl::experiments {
namespace {

// Reads one JSON object, remembering which keys were consumed so leftovers
// can be reported as typos.
class Reader {
 public:
  Reader(const nlohmann::json& obj, std::string where, std::vector<std::string>& errors)
      : obj_(obj), where_(std::move(where)), errors_(errors) {
    if (!obj_.is_object()) errors_.push_back(where_ + ": expected an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    if (!obj_.is_object() || !obj_.contains(key)) return;
    seen_.insert(key);
    try {
      const auto& v = obj_.at(key);
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw std::runtime_error("expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw std::runtime_error("expected an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0) {
            throw std::runtime_error("expected a non-negative integer");
          }
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw std::runtime_error("expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw std::runtime_error("expected a string");
      }
      out = v.get<T>();
    } catch (const std::exception& e) {
      errors_.push_back(where_ + "." + key + ": " + e.what());
    }
  }

  void get_path(const std::string& key, fs::path& out) {
    std::string s = out.string();
    get(key, s);
    out = s;
  }

  template <typename Enum, typename Parse>
  void get_enum(const std::string& key, Enum& out, Parse parse) {
    std::string s;
    if (!obj_.is_object() || !obj_.contains(key)) return;
    get(key, s);
    if (!obj_.at(key).is_string()) return;
    try {
      out = parse(s);
    } catch (const Error& e) {
      errors_.push_back(where_ + "." + key + ": " + e.what());
    }
  }

  /// Sub-object reader; missing sections read as empty objects.
  Reader section(const std::string& key) {
    seen_.insert(key);
    static const nlohmann::json empty = nlohmann::json::object();
    if (!obj_.is_object() || !obj_.contains(key)) return Reader(empty, where_ + "." + key, errors_);
    return Reader(obj_.at(key), where_ + "." + key, errors_);
  }

  void finish() {
    if (!obj_.is_object()) return;
    for (const auto& [key, _] : obj_.items()) {
      if (!seen_.count(key)) errors_.push_back(where_ + ": unknown key '" + key + "'");
    }
  }

 private:
  const nlohmann::json& obj_;
  std::string where_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
};

std::uint64_t sub_seed(std::uint64_t seed, const char* name) { return derive_seed(seed, {hash_string(name)}); }

template <typename F>
void check(std::vector<std::string>& errors, const std::string& where, F&& f) {
  try {
    f();
  } catch (const Error& e) {
    errors.push_back(where + ": " + e.what());
  }
}

}  // namespace

int ExperimentConfig::num_classes() const {
  return data.kind == data::DatasetKind::kSynthetic ? data.synthetic_classes : data::num_classes_of(data.kind);
}

models::BackboneSpec ExperimentConfig::backbone() const {
  models::BackboneSpec spec;
  spec.architecture = architecture;
  spec.num_classes = num_classes();
  spec.feature_dim = extraction.feature_dim;
  spec.seed = sub_seed(seed, "model");
  int side = 32;
  if (data.kind == data::DatasetKind::kTinyImageNet) side = 64;
  if (data.kind == data::DatasetKind::kSynthetic) side = data.synthetic_size;
  spec.input_height = spec.input_width = side;
  return spec;
}

partition::PartitionSpec ExperimentConfig::seeded_partition() const {
  auto p = partition;
  p.seed = sub_seed(seed, "partition");
  return p;
}

fl::RoundConfig ExperimentConfig::seeded_round() const {
  auto r = round;
  r.seed = sub_seed(seed, "training");
  return r;
}

features::FeatureExtractionConfig ExperimentConfig::seeded_extraction() const {
  auto e = extraction;
  e.seed = sub_seed(seed, "extraction");
  return e;
}

std::uint64_t ExperimentConfig::data_seed() const { return sub_seed(seed, "data"); }

std::vector<std::string> validation_errors(const ExperimentConfig& cfg) {
  std::vector<std::string> errors;
  const int C = cfg.num_classes();
  if (cfg.data.kind == data::DatasetKind::kSynthetic) {
    if (cfg.data.synthetic_classes < 2) errors.push_back("dataset.synthetic.classes must be >= 2");
    if (cfg.data.synthetic_train < static_cast<std::size_t>(std::max(C, 1))) {
      errors.push_back("dataset.synthetic.train must be at least the number of classes");
    }
    if (cfg.data.synthetic_test < 1) errors.push_back("dataset.synthetic.test must be positive");
    if (cfg.data.synthetic_size < 8 || cfg.data.synthetic_size % 8 != 0) {
      errors.push_back("dataset.synthetic.size must be a positive multiple of 8");
    }
    if (!(cfg.data.synthetic_noise >= 0.0)) errors.push_back("dataset.synthetic.noise must be >= 0");
    if (!(cfg.data.synthetic_jitter >= 0.0)) errors.push_back("dataset.synthetic.jitter must be >= 0");
  }
  check(errors, "partition", [&] { cfg.partition.validate(C); });
  if (cfg.round.clients_per_round > cfg.partition.num_clients) {
    errors.push_back("training.clients_per_round exceeds partition.num_clients");
  }
  check(errors, "training", [&] { cfg.round.validate(std::max(cfg.round.clients_per_round, cfg.partition.num_clients)); });
  check(errors, "extraction", [&] { cfg.extraction.validate(); });
  if (cfg.rounds < 0) errors.push_back("rounds must be >= 0");
  if (cfg.output_dir.empty()) errors.push_back("output_dir must not be empty");
  if (cfg.provider == features::ProviderKind::kDiffusion && cfg.store_dir.empty()) {
    errors.push_back("provider 'diffusion' needs store_dir (run `semfl extract-features` first)");
  }
  if (!cfg.provider_weights.empty() && cfg.provider != features::ProviderKind::kDiffusion) {
    errors.push_back("provider_weights only applies to the diffusion provider");
  }
  const auto spec = cfg.backbone();
  if (cfg.architecture == models::Architecture::kTinyCnn && spec.input_height % 4 != 0) {
    errors.push_back("tinycnn needs an input side divisible by 4");
  }
  return errors;
}

void validate(const ExperimentConfig& cfg) {
  auto errors = validation_errors(cfg);
  if (errors.empty()) return;
  std::string msg = "invalid experiment configuration:";
  for (const auto& e : errors) msg += "\n  - " + e;
  throw ConfigError(msg);
}

nlohmann::json to_json(const ExperimentConfig& cfg) {
  const auto& d = cfg.data;
  const auto& r = cfg.round;
  const auto& w = r.weights;
  return {
      {"dataset",
       {{"name", data::to_string(d.kind)},
        {"train_size", d.train_size},
        {"test_size", d.test_size},
        {"cache_dir", d.cache_dir.string()},
        {"download", d.download},
        {"checksum", d.checksum},
        {"synthetic",
         {{"train", d.synthetic_train},
          {"test", d.synthetic_test},
          {"classes", d.synthetic_classes},
          {"size", d.synthetic_size},
          {"noise", d.synthetic_noise},
          {"jitter", d.synthetic_jitter}}}}},
      {"partition",
       {{"scenario", partition::to_string(cfg.partition.scenario)},
        {"num_clients", cfg.partition.num_clients},
        {"alpha", cfg.partition.alpha},
        {"classes_per_client", cfg.partition.classes_per_client},
        {"imbalance_ratio", cfg.partition.imbalance_ratio}}},
      {"training",
       {{"algorithm", fl::to_string(r.algorithm)},
        {"clients_per_round", r.clients_per_round},
        {"local_epochs", r.local_epochs},
        {"lr", r.lr},
        {"lr_decay", r.lr_decay},
        {"momentum", r.momentum},
        {"batch_size", r.batch_size},
        {"weight_decay", r.weight_decay},
        {"lambda_kd", w.lambda_kd},
        {"lambda_con", w.lambda_con},
        {"tau", w.tau},
        {"mu_prox", w.mu_prox},
        {"kd_temperature", w.kd_temperature}}},
      {"extraction",
       {{"timestep", cfg.extraction.timestep},
        {"feature_dim", cfg.extraction.feature_dim},
        {"layer_ids", cfg.extraction.layer_ids},
        {"gamma", cfg.extraction.gamma},
        {"prompt_template", cfg.extraction.prompt_template}}},
      {"provider", features::to_string(cfg.provider)},
      {"provider_weights", cfg.provider_weights.string()},
      {"store_dir", cfg.store_dir.string()},
      {"backbone", models::to_string(cfg.architecture)},
      {"rounds", cfg.rounds},
      {"output_dir", cfg.output_dir.string()},
      {"seed", cfg.seed},
      {"record_wall_time", cfg.record_wall_time},
  };
}

ExperimentConfig config_from_json(const nlohmann::json& doc) {
  ExperimentConfig cfg;
  std::vector<std::string> errors;
  Reader top(doc, "config", errors);
  {
    auto ds = top.section("dataset");
    ds.get_enum("name", cfg.data.kind, data::dataset_kind_from_string);
    ds.get("train_size", cfg.data.train_size);
    ds.get("test_size", cfg.data.test_size);
    ds.get_path("cache_dir", cfg.data.cache_dir);
    ds.get("download", cfg.data.download);
    ds.get("checksum", cfg.data.checksum);
    auto syn = ds.section("synthetic");
    syn.get("train", cfg.data.synthetic_train);
    syn.get("test", cfg.data.synthetic_test);
    syn.get("classes", cfg.data.synthetic_classes);
    syn.get("size", cfg.data.synthetic_size);
    syn.get("noise", cfg.data.synthetic_noise);
    syn.get("jitter", cfg.data.synthetic_jitter);
    syn.finish();
    ds.finish();
  }
  {
    auto p = top.section("partition");
    p.get_enum("scenario", cfg.partition.scenario, partition::scenario_from_string);
    p.get("num_clients", cfg.partition.num_clients);
    p.get("alpha", cfg.partition.alpha);
    p.get("classes_per_client", cfg.partition.classes_per_client);
    p.get("imbalance_ratio", cfg.partition.imbalance_ratio);
    p.finish();
  }
  {
    auto t = top.section("training");
    auto& r = cfg.round;
    t.get_enum("algorithm", r.algorithm, fl::algorithm_from_string);
    t.get("clients_per_round", r.clients_per_round);
    t.get("local_epochs", r.local_epochs);
    t.get("lr", r.lr);
    t.get("lr_decay", r.lr_decay);
    t.get("momentum", r.momentum);
    t.get("batch_size", r.batch_size);
    t.get("weight_decay", r.weight_decay);
    t.get("lambda_kd", r.weights.lambda_kd);
    t.get("lambda_con", r.weights.lambda_con);
    t.get("tau", r.weights.tau);
    t.get("mu_prox", r.weights.mu_prox);
    t.get("kd_temperature", r.weights.kd_temperature);
    t.finish();
  }
  {
    auto e = top.section("extraction");
    e.get("timestep", cfg.extraction.timestep);
    e.get("feature_dim", cfg.extraction.feature_dim);
    e.get("layer_ids", cfg.extraction.layer_ids);
    e.get("gamma", cfg.extraction.gamma);
    e.get("prompt_template", cfg.extraction.prompt_template);
    e.finish();
  }
  top.get_enum("provider", cfg.provider, features::provider_kind_from_string);
  top.get_path("provider_weights", cfg.provider_weights);
  top.get_path("store_dir", cfg.store_dir);
  top.get_enum("backbone", cfg.architecture, models::architecture_from_string);
  top.get("rounds", cfg.rounds);
  top.get_path("output_dir", cfg.output_dir);
  top.get("seed", cfg.seed);
  top.get("record_wall_time", cfg.record_wall_time);
  top.finish();

  if (errors.empty()) {
    auto more = validation_errors(cfg);
    errors.insert(errors.end(), more.begin(), more.end());
  }
  if (!errors.empty()) {
    std::string msg = "invalid experiment configuration:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(doc);
}

std::string config_hash(const ExperimentConfig& cfg) {
  auto doc = to_json(cfg);
  doc.erase("output_dir");
  return sha256_hex(doc.dump());
}

ExperimentConfig preset(const std::string& name) {
  ExperimentConfig cfg;
  if (name == "smoke") {
    cfg.data.kind = data::DatasetKind::kSynthetic;
    cfg.data.synthetic_train = 200;
    cfg.data.synthetic_test = 100;
    cfg.data.synthetic_size = 16;
    cfg.partition.num_clients = 2;
    cfg.partition.alpha = 0.5;
    cfg.round.clients_per_round = 2;
    cfg.round.local_epochs = 1;
    cfg.round.batch_size = 32;
    cfg.extraction.feature_dim = 32;
    cfg.rounds = 2;
    cfg.output_dir = "runs/smoke";
    return cfg;
  }
  if (name == "desk") {
    cfg.data.kind = data::DatasetKind::kCifar10;
    cfg.data.train_size = 5000;
    cfg.data.test_size = 2000;
    cfg.partition.num_clients = 5;
    cfg.partition.alpha = 0.1;
    cfg.round.clients_per_round = 5;
    cfg.round.local_epochs = 1;
    cfg.rounds = 20;
    cfg.output_dir = "runs/desk";
    return cfg;
  }
  throw ConfigError("unknown preset '" + name + "' (expected smoke or desk)");
}

std::vector<std::string> preset_names() { return {"smoke", "desk"}; }

}  // namespace semfl::experiments
