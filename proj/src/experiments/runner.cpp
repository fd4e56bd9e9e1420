#include "semfl/experiments/runner.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "semfl/common/binary_io.hpp"
#include "semfl/common/error.hpp"
#include "semfl/common/rng.hpp"

namespace fs = std::filesystem;

namespace semfl::experiments {
namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string cell_label(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError("malformed " + what + " value '" + s + "'");
  }
}

void write_json(const fs::path& path, const nlohmann::json& doc) { io::write_text(path, doc.dump(2) + "\n"); }

}  // namespace

ExperimentData load_experiment_data(const ExperimentConfig& cfg) {
  ExperimentData out;
  const auto seed = cfg.data_seed();
  if (cfg.data.kind == data::DatasetKind::kSynthetic) {
    data::SyntheticImageSpec spec;
    spec.num_classes = cfg.data.synthetic_classes;
    spec.size = cfg.data.synthetic_size;
    spec.noise = cfg.data.synthetic_noise;
    spec.jitter = cfg.data.synthetic_jitter;
    spec.num_samples = cfg.data.synthetic_train;
    spec.seed = derive_seed(seed, {hash_string("train")});
    out.train = data::make_synthetic_images(spec, seed);
    spec.num_samples = cfg.data.synthetic_test;
    spec.seed = derive_seed(seed, {hash_string("test")});
    out.test = data::make_synthetic_images(spec, seed);
    return out;
  }
  data::FetchOptions fetch{cfg.data.cache_dir, cfg.data.download, cfg.data.checksum};
  out.train = data::load_dataset(cfg.data.kind, true, fetch);
  out.test = data::load_dataset(cfg.data.kind, false, fetch);
  if (cfg.data.train_size > 0 && cfg.data.train_size < out.train.size()) {
    out.train = data::stratified_subset(out.train, cfg.data.train_size, derive_seed(seed, {hash_string("train")}));
  }
  if (cfg.data.test_size > 0 && cfg.data.test_size < out.test.size()) {
    out.test = data::stratified_subset(out.test, cfg.data.test_size, derive_seed(seed, {hash_string("test")}));
  }
  return out;
}

namespace {

features::ExtractionRequest request_for(const ExperimentConfig& cfg) {
  return {data::to_string(cfg.data.kind), cfg.data_seed()};
}

void check_store(const ExperimentConfig& cfg, const data::Dataset& train, const features::FeatureStore& store) {
  const auto& ds = store.manifest.value("dataset", nlohmann::json::object());
  if (ds.value("name", std::string()) != data::to_string(cfg.data.kind) ||
      ds.value("size", std::size_t{0}) != train.size() || ds.value("seed", std::uint64_t{0}) != cfg.data_seed()) {
    throw IntegrityError("feature store was extracted from different data (dataset " + ds.dump() +
                         "); rerun `semfl extract-features` with this config");
  }
  if (store.text.class_features.rows() != cfg.num_classes()) {
    throw IntegrityError("feature store has " + std::to_string(store.text.class_features.rows()) +
                         " text anchors, dataset has " + std::to_string(cfg.num_classes()) + " classes");
  }
  if (store.dim() != cfg.extraction.feature_dim) {
    throw IntegrityError("feature store dimension " + std::to_string(store.dim()) + " differs from extraction d " +
                         std::to_string(cfg.extraction.feature_dim));
  }
}

}  // namespace

features::FeatureStore extract_features(const ExperimentConfig& cfg, const data::Dataset& train,
                                        const fs::path& dir) {
  const auto ext = cfg.seeded_extraction();
  auto provider = features::make_provider(cfg.provider, cfg.num_classes(), ext.seed, cfg.provider_weights);
  auto store = features::build_feature_store(train, ext, *provider, request_for(cfg));
  if (!dir.empty()) features::save_store(store, dir);
  return store;
}

features::FeatureStore obtain_store(const ExperimentConfig& cfg, const data::Dataset& train) {
  const auto ext = cfg.seeded_extraction();
  if (cfg.store_dir.empty()) {
    if (cfg.provider != features::ProviderKind::kSynthetic) {
      throw ProviderError("no feature store configured; run `semfl extract-features --config <file>` and set store_dir");
    }
    auto store = extract_features(cfg, train, {});
    check_store(cfg, train, store);
    return store;
  }
  if (!fs::exists(cfg.store_dir / "manifest.json")) {
    throw ProviderError("feature store not found at " + cfg.store_dir.string() +
                        "; run `semfl extract-features --config <file>` first");
  }
  auto store = features::load_store(cfg.store_dir, ext.hash());
  check_store(cfg, train, store);
  return store;
}

std::string metrics_csv_row(const fl::MetricsRecord& m) {
  std::string clients;
  for (std::size_t i = 0; i < m.clients.size(); ++i) {
    if (i) clients += ';';
    clients += std::to_string(m.clients[i]);
  }
  return std::to_string(m.round) + "," + fmt_double(m.test_acc) + "," + fmt_double(m.mean_ce) + "," +
         fmt_double(m.mean_kd) + "," + fmt_double(m.mean_con) + "," + clients + "," + fmt_double(m.wall_time_s);
}

void write_metrics_csv(const fs::path& path, const std::vector<fl::MetricsRecord>& history) {
  std::string text = std::string(kMetricsHeader) + "\n";
  for (const auto& m : history) text += metrics_csv_row(m) + "\n";
  io::write_text(path, text);
}

std::vector<fl::MetricsRecord> read_metrics_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) {
    throw FormatError(path.string() + ": unexpected header, want '" + kMetricsHeader + "'");
  }
  std::vector<fl::MetricsRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = split(line, ',');
    if (f.size() != 7) throw FormatError(path.string() + ": expected 7 fields in '" + line + "'");
    fl::MetricsRecord m;
    m.round = static_cast<int>(parse_double(f[0], "round"));
    m.test_acc = parse_double(f[1], "test_acc");
    m.mean_ce = parse_double(f[2], "mean_ce");
    m.mean_kd = parse_double(f[3], "mean_kd");
    m.mean_con = parse_double(f[4], "mean_con");
    if (!f[5].empty()) {
      for (const auto& c : split(f[5], ';')) m.clients.push_back(static_cast<int>(parse_double(c, "clients")));
    }
    m.wall_time_s = parse_double(f[6], "wall_time_s");
    out.push_back(std::move(m));
  }
  return out;
}

RunSummary run_experiment(const ExperimentConfig& cfg) {
  validate(cfg);
  const auto dir = cfg.output_dir;
  fs::create_directories(dir);
  RunSummary summary;
  summary.dir = dir;
  summary.config_hash = config_hash(cfg);
  write_json(dir / "config.json", to_json(cfg));

  auto data = load_experiment_data(cfg);
  if (data.train.num_classes() != cfg.num_classes()) {
    throw IntegrityError("dataset has " + std::to_string(data.train.num_classes()) + " classes, config expects " +
                         std::to_string(cfg.num_classes()));
  }
  auto part = partition::make_partition(data.train.labels, cfg.seeded_partition());
  write_json(dir / "partition.json", partition::to_json(part));

  std::optional<features::FeatureStore> store;
  const auto round = cfg.seeded_round();
  const auto w = round.effective_weights();
  const bool needs_anchors = w.lambda_kd != 0.0 || w.lambda_con != 0.0;
  // Anchors are also loaded when cheap, so fedavg reports kd/con telemetry
  // on the same footing as semanticfl.
  const bool cheap = cfg.store_dir.empty() ? cfg.provider == features::ProviderKind::kSynthetic
                                           : fs::exists(cfg.store_dir / "manifest.json");
  if (needs_anchors || cheap) store = obtain_store(cfg, data.train);

  auto spec = cfg.backbone();
  auto model = models::build_model(spec);
  fl::GlobalState state;
  state.params = model.flatten();

  fl::Federation fed{&data.train, &data.test, &part, store ? &*store : nullptr};
  fl::RunOptions opts;
  opts.checkpoint_dir = dir / "checkpoint";
  opts.config_hash = summary.config_hash;
  opts.record_wall_time = cfg.record_wall_time;

  fl::GlobalState resumed;
  resumed.params = state.params;
  const auto metrics_path = dir / "metrics.csv";
  if (fl::load_round_checkpoint(opts.checkpoint_dir, opts.config_hash, resumed)) {
    write_metrics_csv(metrics_path, resumed.history);
  } else {
    write_metrics_csv(metrics_path, {});
  }
  opts.on_round = [&](const fl::MetricsRecord& m) {
    std::ofstream out(metrics_path, std::ios::app);
    out << metrics_csv_row(m) << "\n";
  };

  state = fl::run_rounds(std::move(state), model, fed, round, cfg.rounds, opts);
  write_metrics_csv(metrics_path, state.history);
  models::save_checkpoint(dir / "final_model", spec, state.params);

  summary.history = state.history;
  if (!state.history.empty()) {
    summary.final_acc = state.history.back().test_acc;
    for (const auto& m : state.history) {
      if (m.test_acc > summary.best_acc || summary.best_round == 0) {
        summary.best_acc = m.test_acc;
        summary.best_round = m.round;
      }
    }
  }
  write_json(dir / "summary.json", {{"final_acc", summary.final_acc},
                                    {"best_acc", summary.best_acc},
                                    {"best_round", summary.best_round},
                                    {"config_hash", summary.config_hash}});
  return summary;
}

RunSummary run_experiment(const fs::path& config_path) { return run_experiment(load_config(config_path)); }

std::string to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::kTemperature: return "temperature";
    case SweepAxis::kClients: return "clients";
    case SweepAxis::kEpochs: return "epochs";
  }
  return "?";
}

SweepAxis sweep_axis_from_string(const std::string& name) {
  if (name == "temperature" || name == "tau") return SweepAxis::kTemperature;
  if (name == "clients") return SweepAxis::kClients;
  if (name == "epochs") return SweepAxis::kEpochs;
  throw ConfigError("unknown sweep axis '" + name + "' (expected temperature, clients or epochs)");
}

ExperimentConfig apply_axis(const ExperimentConfig& base, SweepAxis axis, double value) {
  auto cfg = base;
  auto as_int = [&](const char* what) {
    if (value != std::floor(value) || value < 1) {
      throw ConfigError(std::string(what) + " sweep needs positive integers, got " + cell_label(value));
    }
    return static_cast<int>(value);
  };
  switch (axis) {
    case SweepAxis::kTemperature:
      cfg.round.weights.tau = value;
      break;
    case SweepAxis::kClients: {
      const int k = as_int("clients");
      const bool full = base.round.clients_per_round == base.partition.num_clients;
      cfg.partition.num_clients = k;
      cfg.round.clients_per_round = full ? k : std::min(base.round.clients_per_round, k);
      break;
    }
    case SweepAxis::kEpochs:
      cfg.round.local_epochs = as_int("epochs");
      break;
  }
  return cfg;
}

std::vector<SweepCell> run_sweep(const ExperimentConfig& base, SweepAxis axis, const std::vector<double>& values,
                                 const fs::path& dir) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  fs::create_directories(dir);
  std::vector<SweepCell> cells;
  for (double v : values) {
    SweepCell cell;
    cell.value = v;
    cell.dir = dir / (to_string(axis) + "_" + cell_label(v));
    try {
      auto cfg = apply_axis(base, axis, v);
      cfg.output_dir = cell.dir;
      auto s = run_experiment(cfg);
      cell.ok = true;
      cell.final_acc = s.final_acc;
      cell.best_acc = s.best_acc;
      cell.best_round = s.best_round;
    } catch (const std::exception& e) {
      cell.error = e.what();
    }
    cells.push_back(std::move(cell));
  }

  std::string csv = "axis,value,status,final_acc,best_acc,best_round,run_dir\n";
  nlohmann::json doc = {{"axis", to_string(axis)}, {"cells", nlohmann::json::array()}};
  for (const auto& c : cells) {
    csv += to_string(axis) + "," + fmt_double(c.value) + "," + (c.ok ? "ok" : "failed") + "," +
           (c.ok ? fmt_double(c.final_acc) : "") + "," + (c.ok ? fmt_double(c.best_acc) : "") + "," +
           (c.ok ? std::to_string(c.best_round) : "") + "," + c.dir.filename().string() + "\n";
    nlohmann::json j = {{"value", c.value}, {"status", c.ok ? "ok" : "failed"}, {"run_dir", c.dir.filename().string()}};
    if (c.ok) {
      j["final_acc"] = c.final_acc;
      j["best_acc"] = c.best_acc;
      j["best_round"] = c.best_round;
    } else {
      j["error"] = c.error;
    }
    doc["cells"].push_back(j);
  }
  io::write_text(dir / "sweep.csv", csv);
  write_json(dir / "sweep.json", doc);
  return cells;
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

std::vector<AblationCell> reproduce_ablation(const ExperimentConfig& base, const std::vector<std::uint64_t>& seeds,
                                             const fs::path& dir) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  fs::create_directories(dir);
  const double lkd = base.round.weights.lambda_kd;
  const double lcon = base.round.weights.lambda_con;
  std::vector<AblationCell> cells = {
      {"baseline", false, false, {}, 0, 0},
      {"text_contrastive", true, false, {}, 0, 0},
      {"visual_kd", false, true, {}, 0, 0},
      {"full", true, true, {}, 0, 0},
  };
  for (auto& cell : cells) {
    for (auto seed : seeds) {
      auto cfg = base;
      cfg.seed = seed;
      cfg.round.algorithm = fl::Algorithm::kSemanticFL;
      cfg.round.weights.lambda_kd = cell.visual_kd ? lkd : 0.0;
      cfg.round.weights.lambda_con = cell.text_contrastive ? lcon : 0.0;
      cfg.output_dir = dir / cell.name / ("seed_" + std::to_string(seed));
      cell.final_acc.push_back(run_experiment(cfg).final_acc);
    }
    std::tie(cell.mean, cell.std) = mean_std(cell.final_acc);
  }

  std::string csv = "cell,text_contrastive,visual_kd";
  for (auto s : seeds) csv += ",seed_" + std::to_string(s);
  csv += ",mean,std\n";
  std::string md = "| text contrastive | visual KD |";
  std::string rule = "|---|---|";
  for (auto s : seeds) {
    md += " seed " + std::to_string(s) + " |";
    rule += "---|";
  }
  md += " mean ± std |\n" + rule + "---|\n";
  for (const auto& c : cells) {
    csv += c.name + "," + (c.text_contrastive ? "1" : "0") + "," + (c.visual_kd ? "1" : "0");
    md += std::string("| ") + (c.text_contrastive ? "✓" : " ") + " | " + (c.visual_kd ? "✓" : " ") + " |";
    for (double a : c.final_acc) {
      csv += "," + fmt_double(a);
      char buf[32];
      std::snprintf(buf, sizeof buf, " %.2f |", 100.0 * a);
      md += buf;
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, " %.2f ± %.2f |\n", 100.0 * c.mean, 100.0 * c.std);
    md += buf;
    csv += "," + fmt_double(c.mean) + "," + fmt_double(c.std) + "\n";
  }
  io::write_text(dir / "ablation.csv", csv);
  io::write_text(dir / "ablation.md", md);
  return cells;
}

}  // namespace semfl::experiments
