// semfl: command-line front end for partitioning, feature extraction,
// training, sweeps, ablations, plots and evaluation.
#include <malloc.h>

#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "semfl/common/binary_io.hpp"
#include "semfl/common/error.hpp"
#include "semfl/experiments/config.hpp"
#include "semfl/experiments/plots.hpp"
#include "semfl/experiments/runner.hpp"

namespace fs = std::filesystem;
using namespace semfl;
using namespace semfl::experiments;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct ConfigArgs {
  std::string config;
  std::string preset;
  std::string output;
  std::int64_t seed = -1;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", config, "Experiment config (JSON)");
    app->add_option("-p,--preset", preset, "Built-in preset: smoke or desk");
    app->add_option("-o,--output", output, "Override output_dir");
    app->add_option("-s,--seed", seed, "Override the master seed");
  }

  ExperimentConfig load() const {
    if (config.empty() == preset.empty()) throw ConfigError("give exactly one of --config or --preset");
    auto cfg = config.empty() ? experiments::preset(preset) : load_config(config);
    if (!output.empty()) cfg.output_dir = output;
    if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
    validate(cfg);
    return cfg;
  }
};

void print_summary(const RunSummary& s) {
  std::printf("run %s: final_acc %.4f best_acc %.4f (round %d)\n", s.dir.string().c_str(), s.final_acc, s.best_acc,
              s.best_round);
}

}  // namespace

int main(int argc, char** argv) {
  // Keep freed training buffers in the heap instead of returning them to the
  // kernel every batch.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 2000000000);

  CLI::App app{"Federated learning with semantic anchors"};
  app.require_subcommand(1);

  ConfigArgs extract_args, part_args, train_args, sweep_args, abl_args;

  auto* extract = app.add_subcommand("extract-features", "Build and save the feature store");
  extract_args.attach(extract);
  std::string store_out;
  extract->add_option("--out", store_out, "Store directory (default: store_dir from the config)");

  auto* part = app.add_subcommand("partition", "Partition the training set and print statistics");
  part_args.attach(part);
  std::string part_out;
  part->add_option("--out", part_out, "Partition JSON path (default: <output_dir>/partition.json)");

  auto* train = app.add_subcommand("train", "Run one experiment");
  train_args.attach(train);

  auto* sweep = app.add_subcommand("sweep", "Run one experiment per axis value");
  sweep_args.attach(sweep);
  std::string axis;
  std::vector<double> values;
  sweep->add_option("--axis", axis, "temperature, clients or epochs")->required();
  sweep->add_option("--values", values, "Comma-separated values")->required()->delimiter(',');

  auto* ablation = app.add_subcommand("ablation", "Run the 2x2 loss-term ablation");
  abl_args.attach(ablation);
  std::vector<std::uint64_t> seeds{0, 1, 2};
  ablation->add_option("--seeds", seeds, "Comma-separated master seeds")->delimiter(',');

  auto* plot = app.add_subcommand("plot", "Render charts for a run or sweep directory");
  std::string plot_dir;
  PlotOptions plot_opts;
  bool no_tsne = false;
  plot->add_option("dir", plot_dir, "Run or sweep directory")->required();
  plot->add_option("--seed", plot_opts.seed, "Plot seed (t-SNE subset and init)");
  plot->add_option("--tsne-samples", plot_opts.tsne_samples, "Test samples in the t-SNE plot");
  plot->add_flag("--no-tsne", no_tsne, "Skip the t-SNE plot");

  auto* evaluate = app.add_subcommand("evaluate", "Test accuracy of a finished run's final model");
  std::string eval_dir;
  evaluate->add_option("dir", eval_dir, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*extract) {
      auto cfg = extract_args.load();
      fs::path dir = store_out.empty() ? cfg.store_dir : fs::path(store_out);
      if (dir.empty()) throw ConfigError("no store directory: pass --out or set store_dir");
      auto data = load_experiment_data(cfg);
      auto store = extract_features(cfg, data.train, dir);
      std::printf("wrote %zu x %d visual anchors and %lld text anchors to %s\n", store.visual.size(), store.dim(),
                  static_cast<long long>(store.text.class_features.rows()), dir.string().c_str());
    } else if (*part) {
      auto cfg = part_args.load();
      auto data = load_experiment_data(cfg);
      auto map = partition::make_partition(data.train.labels, cfg.seeded_partition());
      fs::path out = part_out.empty() ? cfg.output_dir / "partition.json" : fs::path(part_out);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      io::write_text(out, partition::to_json(map).dump() + "\n");
      auto stats = partition::partition_stats(map);
      std::printf("client  size  classes  entropy\n");
      for (int k = 0; k < map.num_clients(); ++k) {
        const auto i = static_cast<std::size_t>(k);
        std::printf("%6d %5lld %8d %8.3f\n", k, static_cast<long long>(stats.client_sizes[i]), stats.label_support[i],
                    stats.label_entropy[i]);
      }
      std::printf("wrote %s\n", out.string().c_str());
    } else if (*train) {
      print_summary(run_experiment(train_args.load()));
    } else if (*sweep) {
      auto cfg = sweep_args.load();
      auto ax = sweep_axis_from_string(axis);
      auto cells = run_sweep(cfg, ax, values, cfg.output_dir);
      int failed = 0;
      for (const auto& c : cells) {
        if (c.ok) {
          std::printf("%s=%g: final_acc %.4f\n", to_string(ax).c_str(), c.value, c.final_acc);
        } else {
          ++failed;
          std::printf("%s=%g: FAILED %s\n", to_string(ax).c_str(), c.value, c.error.c_str());
        }
      }
      if (failed) return kExitRuntime;
    } else if (*ablation) {
      auto cfg = abl_args.load();
      reproduce_ablation(cfg, seeds, cfg.output_dir);
      std::cout << io::read_text(cfg.output_dir / "ablation.md");
    } else if (*plot) {
      plot_opts.tsne = !no_tsne;
      for (const auto& f : emit_plots(plot_dir, plot_opts)) std::printf("wrote %s\n", f.string().c_str());
    } else if (*evaluate) {
      fs::path dir = eval_dir;
      auto cfg = load_config(dir / "config.json");
      auto ck = models::load_checkpoint(dir / "final_model");
      auto model = models::build_model(ck.spec);
      auto test = load_experiment_data(cfg).test;
      std::printf("test accuracy %.4f on %zu samples\n", fl::evaluate(model, ck.params, test), test.size());
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return 0;
}
