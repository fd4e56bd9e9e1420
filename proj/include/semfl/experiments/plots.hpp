#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "semfl/common/types.hpp"

namespace semfl::experiments {

struct TsneOptions {
  double perplexity = 30.0;
  int iterations = 1000;
  double learning_rate = 200.0;
  double early_exaggeration = 12.0;
  int exaggeration_iters = 250;
  std::uint64_t seed = 0;
};

/// Exact t-SNE to 2-D. Perplexity is capped at (N - 1) / 3.
Matrix tsne(const Matrix& x, const TsneOptions& options = {});

/// Mean silhouette coefficient under Euclidean distance. Points in a
/// singleton cluster score 0.
double silhouette(const Matrix& x, std::span<const int> labels);

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

/// Line chart with markers; one polyline per series.
std::string svg_line_chart(const std::vector<Series>& series, const std::string& title, const std::string& x_label,
                           const std::string& y_label);
/// Scatter of 2-D points coloured by label.
std::string svg_scatter(const Matrix& points, std::span<const int> labels, const std::string& title);

struct PlotOptions {
  std::uint64_t seed = 0;
  int tsne_samples = 500;
  bool tsne = true;
  TsneOptions tsne_options;
};

/// Run directory: accuracy.svg, plus tsne.svg and tsne.json when the final
/// model is present. Sweep directory: sweep.svg. Returns the files written;
/// InvalidInputError naming the expected files when nothing can be drawn.
std::vector<std::filesystem::path> emit_plots(const std::filesystem::path& dir, const PlotOptions& options = {});

}  // namespace semfl::experiments
