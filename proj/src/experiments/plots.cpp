#include "semfl/experiments/plots.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "semfl/common/binary_io.hpp"
#include "semfl/common/error.hpp"
#include "semfl/common/rng.hpp"
#include "semfl/experiments/runner.hpp"

namespace fs = std::filesystem;

namespace semfl::experiments {
namespace {

Matrix squared_distances(const Matrix& x) {
  const Eigen::Index n = x.rows();
  Matrix d(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    d(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (Eigen::Index k = 0; k < x.cols(); ++k) {
        const double t = x(i, k) - x(j, k);
        s += t * t;
      }
      d(i, j) = d(j, i) = s;
    }
  }
  return d;
}

// Row-conditional affinities with entropy log(perplexity), by bisection on
// the precision.
Matrix joint_affinities(const Matrix& d2, double perplexity) {
  const Eigen::Index n = d2.rows();
  const double target = std::log(perplexity);
  Matrix p = Matrix::Zero(n, n);
  std::vector<double> row(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
    double dmin = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) dmin = std::min(dmin, d2(i, j));
    }
    for (int it = 0; it < 200; ++it) {
      double sum = 0.0, wsum = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        const double v = j == i ? 0.0 : std::exp(-beta * (d2(i, j) - dmin));
        row[static_cast<std::size_t>(j)] = v;
        sum += v;
        wsum += v * (d2(i, j) - dmin);
      }
      const double h = std::log(sum) + beta * wsum / sum;
      if (std::abs(h - target) < 1e-10) break;
      if (h > target) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
    }
    double sum = 0.0;
    for (double v : row) sum += v;
    for (Eigen::Index j = 0; j < n; ++j) p(i, j) = row[static_cast<std::size_t>(j)] / sum;
  }
  Matrix joint = (p + p.transpose()) / (2.0 * static_cast<double>(n));
  return joint.cwiseMax(1e-12);
}

const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string colour(int k) {
  if (k >= 0 && k < 10) return kPalette[k];
  char buf[32];
  std::snprintf(buf, sizeof buf, "hsl(%d,65%%,45%%)", (k * 137) % 360);
  return buf;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Frame {
  double x0, x1, y0, y1;
  static constexpr double W = 640, H = 420, L = 70, R = 20, T = 40, B = 55;
  double px(double x) const { return L + (x - x0) / (x1 - x0) * (W - L - R); }
  double py(double y) const { return H - B - (y - y0) / (y1 - y0) * (H - T - B); }
};

void pad(double& lo, double& hi) {
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
    return;
  }
  const double m = 0.05 * (hi - lo);
  lo -= m;
  hi += m;
}

std::string frame_svg(const Frame& f, const std::string& title, const std::string& xl, const std::string& yl) {
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << Frame::W << "\" height=\"" << Frame::H
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << Frame::W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title)
    << "</text>\n";
  s << "<rect x=\"" << Frame::L << "\" y=\"" << Frame::T << "\" width=\"" << Frame::W - Frame::L - Frame::R
    << "\" height=\"" << Frame::H - Frame::T - Frame::B << "\" fill=\"none\" stroke=\"#333\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = f.x0 + (f.x1 - f.x0) * i / 4.0, yv = f.y0 + (f.y1 - f.y0) * i / 4.0;
    s << "<text x=\"" << f.px(xv) << "\" y=\"" << Frame::H - Frame::B + 16 << "\" text-anchor=\"middle\">" << num(xv)
      << "</text>\n";
    s << "<text x=\"" << Frame::L - 6 << "\" y=\"" << f.py(yv) + 4 << "\" text-anchor=\"end\">" << num(yv)
      << "</text>\n";
  }
  if (!xl.empty()) {
    s << "<text x=\"" << (Frame::L + Frame::W - Frame::R) / 2 << "\" y=\"" << Frame::H - 12
      << "\" text-anchor=\"middle\">" << escape(xl) << "</text>\n";
  }
  if (!yl.empty()) {
    s << "<text transform=\"translate(16," << (Frame::T + Frame::H - Frame::B) / 2
      << ") rotate(-90)\" text-anchor=\"middle\">" << escape(yl) << "</text>\n";
  }
  return s.str();
}

}  // namespace

Matrix tsne(const Matrix& x, const TsneOptions& o) {
  const Eigen::Index n = x.rows();
  if (n < 4) throw InvalidInputError("t-SNE needs at least 4 points");
  if (!x.allFinite()) throw InvalidInputError("t-SNE input has non-finite values");
  const double perplexity = std::min(o.perplexity, (static_cast<double>(n) - 1.0) / 3.0);
  Matrix p = joint_affinities(squared_distances(x), perplexity);

  Rng rng(o.seed);
  auto init = normal_vector(rng, static_cast<std::size_t>(2 * n));
  Matrix y(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    y(i, 0) = 1e-4 * init[static_cast<std::size_t>(2 * i)];
    y(i, 1) = 1e-4 * init[static_cast<std::size_t>(2 * i + 1)];
  }
  Matrix update = Matrix::Zero(n, 2), gains = Matrix::Ones(n, 2), grad(n, 2), num(n, n);

  for (int it = 0; it < o.iterations; ++it) {
    const double exag = it < o.exaggeration_iters ? o.early_exaggeration : 1.0;
    const double momentum = it < o.exaggeration_iters ? 0.5 : 0.8;
    double zsum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      num(i, i) = 0.0;
      for (Eigen::Index j = i + 1; j < n; ++j) {
        const double a = y(i, 0) - y(j, 0), b = y(i, 1) - y(j, 1);
        const double v = 1.0 / (1.0 + a * a + b * b);
        num(i, j) = num(j, i) = v;
        zsum += 2.0 * v;
      }
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      double g0 = 0.0, g1 = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j == i) continue;
        const double q = std::max(num(i, j) / zsum, 1e-12);
        const double m = (exag * p(i, j) - q) * num(i, j);
        g0 += m * (y(i, 0) - y(j, 0));
        g1 += m * (y(i, 1) - y(j, 1));
      }
      grad(i, 0) = 4.0 * g0;
      grad(i, 1) = 4.0 * g1;
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      for (int c = 0; c < 2; ++c) {
        const bool same = (grad(i, c) > 0) == (update(i, c) > 0);
        gains(i, c) = std::max(same ? gains(i, c) * 0.8 : gains(i, c) + 0.2, 0.01);
        update(i, c) = momentum * update(i, c) - o.learning_rate * gains(i, c) * grad(i, c);
        y(i, c) += update(i, c);
      }
    }
    double m0 = 0.0, m1 = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      m0 += y(i, 0);
      m1 += y(i, 1);
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      y(i, 0) -= m0 / static_cast<double>(n);
      y(i, 1) -= m1 / static_cast<double>(n);
    }
  }
  return y;
}

double silhouette(const Matrix& x, std::span<const int> labels) {
  const Eigen::Index n = x.rows();
  if (static_cast<std::size_t>(n) != labels.size()) throw InvalidInputError("silhouette: label count mismatch");
  if (n == 0) throw InvalidInputError("silhouette: empty input");
  const int k = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<double> count(static_cast<std::size_t>(k), 0.0);
  for (int l : labels) {
    if (l < 0) throw InvalidInputError("silhouette: negative label");
    count[static_cast<std::size_t>(l)] += 1.0;
  }
  int used = 0;
  for (double c : count) used += c > 0;
  if (used < 2) throw InvalidInputError("silhouette needs at least two clusters");

  double total = 0.0;
  std::vector<double> dist(static_cast<std::size_t>(k));
  for (Eigen::Index i = 0; i < n; ++i) {
    std::fill(dist.begin(), dist.end(), 0.0);
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      dist[static_cast<std::size_t>(labels[static_cast<std::size_t>(j)])] += (x.row(i) - x.row(j)).norm();
    }
    const auto own = static_cast<std::size_t>(labels[static_cast<std::size_t>(i)]);
    if (count[own] < 2) continue;
    const double a = dist[own] / (count[own] - 1.0);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < dist.size(); ++c) {
      if (c != own && count[c] > 0) b = std::min(b, dist[c] / count[c]);
    }
    const double m = std::max(a, b);
    total += m > 0 ? (b - a) / m : 0.0;
  }
  return total / static_cast<double>(n);
}

std::string svg_line_chart(const std::vector<Series>& series, const std::string& title, const std::string& x_label,
                           const std::string& y_label) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw InvalidInputError("series '" + s.name + "' has mismatched x/y");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  pad(x0, x1);
  pad(y0, y1);
  Frame f{x0, x1, y0, y1};
  std::string out = frame_svg(f, title, x_label, y_label);
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const auto col = colour(static_cast<int>(k));
    std::string pts;
    for (std::size_t i = 0; i < s.x.size(); ++i) pts += num(f.px(s.x[i])) + "," + num(f.py(s.y[i])) + " ";
    out += "<polyline fill=\"none\" stroke=\"" + col + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      out += "<circle cx=\"" + num(f.px(s.x[i])) + "\" cy=\"" + num(f.py(s.y[i])) + "\" r=\"3\" fill=\"" + col +
             "\"/>\n";
    }
    out += "<text x=\"" + num(Frame::W - Frame::R - 8) + "\" y=\"" + num(Frame::T + 16 + 16.0 * static_cast<double>(k)) +
           "\" text-anchor=\"end\" fill=\"" + col + "\">" + escape(s.name) + "</text>\n";
  }
  return out + "</svg>\n";
}

std::string svg_scatter(const Matrix& points, std::span<const int> labels, const std::string& title) {
  if (points.cols() != 2 || static_cast<std::size_t>(points.rows()) != labels.size()) {
    throw InvalidInputError("scatter needs N x 2 points and N labels");
  }
  double x0 = points.col(0).minCoeff(), x1 = points.col(0).maxCoeff();
  double y0 = points.col(1).minCoeff(), y1 = points.col(1).maxCoeff();
  pad(x0, x1);
  pad(y0, y1);
  Frame f{x0, x1, y0, y1};
  std::string out = frame_svg(f, title, "", "");
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    out += "<circle cx=\"" + num(f.px(points(i, 0))) + "\" cy=\"" + num(f.py(points(i, 1))) + "\" r=\"2.5\" fill=\"" +
           colour(labels[static_cast<std::size_t>(i)]) + "\" fill-opacity=\"0.8\"/>\n";
  }
  return out + "</svg>\n";
}

std::vector<fs::path> emit_plots(const fs::path& dir, const PlotOptions& options) {
  std::vector<fs::path> written;
  const bool is_run = fs::exists(dir / "metrics.csv");
  const bool is_sweep = fs::exists(dir / "sweep.json");
  if (!is_run && !is_sweep) {
    throw InvalidInputError("nothing to plot in " + dir.string() +
                            ": expected metrics.csv (run directory) or sweep.json (sweep directory)");
  }
  if (is_run) {
    auto history = read_metrics_csv(dir / "metrics.csv");
    Series s{"test accuracy", {}, {}};
    for (const auto& m : history) {
      s.x.push_back(m.round);
      s.y.push_back(m.test_acc);
    }
    io::write_text(dir / "accuracy.svg", svg_line_chart({s}, "Test accuracy", "round", "top-1 accuracy"));
    written.push_back(dir / "accuracy.svg");

    if (options.tsne) {
      std::vector<std::string> missing;
      for (const char* f : {"config.json", "final_model.params", "final_model.json"}) {
        if (!fs::exists(dir / f)) missing.emplace_back(f);
      }
      if (!missing.empty()) {
        std::string msg = "t-SNE needs the final model and config in " + dir.string() + "; missing:";
        for (const auto& m : missing) msg += " " + m;
        throw InvalidInputError(msg);
      }
      auto cfg = config_from_json(nlohmann::json::parse(io::read_text(dir / "config.json")));
      auto ck = models::load_checkpoint(dir / "final_model");
      auto model = models::build_model(ck.spec);
      model.unflatten(ck.params);
      auto test = load_experiment_data(cfg).test;
      if (options.tsne_samples > 0 && static_cast<std::size_t>(options.tsne_samples) < test.size()) {
        test = data::stratified_subset(test, static_cast<std::size_t>(options.tsne_samples),
                                       derive_seed(options.seed, {hash_string("tsne-subset")}));
      }
      Matrix feats(static_cast<Eigen::Index>(test.size()), ck.spec.feature_dim);
      for (std::size_t start = 0; start < test.size(); start += 250) {
        const std::size_t end = std::min(test.size(), start + 250);
        std::vector<std::int64_t> idx;
        for (std::size_t i = start; i < end; ++i) idx.push_back(static_cast<std::int64_t>(i));
        auto out = model.forward(data::to_tensor(test, idx), nn::Mode::kEval);
        feats.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(end - start)) = out.features;
      }
      auto topt = options.tsne_options;
      topt.seed = derive_seed(options.seed, {hash_string("tsne")});
      Matrix emb = tsne(feats, topt);
      io::write_text(dir / "tsne.svg", svg_scatter(emb, test.labels, "t-SNE of final-model features"));
      nlohmann::json params = {{"perplexity", topt.perplexity},
                               {"iterations", topt.iterations},
                               {"learning_rate", topt.learning_rate},
                               {"early_exaggeration", topt.early_exaggeration},
                               {"exaggeration_iters", topt.exaggeration_iters},
                               {"plot_seed", options.seed},
                               {"num_points", test.size()},
                               {"silhouette_features", silhouette(feats, test.labels)},
                               {"silhouette_embedding", silhouette(emb, test.labels)}};
      io::write_text(dir / "tsne.json", params.dump(2) + "\n");
      written.push_back(dir / "tsne.svg");
      written.push_back(dir / "tsne.json");
    }
  }
  if (is_sweep) {
    auto doc = nlohmann::json::parse(io::read_text(dir / "sweep.json"));
    const std::string axis = doc.at("axis").get<std::string>();
    Series s{"final accuracy", {}, {}};
    for (const auto& c : doc.at("cells")) {
      if (c.at("status") != "ok") continue;
      s.x.push_back(c.at("value").get<double>());
      s.y.push_back(c.at("final_acc").get<double>());
    }
    io::write_text(dir / "sweep.svg", svg_line_chart({s}, "Sweep over " + axis, axis, "final top-1 accuracy"));
    written.push_back(dir / "sweep.svg");
  }
  return written;
}

}  // namespace semfl::experiments
