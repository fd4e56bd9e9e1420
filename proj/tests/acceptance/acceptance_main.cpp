// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any required criterion fails.
//
//   acceptance [--quick]     --quick skips the desk-scale trend run (7)
#include <malloc.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <random>

#include "semfl/common/binary_io.hpp"
#include "semfl/common/error.hpp"
#include "semfl/experiments/runner.hpp"
#include "semfl/features/schedule.hpp"
#include "semfl/features/store.hpp"
#include "semfl/fl/federation.hpp"
#include "semfl/losses/losses.hpp"
#include "semfl/partition/partition.hpp"

namespace fs = std::filesystem;
using namespace semfl;

namespace {

struct Outcome {
  enum Status { kPass, kFail, kSkip } status = kFail;
  std::string detail;
};

Outcome pass(std::string d) { return {Outcome::kPass, std::move(d)}; }
Outcome fail(std::string d) { return {Outcome::kFail, std::move(d)}; }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path workdir() {
  static const fs::path dir = fs::temp_directory_path() / ("semfl_acceptance_" + std::to_string(::getpid()));
  return dir;
}

// ---- 1. loss oracles ----

double softmax_at(const std::vector<double>& v, std::size_t j) {
  double s = 0.0;
  for (double x : v) s += std::exp(x);
  return std::exp(v[j]) / s;
}

Outcome loss_oracles() {
  std::vector<std::string> bad;
  auto check = [&](const char* name, double got, double want) {
    if (!(std::abs(got - want) <= 1e-9)) bad.push_back(fmt("%s got %.12g want %.12g", name, got, want));
  };
  Matrix logits = Matrix::Constant(4, 10, 0.37);
  std::vector<int> labels{0, 3, 7, 9};
  check("ce uniform", losses::cross_entropy(logits, labels), std::log(10.0));

  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  Matrix z(5, 12);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = g(rng);
  check("kd(z,z)", losses::kd_loss(z, z), 0.0);

  // Features orthogonal to every text anchor: all similarities equal.
  Matrix f(3, 5), text(4, 5);
  f.setZero();
  text.setZero();
  for (int i = 0; i < 3; ++i) f(i, 0) = 1.0 + i;
  for (int c = 0; c < 4; ++c) text(c, c + 1) = 1.0;
  std::vector<int> fl{0, 2, 3};
  check("con uniform", losses::contrastive_loss(f, text, fl, 0.05), std::log(4.0));

  // 3-dim KD by direct summation.
  std::vector<double> zt{0.2, -1.0, 0.7}, fs_{1.1, 0.3, -0.4};
  double kl = 0.0;
  for (std::size_t j = 0; j < 3; ++j) {
    const double p = softmax_at(zt, j), q = softmax_at(fs_, j);
    kl += p * std::log(p / q);
  }
  Matrix zm(1, 3), fm(1, 3);
  zm << 0.2, -1.0, 0.7;
  fm << 1.1, 0.3, -0.4;
  check("kd 3-dim", losses::kd_loss(zm, fm), kl);

  // B=2, C=3 InfoNCE by direct summation over cosines.
  std::vector<std::vector<double>> fv{{0.3, -0.2, 0.9}, {-0.5, 0.4, 0.1}};
  std::vector<std::vector<double>> tv{{1.0, 0.2, 0.0}, {0.0, 1.0, -0.3}, {0.4, 0.0, 1.0}};
  std::vector<int> yl{2, 0};
  const double tau = 0.05;
  auto cosv = [](const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) d += a[i] * b[i], na += a[i] * a[i], nb += b[i] * b[i];
    return d / std::sqrt(na * nb);
  };
  double want = 0.0;
  for (std::size_t i = 0; i < 2; ++i) {
    double denom = 0.0;
    for (std::size_t c = 0; c < 3; ++c) denom += std::exp(cosv(fv[i], tv[c]) / tau);
    want += -std::log(std::exp(cosv(fv[i], tv[static_cast<std::size_t>(yl[i])]) / tau) / denom);
  }
  want /= 2.0;
  Matrix fM(2, 3), tM(3, 3);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j) fM(i, j) = fv[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) tM(i, j) = tv[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  check("infonce B2C3", losses::contrastive_loss(fM, tM, yl, tau), want);

  if (!bad.empty()) return fail(bad.front());
  return pass("5 oracle cases within 1e-9");
}

// ---- 2. gradient check ----

Outcome gradient_check() {
  models::BackboneSpec spec;
  spec.architecture = models::Architecture::kTinyCnn;
  spec.num_classes = 10;
  spec.feature_dim = 16;
  spec.seed = 3;
  spec.input_height = spec.input_width = 8;
  auto model = models::build_model(spec);
  const int B = 8;
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g;
  nn::Tensor x({B, 3, 8, 8});
  for (auto& v : x.data) v = g(rng);
  std::vector<int> labels{0, 1, 2, 3, 4, 5, 6, 7};
  Matrix z(B, spec.feature_dim), text(spec.num_classes, spec.feature_dim);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = g(rng);
  for (Eigen::Index i = 0; i < text.size(); ++i) text.data()[i] = g(rng);
  text.array().colwise() /= text.rowwise().norm().array();
  const losses::LossWeights w;  // defaults: lambda_kd 1, lambda_con 0.01, tau 0.05

  const auto base = model.flatten();
  model.zero_grad();
  auto out = model.forward(x, nn::Mode::kTrain);
  losses::LossGradients grads;
  losses::total_loss(out, {&z, &text}, labels, w, &grads);
  model.backward(grads.logits, grads.features);
  const auto analytic = model.flatten_grad();

  auto objective = [&](const std::vector<double>& p) {
    model.unflatten(p);
    return losses::total_loss(model.forward(x, nn::Mode::kTrain), {&z, &text}, labels, w).total;
  };
  double worst = 0.0;
  std::string worst_name;
  std::size_t offset = 0, blocks = 0;
  auto probe = base;
  for (auto* p : model.parameters()) {
    const std::size_t n = p->value.size();
    if (p->trainable) {
      ++blocks;
      double d2 = 0, a2 = 0, f2 = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const double h = 1e-6;
        probe[offset + j] = base[offset + j] + h;
        const double up = objective(probe);
        probe[offset + j] = base[offset + j] - h;
        const double down = objective(probe);
        probe[offset + j] = base[offset + j];
        const double fd = (up - down) / (2 * h), an = analytic[offset + j];
        d2 += (fd - an) * (fd - an);
        a2 += an * an;
        f2 += fd * fd;
      }
      const double rel = std::sqrt(d2) / std::max({std::sqrt(a2), std::sqrt(f2), 1e-12});
      if (rel > worst) worst = rel, worst_name = p->name;
    }
    offset += n;
  }
  auto d = fmt("%zu blocks, worst relative error %.3g (%s)", blocks, worst, worst_name.c_str());
  return worst < 1e-4 ? pass(d) : fail(d);
}

// ---- 3. aggregation ----

Outcome aggregation() {
  // Hand-computed: n = (1, 3), values 0 and 4 -> 3; (2, 2) -> 1.5 for 1 and 2.
  std::vector<fl::ClientUpdate> u(2);
  u[0].params = {0.0, 1.0, -2.0};
  u[0].num_samples = 1;
  u[1].params = {4.0, 1.0, 2.0};
  u[1].num_samples = 3;
  auto agg = fl::fedavg_aggregate(u);
  if (agg != std::vector<double>{3.0, 1.0, 1.0}) return fail("hand case (1,3) mismatch");
  u[0].num_samples = u[1].num_samples = 2;
  u[0].params = {1.0};
  u[1].params = {2.0};
  if (fl::fedavg_aggregate(u) != std::vector<double>{1.5}) return fail("hand case (2,2) mismatch");

  std::mt19937_64 rng(9);
  std::normal_distribution<double> g;
  std::uniform_int_distribution<int> nk(1, 5000), kk(1, 12), pp(1, 50);
  double worst_sum = 0.0;
  for (int inst = 0; inst < 100; ++inst) {
    const int K = kk(rng), P = pp(rng);
    std::vector<fl::ClientUpdate> ups(static_cast<std::size_t>(K));
    std::vector<std::int64_t> counts;
    for (auto& c : ups) {
      c.num_samples = nk(rng);
      counts.push_back(c.num_samples);
      for (int j = 0; j < P; ++j) c.params.push_back(g(rng) * 10.0);
    }
    auto w = fl::aggregation_weights(counts);
    double s = 0.0;
    for (double v : w) s += v;
    worst_sum = std::max(worst_sum, std::abs(s - 1.0));
    if (std::abs(s - 1.0) > 1e-12) return fail(fmt("weights sum to 1%+.3g", s - 1.0));
    auto a = fl::fedavg_aggregate(ups);
    for (int j = 0; j < P; ++j) {
      double lo = 1e300, hi = -1e300;
      for (const auto& c : ups) {
        lo = std::min(lo, c.params[static_cast<std::size_t>(j)]);
        hi = std::max(hi, c.params[static_cast<std::size_t>(j)]);
      }
      const double v = a[static_cast<std::size_t>(j)];
      if (v < lo || v > hi) return fail(fmt("instance %d coordinate %d outside the client range", inst, j));
    }
  }
  return pass(fmt("hand cases exact; 100 instances convex, max |sum w - 1| = %.2g", worst_sum));
}

// ---- 4. partitions ----

std::vector<int> balanced(int classes, int per) {
  std::vector<int> y;
  for (int i = 0; i < per; ++i)
    for (int c = 0; c < classes; ++c) y.push_back(c);
  return y;
}

Outcome partitions() {
  const auto labels = balanced(10, 1000);
  std::string detail;
  for (double rho : {10.0, 50.0, 100.0}) {
    partition::PartitionSpec s;
    s.scenario = partition::Scenario::kLongtail;
    s.num_clients = 5;
    s.imbalance_ratio = rho;
    s.seed = 1;
    auto map = partition::make_partition(labels, s);
    std::vector<std::int64_t> per(10, 0);
    for (const auto& h : map.label_histogram)
      for (std::size_t c = 0; c < 10; ++c) per[c] += h[c];
    const auto [mn, mx] = std::minmax_element(per.begin(), per.end());
    // n_max / n_min with n_min allowed one sample either way.
    const double lo = static_cast<double>(*mx) / static_cast<double>(*mn + 1);
    const double hi = static_cast<double>(*mx) / static_cast<double>(*mn - 1);
    if (!(lo <= rho && rho <= hi)) {
      return fail(fmt("long-tail rho=%g: counts %lld/%lld", rho, static_cast<long long>(*mx),
                      static_cast<long long>(*mn)));
    }
  }
  double worst_tv = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    partition::PartitionSpec s;
    s.scenario = partition::Scenario::kDirichlet;
    s.num_clients = 10;
    s.alpha = 1e6;
    s.seed = seed;
    auto map = partition::make_partition(labels, s);
    std::vector<std::int64_t> global(10, 1000);
    for (const auto& h : map.label_histogram) worst_tv = std::max(worst_tv, partition::total_variation(h, global));
  }
  if (worst_tv >= 0.02) return fail(fmt("dirichlet alpha=1e6 TV %.4f", worst_tv));
  for (int s_cls : {1, 2, 3, 5}) {
    partition::PartitionSpec s;
    s.scenario = partition::Scenario::kExtreme;
    s.num_clients = 10;
    s.classes_per_client = s_cls;
    s.seed = 4;
    auto stats = partition::partition_stats(partition::make_partition(labels, s));
    for (int sup : stats.label_support) {
      if (sup != s_cls) return fail(fmt("NID2 s=%d: a client holds %d classes", s_cls, sup));
    }
  }
  return pass(fmt("long-tail ratios exact to rounding; max Dirichlet TV %.4f over 20 seeds; NID2 support exact",
                  worst_tv));
}

// ---- 5. noising ----

Outcome noising() {
  const auto sched = features::NoiseSchedule::scaled_linear();
  const int t = 150, N = 10000;
  const double ab = sched.alpha_bar[t];
  std::string detail;
  for (double l : {-1.3, 0.0, 0.8}) {
    nn::Tensor lat({N}, l);
    auto out = features::add_noise(lat, t, sched, nullptr, 77 + static_cast<std::uint64_t>(std::abs(l) * 10));
    double mean = 0.0;
    for (double v : out.data) mean += v;
    mean /= N;
    double var = 0.0;
    for (double v : out.data) var += (v - mean) * (v - mean);
    var /= N - 1;
    const double want_mean = std::sqrt(ab) * l, want_var = 1.0 - ab;
    const double se_mean = std::sqrt(want_var / N), se_var = want_var * std::sqrt(2.0 / (N - 1));
    const double zm = (mean - want_mean) / se_mean, zv = (var - want_var) / se_var;
    if (std::abs(zm) > 4 || std::abs(zv) > 4) {
      return fail(fmt("l=%g: mean z=%.2f variance z=%.2f", l, zm, zv));
    }
    detail += fmt("l=%g z=(%.2f, %.2f) ", l, zm, zv);
  }
  return pass(detail + "within 4 SE");
}

// ---- 6. ablation identity ----

std::string slurp(const fs::path& p) { return io::read_text(p); }

experiments::ExperimentConfig smoke(const std::string& name) {
  auto cfg = experiments::preset("smoke");
  cfg.record_wall_time = false;
  cfg.output_dir = workdir() / name;
  return cfg;
}

Outcome ablation_identity() {
  auto sem = smoke("c6_semanticfl");
  sem.round.algorithm = fl::Algorithm::kSemanticFL;
  sem.round.weights.lambda_kd = 0.0;
  sem.round.weights.lambda_con = 0.0;
  auto avg = smoke("c6_fedavg");
  avg.round.algorithm = fl::Algorithm::kFedAvg;
  auto prox = smoke("c6_fedprox");
  prox.round.algorithm = fl::Algorithm::kFedProx;
  prox.round.weights.mu_prox = 0.0;
  auto a = experiments::run_experiment(sem);
  experiments::run_experiment(avg);
  experiments::run_experiment(prox);
  const auto ref = slurp(avg.output_dir / "metrics.csv");
  if (slurp(sem.output_dir / "metrics.csv") != ref) return fail("semanticfl(0,0) metrics differ from fedavg");
  if (slurp(prox.output_dir / "metrics.csv") != ref) return fail("fedprox(mu=0) metrics differ from fedavg");
  return pass(fmt("%zu rounds bit-identical (fedprox mu=0 too)", a.history.size()));
}

// ---- 7. desk trend ----

Outcome desk_trend() {
  // CIFAR-10 cannot be fetched here, so the 5,000-sample subset is replaced
  // by a procedural 10-class image set of the same size and shape. Every
  // other setting is the desk preset.
  std::vector<double> diffs;
  std::string detail;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::uint64_t seed : {0, 1, 2}) {
    double acc[2];
    for (int k = 0; k < 2; ++k) {
      auto cfg = experiments::preset("desk");
      cfg.data.kind = data::DatasetKind::kSynthetic;
      cfg.data.synthetic_train = 5000;
      cfg.data.synthetic_test = 2000;
      cfg.record_wall_time = false;
      cfg.seed = seed;
      cfg.round.algorithm = k == 0 ? fl::Algorithm::kSemanticFL : fl::Algorithm::kFedAvg;
      cfg.output_dir = workdir() / ("c7_" + fl::to_string(cfg.round.algorithm) + "_" + std::to_string(seed));
      acc[k] = experiments::run_experiment(cfg).final_acc;
    }
    diffs.push_back(100.0 * (acc[0] - acc[1]));
    detail += fmt("seed %llu: %.2f vs %.2f; ", static_cast<unsigned long long>(seed), 100 * acc[0], 100 * acc[1]);
    std::fprintf(stderr, "  [7] seed %llu semanticfl %.4f fedavg %.4f\n", static_cast<unsigned long long>(seed),
                 acc[0], acc[1]);
  }
  const double gain = experiments::mean_std(diffs).first;
  const double mins =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
  detail += fmt("mean gain %+.2f points (need >= 1.00), %.1f min, synthetic-image substitute for CIFAR-10", gain,
                mins);
  return gain >= 1.0 ? pass(detail) : fail(detail);
}

// ---- 8. determinism and persistence ----

Outcome determinism() {
  auto a = smoke("c8_a");
  auto b = smoke("c8_b");
  experiments::run_experiment(a);
  experiments::run_experiment(b);
  if (slurp(a.output_dir / "metrics.csv") != slurp(b.output_dir / "metrics.csv")) {
    return fail("metrics CSV differs between identical runs");
  }

  // Store round trip.
  auto data = experiments::load_experiment_data(a);
  auto store = experiments::extract_features(a, data.train, workdir() / "c8_store");
  auto back = features::load_store(workdir() / "c8_store", a.seeded_extraction().hash());
  auto same_bits = [](const MatrixF& x, const MatrixF& y) {
    return x.rows() == y.rows() && x.cols() == y.cols() &&
           std::memcmp(x.data(), y.data(), sizeof(float) * static_cast<std::size_t>(x.size())) == 0;
  };
  if (!same_bits(store.visual.features, back.visual.features) ||
      !same_bits(store.text.class_features, back.text.class_features) ||
      store.visual.sample_ids != back.visual.sample_ids) {
    return fail("feature store round trip is not bit-exact");
  }

  // Interrupted + resumed run vs uninterrupted.
  auto cfg = a;
  cfg.rounds = 4;
  auto part = partition::make_partition(data.train.labels, cfg.seeded_partition());
  fl::Federation fed{&data.train, &data.test, &part, &store};
  auto run = [&](const fs::path& ckpt, int stop) {
    auto model = models::build_model(cfg.backbone());
    fl::GlobalState s;
    s.params = model.flatten();
    fl::RunOptions o;
    o.checkpoint_dir = ckpt;
    o.config_hash = experiments::config_hash(cfg);
    o.record_wall_time = false;
    o.stop_after_round = stop;
    return fl::run_rounds(std::move(s), model, fed, cfg.seeded_round(), cfg.rounds, o);
  };
  auto full = run(workdir() / "c8_full", -1);
  run(workdir() / "c8_resume", 2);
  auto resumed = run(workdir() / "c8_resume", -1);
  if (resumed.params != full.params) return fail("resumed parameters differ");
  if (resumed.history.size() != full.history.size()) return fail("resumed history length differs");
  for (std::size_t i = 0; i < full.history.size(); ++i) {
    if (experiments::metrics_csv_row(full.history[i]) != experiments::metrics_csv_row(resumed.history[i])) {
      return fail(fmt("resumed round %zu metrics differ", i + 1));
    }
  }
  return pass("CSV byte-identical, store bit-exact, resume after round 2 of 4 exact");
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 2000000000);
  bool quick = false;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--quick") == 0) quick = true;
  }
  fs::create_directories(workdir());

  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  std::vector<Criterion> criteria = {
      {1, "loss oracles", loss_oracles},
      {2, "gradient check (tinycnn, 8 samples)", gradient_check},
      {3, "aggregation algebra", aggregation},
      {4, "partition statistics", partitions},
      {5, "noising statistics (t=150, 10k draws)", noising},
      {6, "ablation identity (smoke)", ablation_identity},
      {7, "desk-scale trend (3 paired seeds)",
       [&] { return quick ? Outcome{Outcome::kSkip, "skipped (--quick)"} : desk_trend(); }},
      {8, "determinism and persistence", determinism},
      {9, "full-scale anchor (extended)",
       [] {
         return Outcome{Outcome::kSkip,
                        "not run: needs a GPU, CIFAR-10 and pretrained latent-diffusion weights. Recipe: "
                        "`semfl extract-features` with provider diffusion and provider_weights, then `semfl train` "
                        "with dirichlet alpha 0.2, K=10, resnet10, m=5, R=100, E=10 (target 88.94 +/- 1.5, fedavg "
                        "84.65 +/- 1.5)"};
       }},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = fail(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const char* tag = o.status == Outcome::kPass ? "PASS" : o.status == Outcome::kFail ? "FAIL" : "SKIP";
    if (o.status == Outcome::kFail) ++failures;
    std::printf("criterion %d %s: %s (%.1fs) %s\n", c.id, tag, c.name, secs, o.detail.c_str());
    std::fflush(stdout);
  }
  std::error_code ec;
  fs::remove_all(workdir(), ec);
  return failures == 0 ? 0 : 1;
}
