#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "semfl/common/error.hpp"
#include "semfl/common/rng.hpp"
#include "semfl/data/dataset.hpp"
#include "semfl/features/store.hpp"
#include "semfl/partition/partition.hpp"

namespace fs = std::filesystem;

namespace semfl::features {
namespace {

nn::Tensor filled(std::vector<int> shape, double start, double step) {
  nn::Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = start + step * static_cast<double>(i);
  return t;
}

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("semfl_features_test_" + name);
  fs::remove_all(dir);
  return dir;
}

TEST(Schedule, ScaledLinearShape) {
  auto s = NoiseSchedule::scaled_linear();
  EXPECT_EQ(s.num_timesteps, 1000);
  EXPECT_NEAR(s.beta.front(), 0.00085, 1e-15);
  EXPECT_NEAR(s.beta.back(), 0.012, 1e-15);
  EXPECT_NO_THROW(s.validate());
  for (int t = 1; t < s.num_timesteps; ++t) ASSERT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
  double prod = 1.0;
  for (int t = 0; t <= 150; ++t) prod *= 1.0 - s.beta[t];
  EXPECT_NEAR(s.alpha_bar[150], prod, 1e-14);
}

TEST(AddNoise, ZeroNoiseScalesLatent) {
  auto s = NoiseSchedule::scaled_linear();
  auto l = filled({1, 4, 2, 2}, -1.0, 0.2);
  nn::Tensor zero(l.shape);
  auto out = add_noise(l, 150, s, &zero, 0);
  for (std::size_t i = 0; i < l.size(); ++i) EXPECT_EQ(out.data[i], std::sqrt(s.alpha_bar[150]) * l.data[i]);
}

TEST(AddNoise, ForcedNoiseInterpolation) {
  auto s = NoiseSchedule::scaled_linear();
  auto l = filled({1, 4, 2, 2}, 0.5, 0.1);
  auto eps = filled({1, 4, 2, 2}, -0.7, 0.09);
  auto out = add_noise(l, 400, s, &eps, 0);
  double num = 0, den = 0;
  for (std::size_t i = 0; i < l.size(); ++i) {
    double r = out.data[i] - std::sqrt(s.alpha_bar[400]) * l.data[i];
    num += r * r;
    den += eps.data[i] * eps.data[i];
  }
  EXPECT_NEAR(std::sqrt(num / den), std::sqrt(1.0 - s.alpha_bar[400]), 1e-12);
}

TEST(AddNoise, MonteCarloMoments) {
  auto s = NoiseSchedule::scaled_linear();
  const int t = 150, draws = 10000;
  auto l = filled({1, 4, 2, 2}, -0.8, 0.1);
  const std::size_t n = l.size();
  std::vector<double> sum(n, 0.0), sum2(n, 0.0);
  for (int k = 0; k < draws; ++k) {
    auto out = add_noise(l, t, s, nullptr, static_cast<std::uint64_t>(k));
    for (std::size_t i = 0; i < n; ++i) {
      sum[i] += out.data[i];
      sum2[i] += out.data[i] * out.data[i];
    }
  }
  const double var = 1.0 - s.alpha_bar[t];
  const double se_mean = std::sqrt(var / draws);
  const double se_var = var * std::sqrt(2.0 / (draws - 1));
  for (std::size_t i = 0; i < n; ++i) {
    double mean = sum[i] / draws;
    double sample_var = (sum2[i] - draws * mean * mean) / (draws - 1);
    EXPECT_LT(std::abs(mean - std::sqrt(s.alpha_bar[t]) * l.data[i]), 4 * se_mean) << i;
    EXPECT_LT(std::abs(sample_var - var), 4 * se_var) << i;
  }
}

TEST(AddNoise, ErrorsAndDeterminism) {
  auto s = NoiseSchedule::scaled_linear();
  auto l = filled({1, 4, 2, 2}, 0.0, 0.1);
  EXPECT_THROW(add_noise(l, 0, s, nullptr, 0), InvalidInputError);
  EXPECT_THROW(add_noise(l, 1000, s, nullptr, 0), InvalidInputError);
  nn::Tensor bad({1, 4, 2, 3});
  EXPECT_THROW(add_noise(l, 10, s, &bad, 0), InvalidInputError);
  EXPECT_EQ(add_noise(l, 10, s, nullptr, 5).data, add_noise(l, 10, s, nullptr, 5).data);
}

TEST(Projection, LineDirection) {
  Matrix raw(50, 2);
  for (int i = 0; i < 50; ++i) raw.row(i) << i - 20.0, 2.0 * (i - 20.0);
  // A second, tiny direction keeps the fit full rank.
  for (int i = 0; i < 50; ++i) raw(i, 0) += (i % 2 ? 1e-3 : -1e-3);
  auto p = fit_projection(raw, 1);
  EXPECT_NEAR(p.components(0, 0), 1.0 / std::sqrt(5.0), 1e-6);
  EXPECT_NEAR(p.components(0, 1), 2.0 / std::sqrt(5.0), 1e-6);
}

TEST(Projection, WhiteDataGivesRotation) {
  Rng rng(4);
  std::normal_distribution<double> g;
  Matrix raw(400, 6);
  for (Eigen::Index i = 0; i < raw.size(); ++i) raw.data()[i] = g(rng);
  auto p = fit_projection(raw, 6);
  Matrix eye = p.components * p.components.transpose();
  EXPECT_LT((eye - Matrix::Identity(6, 6)).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_NEAR(std::abs(p.components.determinant()), 1.0, 1e-6);
}

TEST(Projection, ReducedRank) {
  Matrix raw(10, 5);
  for (int i = 0; i < 10; ++i) raw.row(i) << i, 2 * i, 3 * i, -i, 0.5 * i;
  try {
    fit_projection(raw, 2);
    FAIL() << "expected ReducedRankError";
  } catch (const ReducedRankError& e) {
    EXPECT_EQ(e.achievable_dim(), 1);
  }
  EXPECT_THROW(fit_projection(raw, 10), ReducedRankError);  // N <= d
}

class SyntheticStoreTest : public ::testing::Test {
 protected:
  void SetUp() override {
    data::SyntheticImageSpec spec;
    spec.num_samples = 200;
    spec.seed = 2;
    ds = data::make_synthetic_images(spec, 7);
    cfg.feature_dim = 32;
    cfg.seed = 11;
    provider = make_provider(ProviderKind::kSynthetic, 10, 3);
  }
  data::Dataset ds;
  FeatureExtractionConfig cfg;
  std::unique_ptr<FeatureProvider> provider;
};

TEST_F(SyntheticStoreTest, OrthonormalRowsAndIsometry) {
  auto store = build_feature_store(ds, cfg, *provider, {"synthetic", 2});
  const Matrix& P = store.projection.components;
  EXPECT_LT((P * P.transpose() - Matrix::Identity(32, 32)).cwiseAbs().maxCoeff(), 1e-6);
  Rng rng(1);
  std::normal_distribution<double> g;
  Vector c(32);
  for (auto& v : c) v = g(rng);
  Vector v = P.transpose() * c;  // in the row span
  EXPECT_NEAR((P * v).norm(), v.norm(), 1e-6 * v.norm());
  const Matrix& T = store.text_projection.components;
  EXPECT_LT((T * T.transpose() - Matrix::Identity(32, 32)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST_F(SyntheticStoreTest, RetainedVarianceMatchesEigenOracle) {
  std::vector<std::int64_t> ids(ds.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::int64_t>(i);
  Matrix raw = raw_visual_features(ds, ids, cfg, *provider);
  auto proj = fit_projection(raw, cfg.feature_dim);

  Matrix centred = raw.rowwise() - raw.colwise().mean();
  Matrix cov = centred.transpose() * centred / static_cast<double>(raw.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  Vector ev = eig.eigenvalues().reverse();
  const double total = ev.sum();
  const double top = ev.head(cfg.feature_dim).sum();

  Matrix recon = proj.reconstruct(proj.apply(raw));
  Matrix rc = recon.rowwise() - raw.colwise().mean();
  const double kept = rc.squaredNorm() / static_cast<double>(raw.rows() - 1);
  EXPECT_GE(kept / total, top / total - 1e-9);
  EXPECT_NEAR(kept, top, 1e-8 * total);
}

TEST_F(SyntheticStoreTest, TextPromptsDistinctAndDeterministic) {
  auto proj = orthonormal_projection(provider->text_dim(), cfg.feature_dim, 5);
  auto a = encode_class_prompts(ds.class_names, cfg, *provider, proj);
  auto b = encode_class_prompts(ds.class_names, cfg, *provider, proj);
  EXPECT_EQ(a.class_features, b.class_features);
  ASSERT_EQ(a.class_features.rows(), 10);
  for (int i = 0; i < 10; ++i) {
    for (int j = i + 1; j < 10; ++j) {
      double cos = a.class_features.row(i).cast<double>().dot(a.class_features.row(j).cast<double>());
      EXPECT_LT(cos, 0.99) << i << "," << j;
    }
  }
  auto names = ds.class_names;
  names[1] = names[0];
  EXPECT_THROW(encode_class_prompts(names, cfg, *provider, proj), InvalidInputError);
  EXPECT_EQ(format_prompt(cfg.prompt_template, "dog"), "a photo of a dog");
}

TEST_F(SyntheticStoreTest, ExtractionRequiresFittedProjection) {
  std::vector<std::int64_t> ids{0, 1};
  EXPECT_THROW(extract_visual_features(ds, ids, cfg, *provider, Projection{}), StateError);
  cfg.layer_ids = {"down", "nowhere"};
  EXPECT_THROW(raw_visual_features(ds, ids, cfg, *provider), ConfigError);
}

TEST_F(SyntheticStoreTest, RoundTripIsBitExact) {
  auto sub = data::stratified_subset(ds, 10, 0);
  cfg.feature_dim = 4;
  auto store = build_feature_store(sub, cfg, *provider, {"synthetic", 2});
  auto dir = temp_dir("roundtrip");
  save_store(store, dir);
  auto back = load_store(dir, cfg.hash());
  EXPECT_EQ(back.visual.features, store.visual.features);
  EXPECT_EQ(back.visual.sample_ids, store.visual.sample_ids);
  EXPECT_EQ(back.text.class_features, store.text.class_features);
  EXPECT_EQ(back.text.class_names, store.text.class_names);
  EXPECT_EQ(back.projection.components, store.projection.components);
  EXPECT_EQ(back.projection.mean, store.projection.mean);
  for (const char* key : {"provider", "config_hash", "schedule_hash", "projection_hash"}) {
    EXPECT_TRUE(back.manifest.contains(key)) << key;
  }
  // 4-byte reals, row-major: N * d * 4 bytes.
  EXPECT_EQ(fs::file_size(dir / "visual.f32"), 10u * 4u * 4u);
  EXPECT_EQ(50000ull * 512ull * 4ull, 102400000ull);

  // Same config, second extraction: identical store.
  auto again = build_feature_store(sub, cfg, *provider, {"synthetic", 2});
  EXPECT_EQ(again.visual.features, store.visual.features);
  EXPECT_EQ(again.text.class_features, store.text.class_features);
}

TEST_F(SyntheticStoreTest, TamperAndTruncation) {
  cfg.feature_dim = 4;
  auto store = build_feature_store(data::stratified_subset(ds, 20, 0), cfg, *provider, {"synthetic", 2});
  auto dir = temp_dir("tamper");
  save_store(store, dir);

  FeatureExtractionConfig other = cfg;
  other.timestep = 200;
  EXPECT_THROW(load_store(dir, other.hash()), IntegrityError);

  auto manifest = nlohmann::json::parse(std::ifstream(dir / "manifest.json"));
  manifest["files"]["visual.f32"] = std::string(64, '0');
  std::ofstream(dir / "manifest.json") << manifest.dump();
  EXPECT_THROW(load_store(dir), IntegrityError);

  save_store(store, dir);
  fs::resize_file(dir / "visual.f32", fs::file_size(dir / "visual.f32") - 4);
  EXPECT_THROW(load_store(dir), FormatError);

  EXPECT_THROW(load_store(temp_dir("missing")), ProviderError);
}

TEST_F(SyntheticStoreTest, SlicesCoverStoreOnce) {
  cfg.feature_dim = 8;
  auto store = build_feature_store(ds, cfg, *provider, {"synthetic", 2});
  partition::PartitionSpec ps;
  ps.num_clients = 4;
  ps.alpha = 0.3;
  auto part = partition::make_partition(ds.labels, ps);
  std::multiset<std::int64_t> seen;
  for (const auto& idx : part.client_indices) {
    auto slice = slice_store(store, idx);
    ASSERT_EQ(slice.size(), idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      EXPECT_EQ(slice.features.row(static_cast<Eigen::Index>(i)), store.visual.features.row(store.row_of(idx[i])));
      seen.insert(idx[i]);
    }
  }
  EXPECT_EQ(seen.size(), ds.size());
  EXPECT_EQ(std::set<std::int64_t>(seen.begin(), seen.end()).size(), ds.size());

  EXPECT_EQ(slice_store(store, store.visual.sample_ids).features, store.visual.features);
  EXPECT_EQ(slice_store(store, {}).size(), 0u);
  std::vector<std::int64_t> bad{100000};
  EXPECT_THROW(slice_store(store, bad), InvalidInputError);
}

TEST(Pooling, ConstantMapPoolsToConstant) {
  nn::Tensor maps({2, 3, 4, 5});
  for (int n = 0; n < 2; ++n) {
    for (int c = 0; c < 3; ++c) {
      for (int i = 0; i < 20; ++i) maps.data[static_cast<std::size_t>((n * 3 + c) * 20 + i)] = n * 10.0 + c;
    }
  }
  Matrix p = global_average_pool(maps);
  for (int n = 0; n < 2; ++n) {
    for (int c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(p(n, c), n * 10.0 + c);
  }
}

TEST(Config, ValidationAndJson) {
  FeatureExtractionConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  auto back = extraction_from_json(cfg.to_json());
  EXPECT_EQ(back.hash(), cfg.hash());
  cfg.timestep = -1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_THROW(provider_kind_from_string("gan"), ConfigError);
}

TEST(DiffusionProvider, LatentGridAndScaling) {
  auto p = make_provider(ProviderKind::kDiffusion, 10, 1);
  nn::Tensor img({2, 3, 32, 32});
  for (std::size_t i = 0; i < img.size(); ++i) img.data[i] = static_cast<double>(i % 97) / 96.0;
  auto raw = p->encode_latent(img, 1.0);
  EXPECT_EQ(raw.shape, (std::vector<int>{2, 4, 4, 4}));
  auto scaled = p->encode_latent(img, 0.18215);
  for (std::size_t i = 0; i < raw.size(); ++i) EXPECT_NEAR(scaled.data[i], 0.18215 * raw.data[i], 1e-15);
  img.data[5] = std::nan("");
  EXPECT_THROW(p->encode_latent(img, 1.0), InvalidInputError);
  EXPECT_THROW(p->layer_width("encoder.17"), ConfigError);
  EXPECT_EQ(p->describe().at("resize"), "none");
}

TEST(DiffusionProvider, DeterministicFeaturesAndPrompts) {
  data::SyntheticImageSpec spec;
  spec.num_samples = 4;
  auto ds = data::make_synthetic_images(spec, 0);
  FeatureExtractionConfig cfg;
  std::vector<std::int64_t> ids{0, 1, 2, 3};
  auto a = make_provider(ProviderKind::kDiffusion, 10, 1);
  auto b = make_provider(ProviderKind::kDiffusion, 10, 1);
  Matrix fa = raw_visual_features(ds, ids, cfg, *a);
  Matrix fb = raw_visual_features(ds, ids, cfg, *b);
  EXPECT_EQ(fa.cols(), a->raw_visual_dim(cfg));
  EXPECT_LE((fa - fb).cwiseAbs().maxCoeff(), 1e-5);
  EXPECT_EQ(a->text_embed("a photo of a cat", 0), b->text_embed("a photo of a cat", 7));
  EXPECT_NE(a->text_embed("a photo of a cat", 0), a->text_embed("a photo of a dog", 0));
}

}  // namespace
}  // namespace semfl::features
