#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "semfl/common/error.hpp"
#include "semfl/losses/losses.hpp"
#include "semfl/models/model.hpp"

namespace semfl::models {
namespace {

nn::Tensor random_images(int b, int c, int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  nn::Tensor t({b, c, h, w});
  for (auto& v : t.data) v = n(rng);
  return t;
}

BackboneSpec small_spec(Architecture arch, int hw = 8) {
  BackboneSpec spec;
  spec.architecture = arch;
  spec.num_classes = 5;
  spec.feature_dim = 6;
  spec.seed = 17;
  spec.input_height = hw;
  spec.input_width = hw;
  return spec;
}

TEST(BuildModel, SameSeedSameParameters) {
  for (auto arch : {Architecture::kLinear, Architecture::kTinyCnn, Architecture::kResNet10}) {
    auto a = build_model(small_spec(arch));
    auto b = build_model(small_spec(arch));
    EXPECT_EQ(a.flatten(), b.flatten()) << to_string(arch);
    auto spec = small_spec(arch);
    spec.seed = 18;
    EXPECT_NE(build_model(spec).flatten(), a.flatten());
  }
}

TEST(BuildModel, FlattenUnflattenIsBitExact) {
  for (auto arch : {Architecture::kLinear, Architecture::kTinyCnn, Architecture::kResNet10, Architecture::kMobileNetV2}) {
    auto model = build_model(small_spec(arch));
    auto params = model.flatten();
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n;
    for (auto& p : params) p = n(rng);
    model.unflatten(params);
    auto again = model.flatten();
    ASSERT_EQ(again.size(), params.size());
    EXPECT_EQ(std::memcmp(again.data(), params.data(), params.size() * sizeof(double)), 0) << to_string(arch);
  }
}

TEST(BuildModel, UnknownArchitecture) { EXPECT_THROW(architecture_from_string("vgg19"), ConfigError); }

TEST(Forward, LinearIdentityHeadNormalisesInput) {
  BackboneSpec spec;
  spec.architecture = Architecture::kLinear;
  spec.num_classes = 3;
  spec.feature_dim = 4;
  spec.input_channels = 1;
  spec.input_height = 1;
  spec.input_width = 4;
  auto model = build_model(spec);
  model.set_identity_feature_head();
  nn::Tensor x({2, 1, 1, 4});
  x.data = {3, 4, 0, 0, 1, -1, 1, -1};
  auto out = model.forward(x, nn::Mode::kEval);
  EXPECT_NEAR(out.features(0, 0), 0.6, 1e-15);
  EXPECT_NEAR(out.features(0, 1), 0.8, 1e-15);
  EXPECT_NEAR(out.features(1, 2), 0.5, 1e-15);
}

TEST(Forward, UnitNormFeaturesAndShapes) {
  BackboneSpec spec = small_spec(Architecture::kTinyCnn, 32);
  spec.num_classes = 10;
  spec.feature_dim = 512;
  auto model = build_model(spec);
  auto out = model.forward(random_images(64, 3, 32, 32, 2), nn::Mode::kEval);
  ASSERT_EQ(out.logits.rows(), 64);
  ASSERT_EQ(out.logits.cols(), 10);
  ASSERT_EQ(out.features.rows(), 64);
  ASSERT_EQ(out.features.cols(), 512);
  for (Eigen::Index i = 0; i < 64; ++i) EXPECT_NEAR(out.features.row(i).norm(), 1.0, 1e-5);
}

TEST(Forward, PerSampleIndependenceInEvalMode) {
  for (auto arch : {Architecture::kTinyCnn, Architecture::kResNet10, Architecture::kMobileNetV2}) {
    auto model = build_model(small_spec(arch));
    auto x = random_images(3, 3, 8, 8, 4);
    auto base = model.forward(x, nn::Mode::kEval);
    // permute rows [2,0,1] and duplicate sample 0 at the end
    nn::Tensor y({4, 3, 8, 8});
    const std::size_t row = x.row_size();
    const int order[4] = {2, 0, 1, 0};
    for (int i = 0; i < 4; ++i)
      std::copy_n(x.data.begin() + static_cast<std::ptrdiff_t>(order[i] * row), row,
                  y.data.begin() + static_cast<std::ptrdiff_t>(i * row));
    auto out = model.forward(y, nn::Mode::kEval);
    for (int i = 0; i < 4; ++i) {
      EXPECT_LT((out.logits.row(i) - base.logits.row(order[i])).norm(), 1e-12) << to_string(arch);
      EXPECT_LT((out.features.row(i) - base.features.row(order[i])).norm(), 1e-12);
    }
  }
}

TEST(Forward, ShapeMismatch) {
  auto model = build_model(small_spec(Architecture::kTinyCnn));
  EXPECT_THROW(model.forward(random_images(2, 3, 12, 12, 0), nn::Mode::kEval), InvalidInputError);
  EXPECT_THROW(model.forward(nn::Tensor({0, 3, 8, 8}), nn::Mode::kEval), InvalidInputError);
}

// Finite differences over the full flat parameter vector, in training mode,
// for the complete weighted objective.
class GradientCheck : public ::testing::TestWithParam<Architecture> {};

TEST_P(GradientCheck, TotalLossMatchesCentralDifferences) {
  auto spec = small_spec(GetParam());
  auto model = build_model(spec);
  const int B = 8;
  auto x = random_images(B, 3, 8, 8, 9);
  std::vector<int> labels{0, 1, 2, 3, 4, 0, 1, 2};
  std::mt19937_64 rng(10);
  std::normal_distribution<double> n;
  Matrix z(B, spec.feature_dim), text(spec.num_classes, spec.feature_dim);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = n(rng);
  for (Eigen::Index i = 0; i < text.size(); ++i) text.data()[i] = n(rng);
  text.array().colwise() /= text.rowwise().norm().array();
  losses::LossWeights w;
  w.tau = 0.5;  // keeps the finite-difference curvature moderate

  auto base = model.flatten();
  auto objective = [&](const std::vector<double>& p) {
    model.unflatten(p);
    auto out = model.forward(x, nn::Mode::kTrain);
    return losses::total_loss(out, {&z, &text}, labels, w).total;
  };

  model.unflatten(base);
  model.zero_grad();
  auto out = model.forward(x, nn::Mode::kTrain);
  losses::LossGradients grads;
  losses::total_loss(out, {&z, &text}, labels, w, &grads);
  model.backward(grads.logits, grads.features);
  auto analytic = model.flatten_grad();

  // Per parameter block, skipping running-stat buffers.
  std::size_t offset = 0;
  const double h = 1e-6;
  for (auto* p : model.parameters()) {
    const std::size_t n_p = p->value.size();
    if (p->trainable) {
      double diff2 = 0.0, an2 = 0.0, fd2 = 0.0;
      for (std::size_t j = 0; j < n_p; ++j) {
        auto probe = base;
        probe[offset + j] += h;
        double up = objective(probe);
        probe[offset + j] -= 2 * h;
        double down = objective(probe);
        double fd = (up - down) / (2 * h);
        double an = analytic[offset + j];
        diff2 += (fd - an) * (fd - an);
        an2 += an * an;
        fd2 += fd * fd;
      }
      double rel = std::sqrt(diff2) / std::max({std::sqrt(an2), std::sqrt(fd2), 1e-12});
      EXPECT_LT(rel, 1e-4) << p->name;
    }
    offset += n_p;
  }
}

INSTANTIATE_TEST_SUITE_P(Architectures, GradientCheck,
                         ::testing::Values(Architecture::kLinear, Architecture::kTinyCnn),
                         [](const auto& info) { return to_string(info.param); });

TEST(Checkpoint, RoundTrip) {
  auto dir = std::filesystem::temp_directory_path() / "semfl_models_test";
  std::filesystem::create_directories(dir);
  auto spec = small_spec(Architecture::kTinyCnn);
  auto model = build_model(spec);
  save_checkpoint(dir / "model", spec, model.flatten());
  auto ck = load_checkpoint(dir / "model");
  EXPECT_EQ(ck.params, model.flatten());
  EXPECT_EQ(ck.spec.architecture, spec.architecture);
  EXPECT_EQ(ck.spec.seed, spec.seed);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace semfl::models
