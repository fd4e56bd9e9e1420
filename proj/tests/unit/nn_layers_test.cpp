#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "semfl/nn/layers.hpp"

namespace semfl::nn {
namespace {

Tensor random_tensor(std::vector<int> shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = n(rng);
  return t;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(d) / std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
}

// Checks d<r, m(x)>/dx and d/dparams against central differences. Blocks
// with ReLU6 inside get a looser tolerance: a probe can cross a kink.
void check_module(Module& m, const Tensor& x, double tol = 1e-6) {
  Rng init(3);
  m.init(init);
  std::vector<Parameter*> params;
  m.collect_parameters(params);
  for (auto* p : params) std::fill(p->grad.begin(), p->grad.end(), 0.0);

  Tensor y = m.forward(x, Mode::kTrain);
  Tensor r = random_tensor(y.shape, 11);
  Tensor dx = m.backward(r);
  auto f = [&](const Tensor& in) { return dot(r, m.forward(in, Mode::kTrain)); };
  const double h = 1e-6;

  {
    ASSERT_EQ(dx.shape, x.shape);
    std::vector<double> fd(x.size());
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
      probe.data[i] = x.data[i] + h;
      double up = f(probe);
      probe.data[i] = x.data[i] - h;
      double down = f(probe);
      probe.data[i] = x.data[i];
      fd[i] = (up - down) / (2 * h);
    }
    EXPECT_LT(rel_error(fd, dx.data), tol) << "input gradient";
  }
  for (auto* p : params) {
    if (!p->trainable) continue;
    std::vector<double> fd(p->value.size());
    for (std::size_t j = 0; j < p->value.size(); ++j) {
      const double w = p->value[j];
      p->value[j] = w + h;
      double up = f(x);
      p->value[j] = w - h;
      double down = f(x);
      p->value[j] = w;
      fd[j] = (up - down) / (2 * h);
    }
    EXPECT_LT(rel_error(fd, p->grad), tol) << p->name;
  }
}

TEST(Conv2d, PlainGradients) {
  Conv2d conv("c", 3, 4, 3, 1, 1);
  check_module(conv, random_tensor({2, 3, 5, 5}, 1));
}

TEST(Conv2d, StridedGroupedGradients) {
  Conv2d conv("c", 4, 6, 3, 2, 1, 2);
  check_module(conv, random_tensor({2, 4, 7, 6}, 2));
}

TEST(Conv2d, DepthwiseNoBiasGradients) {
  Conv2d conv("c", 3, 3, 3, 2, 1, 3, false);
  check_module(conv, random_tensor({1, 3, 6, 6}, 3));
}

TEST(Conv2d, OutputMatchesDirectConvolution) {
  Conv2d conv("c", 2, 3, 3, 2, 1, 1, true);
  Rng init(5);
  conv.init(init);
  std::vector<Parameter*> ps;
  conv.collect_parameters(ps);
  const auto& w = ps[0]->value;
  const auto& b = ps[1]->value;
  Tensor x = random_tensor({1, 2, 5, 5}, 4);
  Tensor y = conv.forward(x, Mode::kEval);
  ASSERT_EQ(y.shape, (std::vector<int>{1, 3, 3, 3}));
  for (int co = 0; co < 3; ++co) {
    for (int oy = 0; oy < 3; ++oy) {
      for (int ox = 0; ox < 3; ++ox) {
        double s = b[static_cast<std::size_t>(co)];
        for (int ci = 0; ci < 2; ++ci) {
          for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
              int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
              if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
              s += w[static_cast<std::size_t>(((co * 2 + ci) * 3 + ky) * 3 + kx)] *
                   x.data[static_cast<std::size_t>((ci * 5 + iy) * 5 + ix)];
            }
          }
        }
        EXPECT_NEAR(y.data[static_cast<std::size_t>((co * 3 + oy) * 3 + ox)], s, 1e-12);
      }
    }
  }
}

TEST(Conv2d, FirstLayerSkipsInputGradient) {
  Conv2d conv("c", 3, 2, 3, 1, 1);
  conv.set_input_grad(false);
  Rng init(1);
  conv.init(init);
  Tensor y = conv.forward(random_tensor({1, 3, 4, 4}, 1), Mode::kTrain);
  EXPECT_EQ(conv.backward(y).size(), 0u);
}

TEST(BatchNorm2d, TrainingModeGradients) {
  BatchNorm2d bn("bn", 3);
  check_module(bn, random_tensor({4, 3, 3, 3}, 6));
}

TEST(BatchNorm2d, EvalUsesRunningStatistics) {
  BatchNorm2d bn("bn", 2, 1.0);  // momentum 1: running stats = last batch stats
  Rng init(1);
  bn.init(init);
  Tensor x = random_tensor({8, 2, 4, 4}, 7);
  Tensor train = bn.forward(x, Mode::kTrain);
  Tensor eval = bn.forward(x, Mode::kEval);
  // Running variance is unbiased, the batch variance is not: outputs differ
  // only by the factor sqrt((n-1)/n) up to eps.
  const double n = 8 * 16;
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(eval.data[i], train.data[i] * std::sqrt((n - 1) / n), 1e-4);
}

TEST(Linear, Gradients) {
  Linear lin("fc", 5, 4);
  check_module(lin, random_tensor({3, 5}, 8));
}

TEST(MaxPoolAndAverage, Gradients) {
  MaxPool2d pool(2);
  check_module(pool, random_tensor({2, 2, 4, 6}, 9));
  GlobalAvgPool gap;
  check_module(gap, random_tensor({2, 3, 3, 5}, 10));
}

TEST(ReLU, CappedGradients) {
  ReLU relu6(6.0);
  Tensor x = random_tensor({2, 10}, 12);
  for (auto& v : x.data) v *= 5.0;
  check_module(relu6, x);
}

TEST(BasicBlock, ProjectionShortcutGradients) {
  BasicBlock block("b", 2, 4, 2);
  check_module(block, random_tensor({3, 2, 6, 6}, 13));
}

TEST(BasicBlock, IdentityShortcutGradients) {
  BasicBlock block("b", 3, 3, 1);
  check_module(block, random_tensor({2, 3, 4, 4}, 14));
}

TEST(InvertedResidual, ResidualAndStridedGradients) {
  InvertedResidual same("ir", 3, 3, 1, 2);
  check_module(same, random_tensor({3, 3, 4, 4}, 15), 1e-4);
  InvertedResidual down("ir", 3, 5, 2, 3);
  check_module(down, random_tensor({3, 3, 6, 6}, 16), 1e-4);
}

}  // namespace
}  // namespace semfl::nn
