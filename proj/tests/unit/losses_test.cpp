#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "semfl/common/error.hpp"
#include "semfl/losses/losses.hpp"

namespace semfl::losses {
namespace {

// Independent oracles: plain loops over the textbook definitions, no
// log-sum-exp tricks.
double softmax_entry(const std::vector<double>& v, std::size_t j) {
  double denom = 0.0;
  for (double x : v) denom += std::exp(x);
  return std::exp(v[j]) / denom;
}

double kl_oracle(const std::vector<double>& z, const std::vector<double>& f) {
  double kl = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j) {
    double p = softmax_entry(z, j), q = softmax_entry(f, j);
    kl += p * std::log(p / q);
  }
  return kl;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / std::sqrt(na * nb);
}

double infonce_oracle(const std::vector<std::vector<double>>& f, const std::vector<std::vector<double>>& text,
                      const std::vector<int>& labels, double tau) {
  double total = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    double pos = std::exp(cosine(f[i], text[static_cast<std::size_t>(labels[i])]) / tau);
    double neg = 0.0;
    for (std::size_t j = 0; j < text.size(); ++j)
      if (static_cast<int>(j) != labels[i]) neg += std::exp(cosine(f[i], text[j]) / tau);
    total += -std::log(pos / (pos + neg));
  }
  return total / static_cast<double>(f.size());
}

Matrix to_matrix(const std::vector<std::vector<double>>& rows) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return m;
}

Matrix random_matrix(int rows, int cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Central differences of a scalar function of a matrix.
Matrix numeric_grad(const std::function<double(const Matrix&)>& f, Matrix x, double h = 1e-6) {
  Matrix g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    double orig = x.data()[i];
    x.data()[i] = orig + h;
    double up = f(x);
    x.data()[i] = orig - h;
    double down = f(x);
    x.data()[i] = orig;
    g.data()[i] = (up - down) / (2 * h);
  }
  return g;
}

double rel_err(const Matrix& a, const Matrix& b) {
  double denom = std::max({a.norm(), b.norm(), 1e-12});
  return (a - b).norm() / denom;
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  Matrix logits = Matrix::Constant(4, 10, 0.7);
  std::vector<int> labels{0, 3, 9, 5};
  EXPECT_NEAR(cross_entropy(logits, labels), std::log(10.0), 1e-9);
}

TEST(CrossEntropy, ConfidentLogitMatchesDirectSum) {
  Matrix logits(1, 3);
  logits << 10, 0, 0;
  std::vector<int> labels{0};
  double oracle = -std::log(std::exp(10.0) / (std::exp(10.0) + 2.0));
  EXPECT_NEAR(cross_entropy(logits, labels), oracle, 1e-12);
  EXPECT_NEAR(oracle, 9.08e-5, 1e-7);
}

TEST(CrossEntropy, ShiftInvarianceAndSingleSample) {
  std::mt19937_64 rng(1);
  Matrix logits = random_matrix(5, 7, rng);
  std::vector<int> labels{0, 1, 2, 3, 6};
  Matrix shifted = logits;
  for (Eigen::Index i = 0; i < 5; ++i) shifted.row(i).array() += 3.0 * static_cast<double>(i) - 4.0;
  EXPECT_NEAR(cross_entropy(logits, labels), cross_entropy(shifted, labels), 1e-9);

  Matrix one = logits.topRows(1);
  std::vector<int> first{0};
  double direct = -std::log(softmax_entry({one(0, 0), one(0, 1), one(0, 2), one(0, 3), one(0, 4), one(0, 5), one(0, 6)}, 0));
  EXPECT_NEAR(cross_entropy(one, first), direct, 1e-12);
}

TEST(CrossEntropy, LabelOutOfRange) {
  Matrix logits = Matrix::Zero(1, 3);
  std::vector<int> bad{3};
  EXPECT_THROW(cross_entropy(logits, bad), InvalidInputError);
}

TEST(KdLoss, IdenticalInputsGiveZero) {
  std::mt19937_64 rng(2);
  Matrix z = random_matrix(6, 16, rng);
  EXPECT_NEAR(kd_loss(z, z), 0.0, 1e-9);
}

TEST(KdLoss, ThreeDimCaseMatchesElementwiseOracle) {
  Matrix z(1, 3), f(1, 3);
  z << 1, 0, 0;
  f << 0, 0, 1;
  EXPECT_NEAR(kd_loss(z, f), kl_oracle({1, 0, 0}, {0, 0, 1}), 1e-9);
}

TEST(KdLoss, NonNegativeOnRandomInputs) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 50; ++t) {
    Matrix z = random_matrix(3, 8, rng), f = random_matrix(3, 8, rng);
    EXPECT_GE(kd_loss(z, f), -1e-9);
    EXPECT_GT(kd_loss(z, f), 1e-9);  // distinct inputs
  }
}

TEST(KdLoss, ShapeMismatch) {
  EXPECT_THROW(kd_loss(Matrix::Zero(2, 3), Matrix::Zero(2, 4)), InvalidInputError);
}

TEST(Contrastive, UniformSimilaritiesGiveLogC) {
  Matrix f(2, 4), text(3, 4);
  f << 1, 0, 0, 0, 2, 0, 0, 0;
  text << 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1;
  std::vector<int> labels{0, 2};
  EXPECT_NEAR(contrastive_loss(f, text, labels, 0.05), std::log(3.0), 1e-9);
}

TEST(Contrastive, HandSetCaseMatchesDirectSum) {
  std::vector<std::vector<double>> f{{0.6, 0.8, 0.0}, {0.0, 0.6, -0.8}};
  std::vector<std::vector<double>> text{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  std::vector<int> labels{1, 2};
  for (double tau : {0.05, 0.5}) {
    EXPECT_NEAR(contrastive_loss(to_matrix(f), to_matrix(text), labels, tau), infonce_oracle(f, text, labels, tau),
                1e-9);
  }
}

TEST(Contrastive, DecreasesAsPositiveSimilarityGrows) {
  std::vector<int> labels{0};
  double prev = std::numeric_limits<double>::infinity();
  // Rotate f toward the positive anchor through a fourth axis so both
  // negative cosines stay exactly zero.
  for (double a : {0.0, 0.2, 0.5, 0.8, 1.0}) {
    Matrix f4(1, 4), t4(3, 4);
    f4 << a, 0, 0, std::sqrt(1 - a * a);
    t4 << 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0;
    double loss = contrastive_loss(f4, t4, labels, 0.05);
    EXPECT_GE(loss, 0.0);
    EXPECT_LT(loss, prev);
    prev = loss;
  }
}

TEST(Contrastive, NonPositiveTau) {
  Matrix f = Matrix::Ones(1, 2), text = Matrix::Identity(2, 2);
  std::vector<int> labels{0};
  EXPECT_THROW(contrastive_loss(f, text, labels, 0.0), InvalidInputError);
  EXPECT_THROW(contrastive_loss(f, text, labels, -1.0), InvalidInputError);
}

TEST(Prox, Examples) {
  std::vector<double> a{1, 2}, b{1, 2}, c{4, 6};
  EXPECT_EQ(prox_term(a, b, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(prox_term(c, a, 2.0), 25.0);  // diff (3,4)
  EXPECT_EQ(prox_term(c, a, 0.0), 0.0);
  std::vector<double> short_vec{1};
  EXPECT_THROW(prox_term(a, short_vec, 1.0), InvalidInputError);
}

TEST(Gradients, EveryComponentMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const int B = 4, C = 5, d = 6;
  Matrix logits = random_matrix(B, C, rng);
  Matrix z = random_matrix(B, d, rng);
  Matrix f = random_matrix(B, d, rng);
  Matrix text = random_matrix(C, d, rng);
  text.array().colwise() /= text.rowwise().norm().array();
  std::vector<int> labels{0, 4, 2, 2};

  Matrix g;
  cross_entropy(logits, labels, &g);
  EXPECT_LT(rel_err(g, numeric_grad([&](const Matrix& x) { return cross_entropy(x, labels); }, logits)), 1e-4);

  kd_loss(z, f, &g);
  EXPECT_LT(rel_err(g, numeric_grad([&](const Matrix& x) { return kd_loss(z, x); }, f)), 1e-4);

  kd_loss(z, f, &g, 2.5);
  EXPECT_LT(rel_err(g, numeric_grad([&](const Matrix& x) { return kd_loss(z, x, nullptr, 2.5); }, f)), 1e-4);

  contrastive_loss(f, text, labels, 0.3, &g);
  EXPECT_LT(rel_err(g, numeric_grad([&](const Matrix& x) { return contrastive_loss(x, text, labels, 0.3); }, f)),
            1e-4);

  std::vector<double> w{0.5, -1.0, 2.0}, w0{0.0, 1.0, 1.5}, pg(3, 0.0);
  prox_gradient(w, w0, 0.7, pg);
  for (std::size_t i = 0; i < 3; ++i) {
    auto up = w, down = w;
    up[i] += 1e-6;
    down[i] -= 1e-6;
    double fd = (prox_term(up, w0, 0.7) - prox_term(down, w0, 0.7)) / 2e-6;
    EXPECT_NEAR(pg[i], fd, 1e-6);
  }
}

TEST(TotalLoss, ZeroWeightsReduceToCrossEntropy) {
  std::mt19937_64 rng(6);
  models::ModelOutput out{random_matrix(3, 4, rng), random_matrix(3, 5, rng)};
  Matrix z = random_matrix(3, 5, rng), text = random_matrix(4, 5, rng);
  std::vector<int> labels{1, 2, 3};
  LossWeights w;
  w.lambda_kd = 0.0;
  w.lambda_con = 0.0;
  LossGradients grads;
  auto b = total_loss(out, {&z, &text}, labels, w, &grads);
  EXPECT_EQ(b.total, b.ce);
  EXPECT_GT(b.kd, 0.0);  // telemetry still populated
  EXPECT_EQ(grads.features.norm(), 0.0);
}

TEST(TotalLoss, BreakdownRecomposes) {
  std::mt19937_64 rng(7);
  models::ModelOutput out{random_matrix(3, 4, rng), random_matrix(3, 5, rng)};
  Matrix z = random_matrix(3, 5, rng), text = random_matrix(4, 5, rng);
  std::vector<int> labels{0, 1, 3};
  LossWeights w;  // defaults 1.0 / 0.01 / 0.05
  EXPECT_DOUBLE_EQ(w.lambda_kd, 1.0);
  EXPECT_DOUBLE_EQ(w.lambda_con, 0.01);
  EXPECT_DOUBLE_EQ(w.tau, 0.05);
  auto b = total_loss(out, {&z, &text}, labels, w);
  EXPECT_NEAR(b.total, b.ce + w.lambda_kd * b.kd + w.lambda_con * b.con, 1e-9);
  EXPECT_GE(b.ce, -1e-9);
  EXPECT_GE(b.kd, -1e-9);
  EXPECT_GE(b.con, -1e-9);
}

TEST(TotalLoss, MissingAnchorsIsStateError) {
  models::ModelOutput out{Matrix::Zero(1, 2), Matrix::Ones(1, 2)};
  std::vector<int> labels{0};
  LossWeights w;
  EXPECT_THROW(total_loss(out, {}, labels, w), StateError);
}

}  // namespace
}  // namespace semfl::losses
