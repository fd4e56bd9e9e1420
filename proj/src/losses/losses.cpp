#include "semfl/losses/losses.hpp"

#include <cmath>
#include <string>

#include "semfl/common/error.hpp"

namespace semfl::losses {
namespace {

constexpr double kNormFloor = 1e-12;

void check_labels(std::span<const int> labels, Eigen::Index rows, Eigen::Index classes) {
  if (static_cast<Eigen::Index>(labels.size()) != rows) {
    throw InvalidInputError("label count " + std::to_string(labels.size()) + " does not match batch size " +
                            std::to_string(rows));
  }
  for (int y : labels) {
    if (y < 0 || y >= classes) {
      throw InvalidInputError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

// Row-wise log-softmax with max subtraction.
Matrix log_softmax_rows(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double m = x.row(i).maxCoeff();
    double lse = m + std::log((x.row(i).array() - m).exp().sum());
    out.row(i) = x.row(i).array() - lse;
  }
  return out;
}

}  // namespace

void LossWeights::validate() const {
  auto finite_nonneg = [](double v) { return std::isfinite(v) && v >= 0.0; };
  if (!(tau > 0.0) || !std::isfinite(tau)) throw InvalidInputError("tau must be > 0");
  if (!finite_nonneg(lambda_kd)) throw InvalidInputError("lambda_kd must be finite and >= 0");
  if (!finite_nonneg(lambda_con)) throw InvalidInputError("lambda_con must be finite and >= 0");
  if (!finite_nonneg(mu_prox)) throw InvalidInputError("mu_prox must be finite and >= 0");
  if (!(kd_temperature > 0.0) || !std::isfinite(kd_temperature)) {
    throw InvalidInputError("kd_temperature must be > 0");
  }
}

double cross_entropy(const Matrix& logits, std::span<const int> labels, Matrix* grad) {
  check_labels(labels, logits.rows(), logits.cols());
  if (logits.rows() == 0) throw InvalidInputError("empty batch");
  const double inv_b = 1.0 / static_cast<double>(logits.rows());
  Matrix logp = log_softmax_rows(logits);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) loss -= logp(i, labels[static_cast<std::size_t>(i)]);
  if (grad) {
    *grad = logp.array().exp() * inv_b;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) (*grad)(i, labels[static_cast<std::size_t>(i)]) -= inv_b;
  }
  return loss * inv_b;
}

double kd_loss(const Matrix& teacher, const Matrix& local, Matrix* grad_local, double temperature) {
  if (teacher.rows() != local.rows() || teacher.cols() != local.cols()) {
    throw InvalidInputError("kd_loss shape mismatch");
  }
  if (local.rows() == 0) throw InvalidInputError("empty batch");
  if (!(temperature > 0.0)) throw InvalidInputError("kd temperature must be > 0");
  const double inv_b = 1.0 / static_cast<double>(local.rows());
  Matrix log_p = log_softmax_rows(teacher / temperature);
  Matrix log_q = log_softmax_rows(local / temperature);
  Matrix p = log_p.array().exp();
  double loss = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
      if (p(i, j) > 0.0) loss += p(i, j) * (log_p(i, j) - log_q(i, j));
    }
  if (grad_local) *grad_local = (log_q.array().exp() - p.array()) * (inv_b / temperature);
  return loss * inv_b;
}

double contrastive_loss(const Matrix& local, const Matrix& text, std::span<const int> labels, double tau,
                        Matrix* grad_local) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw InvalidInputError("tau must be > 0");
  if (local.cols() != text.cols()) throw InvalidInputError("feature / text dimension mismatch");
  check_labels(labels, local.rows(), text.rows());
  if (local.rows() == 0) throw InvalidInputError("empty batch");
  const double inv_b = 1.0 / static_cast<double>(local.rows());

  Vector f_norm = local.rowwise().norm().cwiseMax(kNormFloor);
  Vector t_norm = text.rowwise().norm().cwiseMax(kNormFloor);
  Matrix sim = local * text.transpose();
  sim.array().colwise() /= f_norm.array();
  sim.array().rowwise() /= t_norm.transpose().array();

  Matrix logp = log_softmax_rows(sim / tau);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < sim.rows(); ++i) loss -= logp(i, labels[static_cast<std::size_t>(i)]);

  if (grad_local) {
    Matrix g_sim = logp.array().exp();
    for (Eigen::Index i = 0; i < sim.rows(); ++i) g_sim(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
    g_sim *= inv_b / tau;
    // d cos(f, t) / df = t / (|f||t|) - cos * f / |f|^2
    Matrix scaled_g = g_sim;
    scaled_g.array().rowwise() /= t_norm.transpose().array();
    Matrix g = scaled_g * text;
    g.array().colwise() /= f_norm.array();
    Vector radial = (g_sim.array() * sim.array()).rowwise().sum();
    radial.array() /= f_norm.array().square();
    g -= (local.array().colwise() * radial.array()).matrix();
    *grad_local = std::move(g);
  }
  return loss * inv_b;
}

double prox_term(std::span<const double> local, std::span<const double> global, double mu) {
  if (local.size() != global.size()) throw InvalidInputError("prox_term length mismatch");
  if (mu == 0.0) return 0.0;
  double sq = 0.0;
  for (std::size_t i = 0; i < local.size(); ++i) {
    double d = local[i] - global[i];
    sq += d * d;
  }
  return 0.5 * mu * sq;
}

void prox_gradient(std::span<const double> local, std::span<const double> global, double mu,
                   std::span<double> grad) {
  if (local.size() != global.size() || grad.size() != local.size()) {
    throw InvalidInputError("prox_gradient length mismatch");
  }
  if (mu == 0.0) return;
  for (std::size_t i = 0; i < local.size(); ++i) grad[i] += mu * (local[i] - global[i]);
}

LossBreakdown total_loss(const models::ModelOutput& out, const BatchAnchors& anchors, std::span<const int> labels,
                         const LossWeights& weights, LossGradients* grads) {
  weights.validate();
  if (weights.lambda_kd != 0.0 && anchors.visual == nullptr) {
    throw StateError("lambda_kd > 0 but no visual anchors were supplied");
  }
  if (weights.lambda_con != 0.0 && anchors.text == nullptr) {
    throw StateError("lambda_con > 0 but no text anchors were supplied");
  }

  LossBreakdown b;
  Matrix g_kd, g_con;
  b.ce = cross_entropy(out.logits, labels, grads ? &grads->logits : nullptr);
  if (anchors.visual) {
    b.kd = kd_loss(*anchors.visual, out.features, grads && weights.lambda_kd != 0.0 ? &g_kd : nullptr,
                   weights.kd_temperature);
  }
  if (anchors.text) {
    b.con = contrastive_loss(out.features, *anchors.text, labels, weights.tau,
                             grads && weights.lambda_con != 0.0 ? &g_con : nullptr);
  }
  b.total = b.ce + weights.lambda_kd * b.kd + weights.lambda_con * b.con;

  if (grads) {
    grads->features = Matrix::Zero(out.features.rows(), out.features.cols());
    if (weights.lambda_kd != 0.0) grads->features += weights.lambda_kd * g_kd;
    if (weights.lambda_con != 0.0) grads->features += weights.lambda_con * g_con;
  }
  return b;
}

}  // namespace semfl::losses
