#pragma once

#include <span>

#include "semfl/common/types.hpp"
#include "semfl/models/model_output.hpp"

namespace semfl::losses {

struct LossWeights {
  double lambda_kd = 1.0;
  double lambda_con = 0.01;
  double tau = 0.05;
  double mu_prox = 0.0;
  // Softmax temperature inside the KD term. Experimental; 1 reproduces the
  // plain KL between softmaxed features.
  double kd_temperature = 1.0;

  void validate() const;
};

struct LossBreakdown {
  double ce = 0.0;
  double kd = 0.0;
  double con = 0.0;
  double total = 0.0;
};

/// Mean negative log-likelihood of the labelled class. If `grad` is non-null
/// it receives dLoss/dLogits (already divided by the batch size).
double cross_entropy(const Matrix& logits, std::span<const int> labels, Matrix* grad = nullptr);

/// Mean over rows of KL(softmax(z_i / T) || softmax(f_i / T)). Gradient is
/// with respect to `local`.
double kd_loss(const Matrix& teacher, const Matrix& local, Matrix* grad_local = nullptr,
               double temperature = 1.0);

/// InfoNCE of each local feature against all class text anchors, with the
/// labelled class as the positive and every other class as a negative.
/// Similarity is cosine.
double contrastive_loss(const Matrix& local, const Matrix& text, std::span<const int> labels,
                        double tau, Matrix* grad_local = nullptr);

/// (mu/2) * ||local - global||^2.
double prox_term(std::span<const double> local, std::span<const double> global, double mu);

/// Adds mu * (local - global) to `grad`.
void prox_gradient(std::span<const double> local, std::span<const double> global, double mu,
                   std::span<double> grad);

/// Anchors for one batch: visual rows aligned with the batch, text rows for
/// every class.
struct BatchAnchors {
  const Matrix* visual = nullptr;
  const Matrix* text = nullptr;
};

struct LossGradients {
  Matrix logits;
  Matrix features;
};

/// CE + lambda_kd * KD + lambda_con * CON. Components whose weight is zero
/// are still evaluated for telemetry when anchors are present but contribute
/// nothing to the gradient.
LossBreakdown total_loss(const models::ModelOutput& out, const BatchAnchors& anchors,
                         std::span<const int> labels, const LossWeights& weights,
                         LossGradients* grads = nullptr);

}  // namespace semfl::losses
