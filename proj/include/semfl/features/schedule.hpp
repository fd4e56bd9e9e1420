#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "semfl/nn/tensor.hpp"

namespace semfl::features {

/// Discrete forward-diffusion schedule. Timesteps are 0-indexed:
/// alpha_bar[t] = prod_{i <= t} (1 - beta[i]).
struct NoiseSchedule {
  int num_timesteps = 0;
  std::vector<double> beta;
  std::vector<double> alpha_bar;

  /// betas = linspace(sqrt(beta_start), sqrt(beta_end), T)^2, the schedule
  /// latent-diffusion checkpoints are trained with.
  static NoiseSchedule scaled_linear(int num_timesteps = 1000, double beta_start = 0.00085,
                                     double beta_end = 0.012);

  /// Throws InvalidInputError unless beta in (0,1) and alpha_bar strictly
  /// decreasing inside (0,1).
  void validate() const;
  /// SHA-256 over the little-endian beta array.
  std::string hash() const;
};

/// sqrt(alpha_bar[t]) * latent + sqrt(1 - alpha_bar[t]) * eps. When `eps` is
/// null a standard normal draw seeded by `seed` is used.
nn::Tensor add_noise(const nn::Tensor& latent, int t, const NoiseSchedule& schedule, const nn::Tensor* eps,
                     std::uint64_t seed);

}  // namespace semfl::features
