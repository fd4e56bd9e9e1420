#include "semfl/features/schedule.hpp"

#include <cmath>
#include <cstring>

#include "semfl/common/error.hpp"
#include "semfl/common/hash.hpp"
#include "semfl/common/rng.hpp"

namespace semfl::features {

NoiseSchedule NoiseSchedule::scaled_linear(int num_timesteps, double beta_start, double beta_end) {
  if (num_timesteps < 2) throw InvalidInputError("noise schedule needs at least two timesteps");
  NoiseSchedule s;
  s.num_timesteps = num_timesteps;
  s.beta.resize(static_cast<std::size_t>(num_timesteps));
  s.alpha_bar.resize(static_cast<std::size_t>(num_timesteps));
  const double a = std::sqrt(beta_start), b = std::sqrt(beta_end);
  double prod = 1.0;
  for (int t = 0; t < num_timesteps; ++t) {
    double r = a + (b - a) * t / (num_timesteps - 1);
    auto i = static_cast<std::size_t>(t);
    s.beta[i] = r * r;
    prod *= 1.0 - s.beta[i];
    s.alpha_bar[i] = prod;
  }
  s.validate();
  return s;
}

void NoiseSchedule::validate() const {
  if (num_timesteps < 1 || beta.size() != static_cast<std::size_t>(num_timesteps) ||
      alpha_bar.size() != beta.size()) {
    throw InvalidInputError("noise schedule arrays do not match num_timesteps");
  }
  for (std::size_t t = 0; t < beta.size(); ++t) {
    if (!(beta[t] > 0.0 && beta[t] < 1.0)) throw InvalidInputError("beta must lie in (0, 1)");
    if (!(alpha_bar[t] > 0.0 && alpha_bar[t] < 1.0)) throw InvalidInputError("alpha_bar must lie in (0, 1)");
    if (t > 0 && !(alpha_bar[t] < alpha_bar[t - 1])) throw InvalidInputError("alpha_bar must strictly decrease");
  }
}

std::string NoiseSchedule::hash() const {
  std::span<const std::uint8_t> bytes(reinterpret_cast<const std::uint8_t*>(beta.data()), beta.size() * sizeof(double));
  return sha256_hex(bytes);
}

nn::Tensor add_noise(const nn::Tensor& latent, int t, const NoiseSchedule& schedule, const nn::Tensor* eps,
                     std::uint64_t seed) {
  if (t < 1 || t >= schedule.num_timesteps) {
    throw InvalidInputError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(schedule.num_timesteps) +
                            ")");
  }
  if (eps && eps->shape != latent.shape) throw InvalidInputError("noise shape " + eps->shape_string() +
                                                                 " does not match latent " + latent.shape_string());
  const double ab = schedule.alpha_bar[static_cast<std::size_t>(t)];
  const double s = std::sqrt(ab), n = std::sqrt(1.0 - ab);
  nn::Tensor out(latent.shape);
  if (eps) {
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = s * latent.data[i] + n * eps->data[i];
  } else {
    Rng rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = s * latent.data[i] + n * g(rng);
  }
  return out;
}

}  // namespace semfl::features
