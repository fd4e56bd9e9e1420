#include "semfl/common/rng.hpp"

#include <numeric>

namespace semfl {

std::vector<double> normal_vector(Rng& rng, std::size_t n) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> out(n);
  for (auto& v : out) v = dist(rng);
  return out;
}

std::vector<double> dirichlet(Rng& rng, double alpha, std::size_t k) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> p(k);
  for (auto& v : p) v = gamma(rng);
  double total = std::accumulate(p.begin(), p.end(), 0.0);
  if (!(total > 0.0)) {
    std::fill(p.begin(), p.end(), 0.0);
    p[rng() % k] = 1.0;
    return p;
  }
  for (auto& v : p) v /= total;
  return p;
}

}  // namespace semfl
