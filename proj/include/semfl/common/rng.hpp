#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>
#include <vector>

namespace semfl {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; used to derive independent streams from a base seed.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Order-sensitive combination of a base seed with any number of stream keys,
/// e.g. derive_seed(seed, round, client).
inline std::uint64_t derive_seed(std::uint64_t seed,
                                 std::initializer_list<std::uint64_t> keys) noexcept {
  std::uint64_t h = mix64(seed);
  for (auto k : keys) h = mix64(h ^ mix64(k + 0x632BE59BD9B4E019ULL));
  return h;
}

/// FNV-1a over bytes, then mixed. Stable across platforms.
inline std::uint64_t hash_string(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return mix64(h);
}

/// Draw a standard normal vector of length n.
std::vector<double> normal_vector(Rng& rng, std::size_t n);

/// Draw from Dirichlet(alpha * 1_k). Falls back to a one-hot vector when every
/// gamma draw underflows to zero (possible for very small alpha).
std::vector<double> dirichlet(Rng& rng, double alpha, std::size_t k);

/// In-place Fisher-Yates with our own index draw so results do not depend on
/// the standard library's std::shuffle implementation.
template <typename T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::uint64_t j = rng() % i;
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace semfl
