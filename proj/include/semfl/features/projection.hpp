#pragma once

#include <cstdint>
#include <string>

#include "semfl/common/types.hpp"

namespace semfl::features {

/// Linear map x -> P (x - mean) with orthonormal rows in P (d x D).
struct Projection {
  Matrix components;  // d x D
  Vector mean;        // D
  Vector explained_variance;  // d, empty for non-PCA projections

  int dim() const { return static_cast<int>(components.rows()); }
  int input_dim() const { return static_cast<int>(components.cols()); }
  /// Rows of `raw` (N x D) mapped to N x d.
  Matrix apply(const Matrix& raw) const;
  /// z (N x d) -> mean + z P, back in D dims.
  Matrix reconstruct(const Matrix& z) const;
  std::string hash() const;
};

/// PCA: principal directions of the mean-centred rows, ordered by decreasing
/// variance, each oriented so its largest-magnitude entry is positive.
/// Throws ReducedRankError when fewer than d directions carry variance.
Projection fit_projection(const Matrix& raw, int d);

/// Seeded Gaussian matrix with orthonormalised rows and zero mean.
Projection orthonormal_projection(int input_dim, int d, std::uint64_t seed);

/// Rows of a seeded Gaussian k x n matrix made orthonormal (k <= n).
Matrix orthonormal_rows(int k, int n, std::uint64_t seed);

}  // namespace semfl::features
