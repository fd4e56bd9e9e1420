#include "semfl/features/projection.hpp"

#include <string>
#include <vector>

#include "semfl/common/error.hpp"
#include "semfl/common/hash.hpp"
#include "semfl/common/rng.hpp"

namespace semfl::features {

Matrix Projection::apply(const Matrix& raw) const {
  if (raw.cols() != components.cols()) {
    throw InvalidInputError("projection expects " + std::to_string(components.cols()) + " input columns, got " +
                            std::to_string(raw.cols()));
  }
  return (raw.rowwise() - mean.transpose()) * components.transpose();
}

Matrix Projection::reconstruct(const Matrix& z) const {
  return (z * components).rowwise() + mean.transpose();
}

std::string Projection::hash() const {
  std::vector<std::uint8_t> bytes;
  auto append = [&](const double* p, Eigen::Index n) {
    auto* b = reinterpret_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n * static_cast<Eigen::Index>(sizeof(double)));
  };
  append(components.data(), components.size());
  append(mean.data(), mean.size());
  return sha256_hex(bytes);
}

Projection fit_projection(const Matrix& raw, int d) {
  const auto N = raw.rows(), D = raw.cols();
  if (d < 1) throw InvalidInputError("projection dimension must be positive");
  if (D < d) throw ReducedRankError("input dimension " + std::to_string(D) + " is below d = " + std::to_string(d),
                                    static_cast<int>(D));
  if (N <= d) {
    throw ReducedRankError("PCA needs more than d = " + std::to_string(d) + " samples, got " + std::to_string(N),
                           static_cast<int>(std::max<Eigen::Index>(N - 1, 0)));
  }
  Projection p;
  p.mean = raw.colwise().mean().transpose();
  Matrix centred = raw.rowwise() - p.mean.transpose();
  Matrix cov = (centred.transpose() * centred) / static_cast<double>(N - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  if (eig.info() != Eigen::Success) throw ProviderError("eigendecomposition failed");
  const Vector& values = eig.eigenvalues();  // ascending
  const double top = std::max(values(D - 1), 0.0);
  const double tol = top * 1e-10 * static_cast<double>(D);
  int rank = 0;
  for (Eigen::Index i = 0; i < D; ++i) rank += values(i) > tol ? 1 : 0;
  if (rank < d) {
    throw ReducedRankError("data rank " + std::to_string(rank) + " is below d = " + std::to_string(d), rank);
  }
  p.components.resize(d, D);
  p.explained_variance.resize(d);
  for (int r = 0; r < d; ++r) {
    Eigen::Index col = D - 1 - r;
    Vector v = eig.eigenvectors().col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    p.components.row(r) = v.transpose();
    p.explained_variance(r) = values(col);
  }
  return p;
}

Matrix orthonormal_rows(int k, int n, std::uint64_t seed) {
  if (k < 1 || n < k) throw ReducedRankError("cannot build " + std::to_string(k) + " orthonormal rows in " +
                                                 std::to_string(n) + " dims",
                                             n);
  Rng rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix a(n, k);  // columns orthonormalised, then transposed
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = g(rng);
  Eigen::HouseholderQR<Matrix> qr(a);
  Matrix q = qr.householderQ() * Matrix::Identity(n, k);
  // Fix the sign ambiguity of QR so rows correlate positively with the draw.
  for (int j = 0; j < k; ++j) {
    if (q.col(j).dot(a.col(j)) < 0) q.col(j) = -q.col(j);
  }
  return q.transpose();
}

Projection orthonormal_projection(int input_dim, int d, std::uint64_t seed) {
  Projection p;
  p.components = orthonormal_rows(d, input_dim, seed);
  p.mean = Vector::Zero(input_dim);
  return p;
}

}  // namespace semfl::features
