#pragma once

#include <Eigen/Dense>

namespace semfl {

// Row-major so that row i is sample i and the raw buffer matches the on-disk
// row-major layout.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

}  // namespace semfl
