#pragma once

#include <Eigen/Dense>

namespace segfetch {

/// Dense row-major matrix used for model inputs, parameters and activations.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::Matrix<double, 1, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace segfetch
