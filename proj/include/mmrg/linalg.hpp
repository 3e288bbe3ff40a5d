#pragma once

#include <Eigen/Dense>

namespace mmrg {

// Row-major so matrices map directly onto checkpoint tensors.
using mat_t = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using vec_t = Eigen::VectorXd;

} // namespace mmrg
