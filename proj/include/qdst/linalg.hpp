// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

namespace qdst {

// Row-major throughout: rows are token positions and the kernels walk them.
template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

} // namespace qdst
