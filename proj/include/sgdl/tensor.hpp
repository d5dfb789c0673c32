#ifndef SGDL_TENSOR_HPP
#define SGDL_TENSOR_HPP

#include <Eigen/Dense>

namespace sgdl {

/// Row-major dense matrix; rows are samples (nodes or edges), columns features.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// out = x * w.
///
/// Every output row is computed by the same instruction sequence from its own
/// input row only, so a row's result does not depend on where it sits in `x`.
/// Node permutation tests rely on this; Eigen's blocked GEMM does not promise it.
Mat matmul(const Mat &x, const Mat &w);

/// out = x * w + bias (bias is 1 x cols).
Mat affine(const Mat &x, const Mat &w, const Mat &bias);

} // namespace sgdl

#endif // SGDL_TENSOR_HPP
