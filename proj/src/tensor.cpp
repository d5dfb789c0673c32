#include "sgdl/tensor.hpp"

#include <algorithm>

#include "sgdl/errors.hpp"

namespace sgdl {

namespace {

constexpr int kRowBlock = 4;
constexpr int kColBlock = 32;

template <int Rows>
void block_kernel(const double *x, const double *w, double *out, Eigen::Index inner, Eigen::Index cols) {
    for (Eigen::Index j0 = 0; j0 < cols; j0 += kColBlock) {
        const int width = static_cast<int>(std::min<Eigen::Index>(kColBlock, cols - j0));
        double acc[Rows][kColBlock] = {};
        // Same per-element operation order in both branches; the fixed width only lets the compiler unroll.
        if (width == kColBlock) {
            for (Eigen::Index k = 0; k < inner; ++k) {
                const double *wk = w + k * cols + j0;
                for (int r = 0; r < Rows; ++r) {
                    const double xv = x[r * inner + k];
                    for (int j = 0; j < kColBlock; ++j) {
                        acc[r][j] += xv * wk[j];
                    }
                }
            }
        } else {
            for (Eigen::Index k = 0; k < inner; ++k) {
                const double *wk = w + k * cols + j0;
                for (int r = 0; r < Rows; ++r) {
                    const double xv = x[r * inner + k];
                    for (int j = 0; j < width; ++j) {
                        acc[r][j] += xv * wk[j];
                    }
                }
            }
        }
        for (int r = 0; r < Rows; ++r) {
            std::copy(acc[r], acc[r] + width, out + r * cols + j0);
        }
    }
}

} // namespace

Mat matmul(const Mat &x, const Mat &w) {
    if (x.cols() != w.rows()) {
        throw InvalidArgument("matmul shape mismatch");
    }
    const Eigen::Index rows = x.rows();
    const Eigen::Index inner = x.cols();
    const Eigen::Index cols = w.cols();
    Mat out(rows, cols);
    if (inner == 0) {
        out.setZero();
        return out;
    }
    Eigen::Index r = 0;
    for (; r + kRowBlock <= rows; r += kRowBlock) {
        block_kernel<kRowBlock>(x.data() + r * inner, w.data(), out.data() + r * cols, inner, cols);
    }
    for (; r < rows; ++r) {
        block_kernel<1>(x.data() + r * inner, w.data(), out.data() + r * cols, inner, cols);
    }
    return out;
}

Mat affine(const Mat &x, const Mat &w, const Mat &bias) {
    Mat out = matmul(x, w);
    out.rowwise() += bias.row(0);
    return out;
}

} // namespace sgdl
