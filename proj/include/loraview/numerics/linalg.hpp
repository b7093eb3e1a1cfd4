#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "loraview/numerics/matrix.hpp"

namespace loraview {

namespace detail {

// Dot product of two float rows, accumulated in double. Four independent
// accumulators give the CPU some ILP without making the sum order depend on
// the compiler's vectorizer.
inline double dot_f64(const float* a, const float* b, std::size_t n) noexcept {
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    std::size_t k = 0;
    for (; k + 4 <= n; k += 4) {
        s0 += static_cast<double>(a[k]) * b[k];
        s1 += static_cast<double>(a[k + 1]) * b[k + 1];
        s2 += static_cast<double>(a[k + 2]) * b[k + 2];
        s3 += static_cast<double>(a[k + 3]) * b[k + 3];
    }
    for (; k < n; ++k) s0 += static_cast<double>(a[k]) * b[k];
    return (s0 + s1) + (s2 + s3);
}

}  // namespace detail

enum class Transpose { no, yes };

/// op(a) * op(b), where op optionally transposes. Storage is float32, every
/// reduction runs in double.
inline Matrix matmul(const Matrix& a, const Matrix& b, Transpose ta = Transpose::no,
                     Transpose tb = Transpose::no) {
    const std::size_t m = ta == Transpose::no ? a.rows() : a.cols();
    const std::size_t k = ta == Transpose::no ? a.cols() : a.rows();
    const std::size_t kb = tb == Transpose::no ? b.rows() : b.cols();
    const std::size_t n = tb == Transpose::no ? b.cols() : b.rows();
    if (k != kb) {
        throw ShapeError("matmul: inner dimensions differ (" + a.shape_str() + (ta == Transpose::yes ? "^T" : "") +
                         " * " + b.shape_str() + (tb == Transpose::yes ? "^T" : "") + ")");
    }
    // lhs: m x k rows, rhs: k x n rows. Each output row is accumulated in a
    // double buffer in strict k order, which vectorizes across j.
    const Matrix a_rows = ta == Transpose::no ? Matrix() : a.transposed();
    const Matrix b_rows = tb == Transpose::no ? Matrix() : b.transposed();
    const Matrix& lhs = ta == Transpose::no ? a : a_rows;
    const Matrix& rhs = tb == Transpose::no ? b : b_rows;

    Matrix c(m, n);
    std::vector<double> acc(n);
    for (std::size_t i = 0; i < m; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        const float* ai = lhs.data() + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = ai[p];
            if (aip == 0.0) continue;
            const float* bp = rhs.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) acc[j] += aip * static_cast<double>(bp[j]);
        }
        float* ci = c.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] = static_cast<float>(acc[j]);
    }
    return c;
}

/// Result of a (possibly truncated) singular value decomposition:
/// m ~= u * diag(s) * v^T with u: rows x r, v: cols x r, s descending.
struct Svd {
    Matrix u;
    std::vector<float> s;
    Matrix v;
};

inline Matrix reconstruct(const Svd& svd) {
    Matrix us = svd.u;
    for (std::size_t i = 0; i < us.rows(); ++i)
        for (std::size_t j = 0; j < us.cols(); ++j) us(i, j) *= svd.s[j];
    return matmul(us, svd.v, Transpose::no, Transpose::yes);
}

struct JacobiOptions {
    double tolerance = 1e-10;
    int max_sweeps = 30;
};

/// Rank-r truncated SVD by one-sided (Hestenes) Jacobi rotations.
///
/// Columns of a working copy are rotated pairwise until every pair is
/// orthogonal to within `tolerance` (relative to the column norms) or
/// `max_sweeps` is reached. By Eckart-Young the truncation to the r largest
/// singular triplets is the optimal rank-r approximation in Frobenius norm.
inline Svd svd_truncated(const Matrix& m, std::size_t rank, JacobiOptions opts = {}) {
    const std::size_t min_dim = std::min(m.rows(), m.cols());
    if (rank == 0 || rank > min_dim) {
        throw ParameterError("svd_truncated: rank " + std::to_string(rank) + " outside [1, " +
                             std::to_string(min_dim) + "] for " + m.shape_str());
    }
    // Work on the orientation with at least as many rows as columns.
    const bool flip = m.rows() < m.cols();
    const std::size_t rows = flip ? m.cols() : m.rows();
    const std::size_t cols = flip ? m.rows() : m.cols();

    // Column-major working copies in double.
    std::vector<std::vector<double>> w(cols, std::vector<double>(rows));
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) {
            if (flip) w[i][j] = m(i, j);
            else w[j][i] = m(i, j);
        }
    std::vector<std::vector<double>> v(cols, std::vector<double>(cols, 0.0));
    for (std::size_t j = 0; j < cols; ++j) v[j][j] = 1.0;

    auto rotate = [](std::vector<double>& x, std::vector<double>& y, double c, double s) {
        for (std::size_t i = 0; i < x.size(); ++i) {
            double xi = x[i], yi = y[i];
            x[i] = c * xi - s * yi;
            y[i] = s * xi + c * yi;
        }
    };

    for (int sweep = 0; sweep < opts.max_sweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < cols; ++p) {
            for (std::size_t q = p + 1; q < cols; ++q) {
                double alpha = 0, beta = 0, gamma = 0;
                for (std::size_t i = 0; i < rows; ++i) {
                    alpha += w[p][i] * w[p][i];
                    beta += w[q][i] * w[q][i];
                    gamma += w[p][i] * w[q][i];
                }
                if (gamma == 0.0 || std::abs(gamma) <= opts.tolerance * std::sqrt(alpha * beta)) continue;
                rotated = true;
                double zeta = (beta - alpha) / (2.0 * gamma);
                double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                double c = 1.0 / std::sqrt(1.0 + t * t);
                double s = c * t;
                rotate(w[p], w[q], c, s);
                rotate(v[p], v[q], c, s);
            }
        }
        if (!rotated) break;
    }

    std::vector<double> sigma(cols);
    for (std::size_t j = 0; j < cols; ++j) {
        double ss = 0;
        for (double x : w[j]) ss += x * x;
        sigma[j] = std::sqrt(ss);
    }
    std::vector<std::size_t> order(cols);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

    // left: rows x rank (normalized w columns), right: cols x rank (v columns)
    Matrix left(rows, rank), right(cols, rank);
    std::vector<float> s(rank);
    for (std::size_t k = 0; k < rank; ++k) {
        std::size_t j = order[k];
        s[k] = static_cast<float>(sigma[j]);
        double inv = sigma[j] > 0 ? 1.0 / sigma[j] : 0.0;
        for (std::size_t i = 0; i < rows; ++i) left(i, k) = static_cast<float>(w[j][i] * inv);
        // v is stored as rotated rows of the identity: v[j] holds column j of V.
        for (std::size_t i = 0; i < cols; ++i) right(i, k) = static_cast<float>(v[j][i]);
    }
    if (flip) return Svd{std::move(right), std::move(s), std::move(left)};
    return Svd{std::move(left), std::move(s), std::move(right)};
}

}  // namespace loraview
