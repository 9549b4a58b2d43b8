#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace resynlab {

// Dense row-major matrix of doubles. Kept deliberately small; only the
// operations the lab needs.
struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Mat() = default;
    Mat(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    double* row(std::size_t r) { return data.data() + r * cols; }
    const double* row(std::size_t r) const { return data.data() + r * cols; }

    std::size_t size() const { return data.size(); }

    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline void check_same_shape(const Mat& a, const Mat& b, const char* what) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

// c = a * b^T where a is [m,k] and b is [n,k]; result [m,n].
// Row-major friendly: both operands are traversed along contiguous rows;
// four output columns per pass to reuse the loaded a-row.
inline Mat matmul_nt(const Mat& a, const Mat& b) {
    if (a.cols != b.cols)
        throw std::invalid_argument("matmul_nt: inner dimension mismatch");
    Mat c(a.rows, b.rows);
    const std::size_t K = a.cols;
    const std::size_t nb4 = b.rows - (b.rows % 4);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* ar = a.row(i);
        double* cr = c.row(i);
        std::size_t j = 0;
        for (; j < nb4; j += 4) {
            const double* b0 = b.row(j);
            const double* b1 = b.row(j + 1);
            const double* b2 = b.row(j + 2);
            const double* b3 = b.row(j + 3);
            double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
            for (std::size_t k = 0; k < K; ++k) {
                const double av = ar[k];
                s0 += av * b0[k];
                s1 += av * b1[k];
                s2 += av * b2[k];
                s3 += av * b3[k];
            }
            cr[j] = s0;
            cr[j + 1] = s1;
            cr[j + 2] = s2;
            cr[j + 3] = s3;
        }
        for (; j < b.rows; ++j) {
            const double* br = b.row(j);
            double acc = 0.0;
            for (std::size_t k = 0; k < K; ++k) acc += ar[k] * br[k];
            cr[j] = acc;
        }
    }
    return c;
}

// c = a^T * b where a is [m,k], b is [m,n]; result [k,n].
// Two source rows per pass; the inner loop runs along contiguous rows of
// b and c.
inline Mat matmul_tn(const Mat& a, const Mat& b) {
    if (a.rows != b.rows)
        throw std::invalid_argument("matmul_tn: row count mismatch");
    Mat c(a.cols, b.cols);
    const std::size_t N = b.cols;
    std::size_t i = 0;
    for (; i + 2 <= a.rows; i += 2) {
        const double* a0 = a.row(i);
        const double* a1 = a.row(i + 1);
        const double* b0 = b.row(i);
        const double* b1 = b.row(i + 1);
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double w0 = a0[k];
            const double w1 = a1[k];
            if (w0 == 0.0 && w1 == 0.0) continue;
            double* cr = c.row(k);
            for (std::size_t j = 0; j < N; ++j) cr[j] += w0 * b0[j] + w1 * b1[j];
        }
    }
    for (; i < a.rows; ++i) {
        const double* ar = a.row(i);
        const double* br = b.row(i);
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = ar[k];
            if (aik == 0.0) continue;
            double* cr = c.row(k);
            for (std::size_t j = 0; j < N; ++j) cr[j] += aik * br[j];
        }
    }
    return c;
}

// c = a * b where a is [m,k], b is [k,n]; result [m,n].
inline Mat matmul(const Mat& a, const Mat& b) {
    if (a.cols != b.rows)
        throw std::invalid_argument("matmul: inner dimension mismatch");
    Mat c(a.rows, b.cols);
    const std::size_t N = b.cols;
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* ar = a.row(i);
        double* cr = c.row(i);
        std::size_t k = 0;
        for (; k + 2 <= a.cols; k += 2) {
            const double w0 = ar[k];
            const double w1 = ar[k + 1];
            if (w0 == 0.0 && w1 == 0.0) continue;
            const double* b0 = b.row(k);
            const double* b1 = b.row(k + 1);
            for (std::size_t j = 0; j < N; ++j) cr[j] += w0 * b0[j] + w1 * b1[j];
        }
        for (; k < a.cols; ++k) {
            const double aik = ar[k];
            if (aik == 0.0) continue;
            const double* br = b.row(k);
            for (std::size_t j = 0; j < N; ++j) cr[j] += aik * br[j];
        }
    }
    return c;
}

} // namespace resynlab
