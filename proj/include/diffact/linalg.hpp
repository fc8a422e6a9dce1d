#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace diffact {

// Dense row-major kernels, templated on scalar so the gradient checker can run
// the whole model in double. Dot products use four independent accumulators,
// which lets the compiler vectorize the reduction without relaxing float
// semantics elsewhere.

template <typename Scalar>
inline Scalar dot_acc4(const Scalar* a, const Scalar* b, int n) {
    Scalar s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    int i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

// C[M,N] = A[M,K] * B[N,K]^T, i.e. rows of B are dotted against rows of A.
template <typename Scalar>
inline void matmul_nt(const Scalar* a, const Scalar* b, Scalar* c, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const Scalar* arow = a + static_cast<std::size_t>(i) * k;
        Scalar* crow = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            crow[j] = dot_acc4(arow, b + static_cast<std::size_t>(j) * k, k);
        }
    }
}

// C[M,N] += A[M,K] * B[K,N]. Broadcast-a / axpy-row form: the inner loop runs
// over independent output columns, so it vectorizes with strict float math.
template <typename Scalar>
inline void matmul_nn_acc(const Scalar* a, const Scalar* b, Scalar* c, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const Scalar* arow = a + static_cast<std::size_t>(i) * k;
        Scalar* crow = c + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            Scalar av = arow[p];
            const Scalar* brow = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename Scalar>
inline void matmul_nn(const Scalar* a, const Scalar* b, Scalar* c, int m, int n, int k) {
    for (std::size_t i = 0; i < static_cast<std::size_t>(m) * n; ++i) c[i] = 0;
    matmul_nn_acc(a, b, c, m, n, k);
}

// C[K,N] += A[M,K]^T * B[M,N]: the weight-gradient shape (activations^T * grad).
template <typename Scalar>
inline void matmul_tn_acc(const Scalar* a, const Scalar* b, Scalar* c, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const Scalar* arow = a + static_cast<std::size_t>(i) * k;
        const Scalar* brow = b + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            Scalar av = arow[p];
            Scalar* crow = c + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename Scalar>
inline void add_bias_rows(Scalar* x, const Scalar* bias, int m, int n) {
    for (int i = 0; i < m; ++i) {
        Scalar* row = x + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) row[j] += bias[j];
    }
}

// In-place row-wise softmax with max subtraction; accumulates in double.
template <typename Scalar>
inline void softmax_rows(Scalar* x, int m, int n) {
    for (int i = 0; i < m; ++i) {
        Scalar* row = x + static_cast<std::size_t>(i) * n;
        Scalar maxv = row[0];
        for (int j = 1; j < n; ++j) maxv = std::max(maxv, row[j]);
        double denom = 0.0;
        for (int j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - maxv);
            denom += static_cast<double>(row[j]);
        }
        Scalar inv = static_cast<Scalar>(1.0 / denom);
        for (int j = 0; j < n; ++j) row[j] *= inv;
    }
}

// Softmax of one row in double precision regardless of input scalar.
template <typename Scalar>
inline std::vector<double> softmax_row_double(const Scalar* row, int n) {
    if (n <= 0) throw std::invalid_argument("softmax over empty row");
    double maxv = static_cast<double>(row[0]);
    for (int j = 1; j < n; ++j) maxv = std::max(maxv, static_cast<double>(row[j]));
    std::vector<double> out(static_cast<std::size_t>(n));
    double denom = 0.0;
    for (int j = 0; j < n; ++j) {
        out[static_cast<std::size_t>(j)] = std::exp(static_cast<double>(row[j]) - maxv);
        denom += out[static_cast<std::size_t>(j)];
    }
    for (double& v : out) v /= denom;
    return out;
}

template <typename Scalar>
inline bool all_finite(const Scalar* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(static_cast<double>(x[i]))) return false;
    }
    return true;
}

}  // namespace diffact
