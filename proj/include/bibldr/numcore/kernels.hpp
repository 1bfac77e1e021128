#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

namespace bibldr::numcore::kernels {

// Every output element of the products below is accumulated over the inner
// index in ascending order, independent of how many rows the operands have.
// Batched and single-row evaluation therefore agree bit for bit.

/// C[m x n] += A[m x k] * B[k x n], all row-major. Four rows of C share each
/// streamed row of B.
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                     std::size_t n) {
    constexpr std::size_t kColBlock = 256;
    for (std::size_t j0 = 0; j0 < n; j0 += kColBlock) {
        const std::size_t w = std::min(n, j0 + kColBlock) - j0;
        std::size_t i = 0;
        for (; i + 4 <= m; i += 4) {
            double* __restrict c0 = c + i * n + j0;
            double* __restrict c1 = c0 + n;
            double* __restrict c2 = c1 + n;
            double* __restrict c3 = c2 + n;
            const double* a0 = a + i * k;
            for (std::size_t l = 0; l < k; ++l) {
                const double v0 = a0[l], v1 = a0[k + l], v2 = a0[2 * k + l], v3 = a0[3 * k + l];
                const double* __restrict brow = b + l * n + j0;
                for (std::size_t j = 0; j < w; ++j) {
                    const double bv = brow[j];
                    c0[j] += v0 * bv;
                    c1[j] += v1 * bv;
                    c2[j] += v2 * bv;
                    c3[j] += v3 * bv;
                }
            }
        }
        for (; i < m; ++i) {
            double* __restrict crow = c + i * n + j0;
            const double* arow = a + i * k;
            for (std::size_t l = 0; l < k; ++l) {
                const double av = arow[l];
                const double* __restrict brow = b + l * n + j0;
                for (std::size_t j = 0; j < w; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

/// Row-major transpose: out[c x r] = in[r x c]^T.
inline void transpose(const double* in, double* out, std::size_t r, std::size_t c) {
    constexpr std::size_t kTile = 32;
    for (std::size_t i0 = 0; i0 < r; i0 += kTile) {
        for (std::size_t j0 = 0; j0 < c; j0 += kTile) {
            const std::size_t i1 = std::min(r, i0 + kTile);
            const std::size_t j1 = std::min(c, j0 + kTile);
            for (std::size_t i = i0; i < i1; ++i)
                for (std::size_t j = j0; j < j1; ++j) out[j * r + i] = in[i * c + j];
        }
    }
}

/// C[m x n] += A[m x k] * B[n x k]^T.
inline void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                        std::size_t n) {
    std::vector<double> bt(k * n);
    transpose(b, bt.data(), n, k);
    gemm_acc(a, bt.data(), c, m, k, n);
}

/// C[k x n] += A[m x k]^T * B[m x n]. Rows of A and B are consumed in
/// ascending order, four at a time.
inline void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                        std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        const double* a0 = a + i * k;
        const double* __restrict b0 = b + i * n;
        const double* __restrict b1 = b0 + n;
        const double* __restrict b2 = b1 + n;
        const double* __restrict b3 = b2 + n;
        for (std::size_t l = 0; l < k; ++l) {
            const double v0 = a0[l], v1 = a0[k + l], v2 = a0[2 * k + l], v3 = a0[3 * k + l];
            if (v0 == 0.0 && v1 == 0.0 && v2 == 0.0 && v3 == 0.0) continue;
            double* __restrict crow = c + l * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] = (((crow[j] + v0 * b0[j]) + v1 * b1[j]) + v2 * b2[j]) + v3 * b3[j];
        }
    }
    for (; i < m; ++i) {
        const double* arow = a + i * k;
        const double* __restrict brow = b + i * n;
        for (std::size_t l = 0; l < k; ++l) {
            const double av = arow[l];
            if (av == 0.0) continue;
            double* __restrict crow = c + l * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace bibldr::numcore::kernels
