#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

namespace flareon::gemm {

namespace detail {

inline constexpr std::size_t kRowTile = 4;
inline constexpr std::size_t kColTile = 64;
inline constexpr std::size_t kDepthTile = 256;

// Full register tile. Each accumulator sees the k terms in ascending
// order, which keeps results independent of the tiling around it.
template <std::size_t MR, std::size_t NR>
inline void tile_kernel(std::size_t k0, std::size_t k1, const float* a, std::size_t lda, const float* b,
                        std::size_t ldb, float* c, std::size_t ldc) {
  float acc[MR][NR];
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t j = 0; j < NR; ++j) acc[r][j] = c[r * ldc + j];
  for (std::size_t k = k0; k < k1; ++k) {
    const float* brow = b + k * ldb;
    for (std::size_t r = 0; r < MR; ++r) {
      const float av = a[r * lda + k];
      for (std::size_t j = 0; j < NR; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t j = 0; j < NR; ++j) c[r * ldc + j] = acc[r][j];
}

inline void edge_kernel(std::size_t mr, std::size_t nr, std::size_t k0, std::size_t k1, const float* a,
                        std::size_t lda, const float* b, std::size_t ldb, float* c, std::size_t ldc) {
  for (std::size_t r = 0; r < mr; ++r) {
    float* crow = c + r * ldc;
    for (std::size_t k = k0; k < k1; ++k) {
      const float av = a[r * lda + k];
      const float* brow = b + k * ldb;
      for (std::size_t j = 0; j < nr; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

/// C (M x N) = A (M x K) * B (K x N) [+ C if accumulate]; all row-major
/// and densely packed. Summation order per output is fixed (ascending k),
/// so results are bit-reproducible for identical inputs.
inline void matmul(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
                   bool accumulate = false) {
  using namespace detail;
  if (!accumulate) std::fill(c, c + m * n, 0.0f);
  if (m == 0 || n == 0 || k == 0) return;
  for (std::size_t k0 = 0; k0 < k; k0 += kDepthTile) {
    const std::size_t k1 = std::min(k, k0 + kDepthTile);
    for (std::size_t j0 = 0; j0 < n; j0 += kColTile) {
      const std::size_t nr = std::min(kColTile, n - j0);
      for (std::size_t i0 = 0; i0 < m; i0 += kRowTile) {
        const std::size_t mr = std::min(kRowTile, m - i0);
        const float* ap = a + i0 * k;
        const float* bp = b + j0;
        float* cp = c + i0 * n + j0;
        if (mr == kRowTile && nr == kColTile) {
          tile_kernel<kRowTile, kColTile>(k0, k1, ap, k, bp, n, cp, n);
        } else if (mr == kRowTile && nr == 32) {
          tile_kernel<kRowTile, 32>(k0, k1, ap, k, bp, n, cp, n);
        } else if (mr == kRowTile && nr == 16) {
          tile_kernel<kRowTile, 16>(k0, k1, ap, k, bp, n, cp, n);
        } else {
          edge_kernel(mr, nr, k0, k1, ap, k, bp, n, cp, n);
        }
      }
    }
  }
}

/// Row-major transpose of an R x C matrix into C x R.
inline void transpose(std::size_t rows, std::size_t cols, const float* src, float* dst) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += kBlock)
    for (std::size_t c0 = 0; c0 < cols; c0 += kBlock) {
      const std::size_t r1 = std::min(rows, r0 + kBlock);
      const std::size_t c1 = std::min(cols, c0 + kBlock);
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
    }
}

}  // namespace flareon::gemm
