#include "minimt/kernels.hpp"

#include <algorithm>
#include <vector>

namespace minimt::kernels {

namespace {
constexpr std::size_t kColBlock = 256;
}  // namespace

void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  // Column blocks keep a slice of B hot across rows; every element still
  // sees the same k-ordered sequence of multiply-adds.
  for (std::size_t j0 = 0; j0 < n; j0 += kColBlock) {
    const std::size_t width = std::min(kColBlock, n - j0);
    for (std::size_t i = 0; i < m; ++i) {
      const double* arow = a + i * k;
      double* crow = c + i * n + j0;
      for (std::size_t p = 0; p < k; ++p) {
        const double ap = arow[p];
        const double* brow = b + p * n + j0;
        for (std::size_t j = 0; j < width; ++j) crow[j] += ap * brow[j];
      }
    }
  }
}

void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t n, std::size_t k) {
  // Transpose B once so the inner loop runs over contiguous memory.
  std::vector<double> bt(n * k);
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  }
  gemm_nn(a, bt.data(), c, m, n, k, /*accumulate=*/true);
}

void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double ap = arow[p];
      if (ap == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += ap * brow[j];
    }
  }
}

}  // namespace minimt::kernels
