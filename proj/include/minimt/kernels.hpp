#pragma once

#include <cstddef>

namespace minimt::kernels {

// C[m,n] (+)= A[m,k] * B[k,n]. Each output element is accumulated over k in
// ascending order, independent of m, so a row's result does not depend on
// how many other rows share the call.
void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate);

// C[m,k] += A[m,n] * B[k,n]^T
void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t n, std::size_t k);

// C[k,n] += A[m,k]^T * B[m,n]
void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n);

}  // namespace minimt::kernels
