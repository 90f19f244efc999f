#pragma once

// Dense compute kernels used by the autodiff engine and the spectral module.
//
// Two implementations share one signature set:
//   serial::   straightforward loops, kept as the reference for tests
//   parallel:: OpenMP-parallel, register-blocked versions used in production
//
// Every parallel kernel partitions its *output* across threads and sums each
// output element in a fixed order, so results do not depend on thread count.
// All matrices are row-major.

#include <cstddef>

namespace hstgcn::kernels {

namespace serial {

/// C[M×N] = (accumulate ? C : 0) + A[M×K] · B[K×N]
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n, bool accumulate);

/// C[K×N] = (accumulate ? C : 0) + A[M×K]ᵀ · B[M×N]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate);

/// C[M×N] = (accumulate ? C : 0) + A[M×K] · B[N×K]ᵀ
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate);

/// Unfolds valid temporal windows: x is rows×len×cin, out is
/// (rows·(len−kt+1)) × (kt·cin).
void im2col_temporal(const double* x, std::size_t rows, std::size_t len, std::size_t cin,
                     std::size_t kt, double* out);

/// Adjoint of im2col_temporal, accumulated into dx.
void col2im_temporal_add(const double* col, std::size_t rows, std::size_t len, std::size_t cin,
                         std::size_t kt, double* dx);

/// Writes T_k(op)·x for k = 0..order−1 into out[k] (each n×cols). op is n×n.
void chebyshev_basis(const double* op, std::size_t n, const double* x, std::size_t cols,
                     std::size_t order, double* const* out);

}  // namespace serial

namespace parallel {

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n, bool accumulate);
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate);
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate);
void im2col_temporal(const double* x, std::size_t rows, std::size_t len, std::size_t cin,
                     std::size_t kt, double* out);
void col2im_temporal_add(const double* col, std::size_t rows, std::size_t len, std::size_t cin,
                         std::size_t kt, double* dx);
void chebyshev_basis(const double* op, std::size_t n, const double* x, std::size_t cols,
                     std::size_t order, double* const* out);

/// Σ_k T_k(op)·g[k] for a symmetric op, by Clenshaw's recurrence. Accumulates
/// into dx (n×cols). scratch must hold 3·n·cols doubles.
void chebyshev_adjoint_add(const double* op, std::size_t n, const double* const* g,
                           std::size_t cols, std::size_t order, double* dx, double* scratch);

}  // namespace parallel

/// Number of OpenMP threads the parallel kernels will use (1 without OpenMP).
int thread_count();

}  // namespace hstgcn::kernels
