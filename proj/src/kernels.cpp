#include "hstgcn/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

#include <Eigen/Core>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace hstgcn::kernels {

int thread_count() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace serial {

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = accumulate ? c[i * n + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  }
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = accumulate ? c[p * n + j] : 0.0;
      for (std::size_t i = 0; i < m; ++i) s += a[i * k + p] * b[i * n + j];
      c[p * n + j] = s;
    }
  }
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = accumulate ? c[i * n + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
      c[i * n + j] = s;
    }
  }
}

void im2col_temporal(const double* x, std::size_t rows, std::size_t len, std::size_t cin,
                     std::size_t kt, double* out) {
  const std::size_t lout = len - kt + 1;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t t = 0; t < lout; ++t)
      for (std::size_t d = 0; d < kt; ++d)
        for (std::size_t ch = 0; ch < cin; ++ch)
          out[(r * lout + t) * kt * cin + d * cin + ch] = x[(r * len + t + d) * cin + ch];
}

void col2im_temporal_add(const double* col, std::size_t rows, std::size_t len, std::size_t cin,
                         std::size_t kt, double* dx) {
  const std::size_t lout = len - kt + 1;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t t = 0; t < lout; ++t)
      for (std::size_t d = 0; d < kt; ++d)
        for (std::size_t ch = 0; ch < cin; ++ch)
          dx[(r * len + t + d) * cin + ch] += col[(r * lout + t) * kt * cin + d * cin + ch];
}

void chebyshev_basis(const double* op, std::size_t n, const double* x, std::size_t cols,
                     std::size_t order, double* const* out) {
  const std::size_t sz = n * cols;
  std::copy(x, x + sz, out[0]);
  if (order > 1) gemm(op, x, out[1], n, n, cols, false);
  for (std::size_t k = 2; k < order; ++k) {
    gemm(op, out[k - 1], out[k], n, n, cols, false);
    for (std::size_t i = 0; i < sz; ++i) out[k][i] = 2.0 * out[k][i] - out[k - 2][i];
  }
}

}  // namespace serial

namespace parallel {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

// Output rows are split into fixed bands; Eigen does the band product on one
// thread so the per-element reduction order never depends on the team size.
constexpr std::size_t kBand = 64;

}  // namespace

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n, bool accumulate) {
  const MapC B(b, Eigen::Index(k), Eigen::Index(n));
  const std::ptrdiff_t bands = static_cast<std::ptrdiff_t>((m + kBand - 1) / kBand);
#pragma omp parallel for schedule(static) if (m * k * n > 262144)
  for (std::ptrdiff_t t = 0; t < bands; ++t) {
    const std::size_t lo = static_cast<std::size_t>(t) * kBand;
    const std::size_t rows = std::min(kBand, m - lo);
    const MapC A(a + lo * k, Eigen::Index(rows), Eigen::Index(k));
    Map C(c + lo * n, Eigen::Index(rows), Eigen::Index(n));
    if (accumulate)
      C.noalias() += A * B;
    else
      C.noalias() = A * B;
  }
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  // Bands over the k output rows; each walks all of m.
  const MapC Afull(a, Eigen::Index(m), Eigen::Index(k));
  const MapC B(b, Eigen::Index(m), Eigen::Index(n));
  const std::ptrdiff_t bands = static_cast<std::ptrdiff_t>((k + kBand - 1) / kBand);
#pragma omp parallel for schedule(static) if (m * k * n > 262144)
  for (std::ptrdiff_t t = 0; t < bands; ++t) {
    const std::size_t lo = static_cast<std::size_t>(t) * kBand;
    const std::size_t rows = std::min(kBand, k - lo);
    Map C(c + lo * n, Eigen::Index(rows), Eigen::Index(n));
    const auto A = Afull.middleCols(Eigen::Index(lo), Eigen::Index(rows));
    if (accumulate)
      C.noalias() += A.transpose() * B;
    else
      C.noalias() = A.transpose() * B;
  }
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  const MapC B(b, Eigen::Index(n), Eigen::Index(k));
  const std::ptrdiff_t bands = static_cast<std::ptrdiff_t>((m + kBand - 1) / kBand);
#pragma omp parallel for schedule(static) if (m * k * n > 262144)
  for (std::ptrdiff_t t = 0; t < bands; ++t) {
    const std::size_t lo = static_cast<std::size_t>(t) * kBand;
    const std::size_t rows = std::min(kBand, m - lo);
    const MapC A(a + lo * k, Eigen::Index(rows), Eigen::Index(k));
    Map C(c + lo * n, Eigen::Index(rows), Eigen::Index(n));
    if (accumulate)
      C.noalias() += A * B.transpose();
    else
      C.noalias() = A * B.transpose();
  }
}

void im2col_temporal(const double* x, std::size_t rows, std::size_t len, std::size_t cin,
                     std::size_t kt, double* out) {
  const std::size_t lout = len - kt + 1;
  const std::size_t span = kt * cin;
#pragma omp parallel for schedule(static) if (rows * lout * span > 65536)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
    const std::size_t ru = static_cast<std::size_t>(r);
    for (std::size_t t = 0; t < lout; ++t)
      std::memcpy(out + (ru * lout + t) * span, x + (ru * len + t) * cin, span * sizeof(double));
  }
}

void col2im_temporal_add(const double* col, std::size_t rows, std::size_t len, std::size_t cin,
                         std::size_t kt, double* dx) {
  const std::size_t lout = len - kt + 1;
  const std::size_t span = kt * cin;
#pragma omp parallel for schedule(static) if (rows * lout * span > 65536)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
    const std::size_t ru = static_cast<std::size_t>(r);
    for (std::size_t t = 0; t < lout; ++t) {
      const double* src = col + (ru * lout + t) * span;
      double* dst = dx + (ru * len + t) * cin;
#pragma omp simd
      for (std::size_t i = 0; i < span; ++i) dst[i] += src[i];
    }
  }
}

void chebyshev_basis(const double* op, std::size_t n, const double* x, std::size_t cols,
                     std::size_t order, double* const* out) {
  const std::size_t sz = n * cols;
  std::copy(x, x + sz, out[0]);
  if (order > 1) gemm(op, x, out[1], n, n, cols, false);
  for (std::size_t k = 2; k < order; ++k) {
    gemm(op, out[k - 1], out[k], n, n, cols, false);
    double* cur = out[k];
    const double* prev2 = out[k - 2];
#pragma omp parallel for simd schedule(static) if (sz > 65536)
    for (std::size_t i = 0; i < sz; ++i) cur[i] = 2.0 * cur[i] - prev2[i];
  }
}

void chebyshev_adjoint_add(const double* op, std::size_t n, const double* const* g,
                           std::size_t cols, std::size_t order, double* dx, double* scratch) {
  // Clenshaw: b_k = g_k + 2·op·b_{k+1} − b_{k+2}; result = g_0 + op·b_1 − b_2.
  const std::size_t sz = n * cols;
  double* b1 = scratch;           // b_{k+1}
  double* b2 = scratch + sz;      // b_{k+2}
  double* tmp = scratch + 2 * sz;
  std::fill(b1, b1 + sz, 0.0);
  std::fill(b2, b2 + sz, 0.0);
  for (std::size_t k = order; k-- > 1;) {
    gemm(op, b1, tmp, n, n, cols, false);
    const double* gk = g[k];
    for (std::size_t i = 0; i < sz; ++i) tmp[i] = gk[i] + 2.0 * tmp[i] - b2[i];
    std::swap(b2, b1);  // b2 <- old b1
    std::swap(b1, tmp); // b1 <- new b_k
  }
  gemm(op, b1, tmp, n, n, cols, false);
  const double* g0 = g[0];
  for (std::size_t i = 0; i < sz; ++i) dx[i] += g0[i] + tmp[i] - b2[i];
}

}  // namespace parallel

}  // namespace hstgcn::kernels
