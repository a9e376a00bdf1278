#include "mllmreid/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)
#include <immintrin.h>

#include <vector>

#define MLLMREID_AVX2 __attribute__((target("avx2,fma")))

namespace mllmreid::kernels {
namespace {

MLLMREID_AVX2 inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

MLLMREID_AVX2 void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256d y0 = _mm256_loadu_pd(y + i);
    __m256d y1 = _mm256_loadu_pd(y + i + 4);
    y0 = _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), y0);
    y1 = _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i + 4), y1);
    _mm256_storeu_pd(y + i, y0);
    _mm256_storeu_pd(y + i + 4, y1);
  }
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

// 6x8 register tile of C accumulated over the full k extent. Named
// accumulators keep GCC from spilling them through the stack.
MLLMREID_AVX2 inline void tile6x8(std::size_t k, const double* a, std::size_t a_rs, std::size_t a_cs,
                                  const double* b, std::size_t ldb, double* c, std::size_t ldc) {
  double* c0 = c;
  double* c1 = c + ldc;
  double* c2 = c + 2 * ldc;
  double* c3 = c + 3 * ldc;
  double* c4 = c + 4 * ldc;
  double* c5 = c + 5 * ldc;
  __m256d x00 = _mm256_loadu_pd(c0), x01 = _mm256_loadu_pd(c0 + 4);
  __m256d x10 = _mm256_loadu_pd(c1), x11 = _mm256_loadu_pd(c1 + 4);
  __m256d x20 = _mm256_loadu_pd(c2), x21 = _mm256_loadu_pd(c2 + 4);
  __m256d x30 = _mm256_loadu_pd(c3), x31 = _mm256_loadu_pd(c3 + 4);
  __m256d x40 = _mm256_loadu_pd(c4), x41 = _mm256_loadu_pd(c4 + 4);
  __m256d x50 = _mm256_loadu_pd(c5), x51 = _mm256_loadu_pd(c5 + 4);
  const double* a0 = a;
  const double* a1 = a + a_rs;
  const double* a2 = a + 2 * a_rs;
  const double* a3 = a + 3 * a_rs;
  const double* a4 = a + 4 * a_rs;
  const double* a5 = a + 5 * a_rs;
  for (std::size_t p = 0; p < k; ++p) {
    const std::size_t o = p * a_cs;
    const __m256d b0 = _mm256_loadu_pd(b + p * ldb);
    const __m256d b1 = _mm256_loadu_pd(b + p * ldb + 4);
    __m256d av = _mm256_broadcast_sd(a0 + o);
    x00 = _mm256_fmadd_pd(av, b0, x00), x01 = _mm256_fmadd_pd(av, b1, x01);
    av = _mm256_broadcast_sd(a1 + o);
    x10 = _mm256_fmadd_pd(av, b0, x10), x11 = _mm256_fmadd_pd(av, b1, x11);
    av = _mm256_broadcast_sd(a2 + o);
    x20 = _mm256_fmadd_pd(av, b0, x20), x21 = _mm256_fmadd_pd(av, b1, x21);
    av = _mm256_broadcast_sd(a3 + o);
    x30 = _mm256_fmadd_pd(av, b0, x30), x31 = _mm256_fmadd_pd(av, b1, x31);
    av = _mm256_broadcast_sd(a4 + o);
    x40 = _mm256_fmadd_pd(av, b0, x40), x41 = _mm256_fmadd_pd(av, b1, x41);
    av = _mm256_broadcast_sd(a5 + o);
    x50 = _mm256_fmadd_pd(av, b0, x50), x51 = _mm256_fmadd_pd(av, b1, x51);
  }
  _mm256_storeu_pd(c0, x00), _mm256_storeu_pd(c0 + 4, x01);
  _mm256_storeu_pd(c1, x10), _mm256_storeu_pd(c1 + 4, x11);
  _mm256_storeu_pd(c2, x20), _mm256_storeu_pd(c2 + 4, x21);
  _mm256_storeu_pd(c3, x30), _mm256_storeu_pd(c3 + 4, x31);
  _mm256_storeu_pd(c4, x40), _mm256_storeu_pd(c4 + 4, x41);
  _mm256_storeu_pd(c5, x50), _mm256_storeu_pd(c5 + 4, x51);
}

// One row of C: four 4-wide accumulators per pass, axpy-free.
MLLMREID_AVX2 inline void row1(std::size_t n, std::size_t k, const double* a, std::size_t a_cs, const double* b,
                               std::size_t ldb, double* c) {
  std::size_t j = 0;
  for (; j + 16 <= n; j += 16) {
    __m256d x0 = _mm256_loadu_pd(c + j), x1 = _mm256_loadu_pd(c + j + 4);
    __m256d x2 = _mm256_loadu_pd(c + j + 8), x3 = _mm256_loadu_pd(c + j + 12);
    for (std::size_t p = 0; p < k; ++p) {
      const __m256d av = _mm256_broadcast_sd(a + p * a_cs);
      const double* bp = b + p * ldb + j;
      x0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(bp), x0);
      x1 = _mm256_fmadd_pd(av, _mm256_loadu_pd(bp + 4), x1);
      x2 = _mm256_fmadd_pd(av, _mm256_loadu_pd(bp + 8), x2);
      x3 = _mm256_fmadd_pd(av, _mm256_loadu_pd(bp + 12), x3);
    }
    _mm256_storeu_pd(c + j, x0), _mm256_storeu_pd(c + j + 4, x1);
    _mm256_storeu_pd(c + j + 8, x2), _mm256_storeu_pd(c + j + 12, x3);
  }
  for (; j + 4 <= n; j += 4) {
    __m256d x0 = _mm256_loadu_pd(c + j);
    for (std::size_t p = 0; p < k; ++p)
      x0 = _mm256_fmadd_pd(_mm256_broadcast_sd(a + p * a_cs), _mm256_loadu_pd(b + p * ldb + j), x0);
    _mm256_storeu_pd(c + j, x0);
  }
  for (; j < n; ++j) {
    double s = c[j];
    for (std::size_t p = 0; p < k; ++p) s += a[p * a_cs] * b[p * ldb + j];
    c[j] = s;
  }
}

MLLMREID_AVX2 void gemm_nn_avx2(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t a_rs,
                                std::size_t a_cs, const double* b, std::size_t ldb, double* c, std::size_t ldc) {
  const std::size_t m6 = m - m % 6;
  const std::size_t n8 = n - n % 8;
  if (m6 > 0 && n8 > 0) {
    // Column panels of B are packed contiguously so the tiles stream them from cache.
    thread_local std::vector<double> panel;
    panel.resize(k * 8);
    for (std::size_t j = 0; j < n8; j += 8) {
      for (std::size_t p = 0; p < k; ++p)
        _mm256_storeu_pd(panel.data() + p * 8, _mm256_loadu_pd(b + p * ldb + j)),
            _mm256_storeu_pd(panel.data() + p * 8 + 4, _mm256_loadu_pd(b + p * ldb + j + 4));
      for (std::size_t i = 0; i < m6; i += 6) tile6x8(k, a + i * a_rs, a_rs, a_cs, panel.data(), 8, c + i * ldc + j, ldc);
    }
  }
  if (n8 < n)
    for (std::size_t i = 0; i < m6; ++i) row1(n - n8, k, a + i * a_rs, a_cs, b + n8, ldb, c + i * ldc + n8);
  for (std::size_t i = m6; i < m; ++i) row1(n, k, a + i * a_rs, a_cs, b, ldb, c + i * ldc);
}

MLLMREID_AVX2 double dot_avx2(const double* x, const double* y, std::size_t n) {
  __m256d s0 = _mm256_setzero_pd();
  __m256d s1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    s0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), s0);
    s1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), s1);
  }
  for (; i + 4 <= n; i += 4) s0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), s0);
  double s = hsum(_mm256_add_pd(s0, s1));
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

MLLMREID_AVX2 double sq_dist_avx2(const double* x, const double* y, std::size_t n) {
  __m256d s0 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d d = _mm256_sub_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i));
    s0 = _mm256_fmadd_pd(d, d, s0);
  }
  double s = hsum(s0);
  for (; i < n; ++i) {
    const double d = x[i] - y[i];
    s += d * d;
  }
  return s;
}

}  // namespace

const KernelTable* avx2_table() {
  static const KernelTable table{Isa::avx2, gemm_nn_avx2, dot_avx2, axpy_avx2, sq_dist_avx2};
  return &table;
}

}  // namespace mllmreid::kernels

#else

namespace mllmreid::kernels {
const KernelTable* avx2_table() { return nullptr; }
}  // namespace mllmreid::kernels

#endif
