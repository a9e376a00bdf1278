#pragma once
// Dense f64 inner-loop kernels with a scalar reference path and SIMD variants
// (AVX2+FMA on x86-64, NEON on aarch64) selected once at runtime.

#include <cstddef>
#include <string_view>

namespace mllmreid::kernels {

enum class Isa { scalar, avx2, neon };

std::string_view isa_name(Isa isa);

/// Function table implemented once per instruction set. Every entry has the
/// same contract as the scalar reference in kernels_scalar.cpp.
struct KernelTable {
  Isa isa;
  // C[m,n] += A[m,k] * B[k,n]. B and C are row-major with leading dims;
  // A(i,p) = a[i*a_rs + p*a_cs], so a transposed A needs no copy.
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t a_rs,
                  std::size_t a_cs, const double* b, std::size_t ldb, double* c, std::size_t ldc);
  double (*dot)(const double* x, const double* y, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // sum_i (x_i - y_i)^2
  double (*sq_dist)(const double* x, const double* y, std::size_t n);
};

const KernelTable& scalar_table();
// Null when the ISA was not compiled in for this target.
const KernelTable* avx2_table();
const KernelTable* neon_table();

bool isa_available(Isa isa);

/// The table used by the engine. Chosen on first use: the widest ISA the CPU
/// supports, unless MLLMREID_KERNELS=scalar|avx2|neon overrides it.
const KernelTable& active();

/// Force a table (tests and benchmarks). Throws if the ISA is unavailable.
void set_active(Isa isa);

/// C[m,n] += op(A) * op(B) through the active gemm_nn. A transposed B is
/// packed into a per-thread buffer.
void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda, bool trans_a,
          const double* b, std::size_t ldb, bool trans_b, double* c, std::size_t ldc);

}  // namespace mllmreid::kernels
