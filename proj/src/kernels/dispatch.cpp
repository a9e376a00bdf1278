#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <vector>

#include "mllmreid/kernels.hpp"

namespace mllmreid::kernels {
namespace {

bool cpu_supports(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return true;
    case Isa::avx2:
#if defined(__x86_64__) || defined(_M_X64)
      return avx2_table() != nullptr && __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
    case Isa::neon:
      return neon_table() != nullptr;
  }
  return false;
}

const KernelTable* table_for(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return &scalar_table();
    case Isa::avx2:
      return avx2_table();
    case Isa::neon:
      return neon_table();
  }
  return nullptr;
}

const KernelTable* pick_default() {
  if (const char* env = std::getenv("MLLMREID_KERNELS")) {
    const std::string want(env);
    for (Isa isa : {Isa::scalar, Isa::avx2, Isa::neon}) {
      if (want == isa_name(isa)) {
        if (!cpu_supports(isa)) throw std::runtime_error("MLLMREID_KERNELS=" + want + " is not supported here");
        return table_for(isa);
      }
    }
    throw std::runtime_error("MLLMREID_KERNELS: unknown kernel set '" + want + "'");
  }
  if (cpu_supports(Isa::avx2)) return avx2_table();
  if (cpu_supports(Isa::neon)) return neon_table();
  return &scalar_table();
}

std::atomic<const KernelTable*>& slot() {
  static std::atomic<const KernelTable*> current{pick_default()};
  return current;
}

}  // namespace

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return "scalar";
    case Isa::avx2:
      return "avx2";
    case Isa::neon:
      return "neon";
  }
  return "unknown";
}

bool isa_available(Isa isa) { return cpu_supports(isa); }

const KernelTable& active() { return *slot().load(std::memory_order_relaxed); }

void set_active(Isa isa) {
  if (!cpu_supports(isa)) throw std::runtime_error("kernel set " + std::string(isa_name(isa)) + " unavailable");
  slot().store(table_for(isa), std::memory_order_relaxed);
}

void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda, bool trans_a,
          const double* b, std::size_t ldb, bool trans_b, double* c, std::size_t ldc) {
  if (m == 0 || n == 0 || k == 0) return;
  const KernelTable& kt = active();
  // a is [m, k] or, transposed, [k, m]
  const std::size_t a_rs = trans_a ? 1 : lda;
  const std::size_t a_cs = trans_a ? lda : 1;
  if (trans_b) {
    // b is stored [n, k]; small n favours row dots over packing
    if (n <= 4 && !trans_a) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) c[i * ldc + j] += kt.dot(a + i * lda, b + j * ldb, k);
      return;
    }
    thread_local std::vector<double> packed_b;
    packed_b.resize(k * n);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) packed_b[p * n + j] = b[j * ldb + p];
    kt.gemm_nn(m, n, k, a, a_rs, a_cs, packed_b.data(), n, c, ldc);
    return;
  }
  kt.gemm_nn(m, n, k, a, a_rs, a_cs, b, ldb, c, ldc);
}

}  // namespace mllmreid::kernels
