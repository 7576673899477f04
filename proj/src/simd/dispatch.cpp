#include <atomic>
#include <cstdlib>
#include <string_view>

#include "zap/simd/kernels.hpp"

namespace zap::simd {

#ifndef ZAP_HAVE_AVX2
const KernelTable* avx2_kernels() { return nullptr; }
#endif

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return "scalar";
    case Isa::avx2:
      return "avx2";
  }
  return "unknown";
}

namespace {

const KernelTable* select_default() {
  if (const char* env = std::getenv("ZAP_ISA"); env && std::string_view(env) == "scalar") {
    return &scalar_kernels();
  }
  if (const auto* t = avx2_kernels()) return t;
  return &scalar_kernels();
}

std::atomic<const KernelTable*>& slot() {
  static std::atomic<const KernelTable*> current{select_default()};
  return current;
}

}  // namespace

const KernelTable& active() { return *slot().load(std::memory_order_acquire); }

bool set_active(Isa isa) {
  const KernelTable* t = isa == Isa::scalar ? &scalar_kernels() : avx2_kernels();
  if (!t) return false;
  slot().store(t, std::memory_order_release);
  return true;
}

}  // namespace zap::simd
