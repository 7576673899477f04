// AVX2 variants. Compiled with -mavx2 only; FMA is deliberately not used so
// results match the scalar reference bit for bit.

#include "zap/simd/kernels.hpp"

#include <immintrin.h>

#include <algorithm>

namespace zap::simd {
namespace {

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 sh = _mm_movehdup_ps(lo);
  lo = _mm_add_ps(lo, sh);
  sh = _mm_movehl_ps(sh, lo);
  lo = _mm_add_ss(lo, sh);
  return _mm_cvtss_f32(lo);
}

inline bool tap_in_bounds(const ConvGeometry& g, std::size_t oy, std::size_t ox, std::size_t i, std::size_t j,
                          std::size_t& off) {
  const auto xx = static_cast<std::ptrdiff_t>(ox * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
  const auto yy = static_cast<std::ptrdiff_t>(oy * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
  if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(g.w_in)) return false;
  if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(g.h_in)) return false;
  off = static_cast<std::size_t>(yy) * g.w_in + static_cast<std::size_t>(xx);
  return true;
}

void conv_pixel(const ConvGeometry& g, const float* in, const float* w, std::size_t oy, std::size_t ox,
                float* out) {
  const std::size_t plane = g.h_in * g.w_in;
  const std::size_t co = g.c_out;
  std::size_t z = 0;
  for (; z + 32 <= co; z += 32) {
    __m256 a0 = _mm256_setzero_ps(), a1 = _mm256_setzero_ps();
    __m256 a2 = _mm256_setzero_ps(), a3 = _mm256_setzero_ps();
    for (std::size_t i = 0; i < g.k; ++i) {
      for (std::size_t j = 0; j < g.k; ++j) {
        std::size_t off;
        if (!tap_in_bounds(g, oy, ox, i, j, off)) continue;
        const float* wk = w + (i * g.k + j) * g.c_in * co + z;
        for (std::size_t c = 0; c < g.c_in; ++c) {
          const __m256 x = _mm256_set1_ps(in[c * plane + off]);
          const float* wr = wk + c * co;
          a0 = _mm256_add_ps(a0, _mm256_mul_ps(x, _mm256_loadu_ps(wr)));
          a1 = _mm256_add_ps(a1, _mm256_mul_ps(x, _mm256_loadu_ps(wr + 8)));
          a2 = _mm256_add_ps(a2, _mm256_mul_ps(x, _mm256_loadu_ps(wr + 16)));
          a3 = _mm256_add_ps(a3, _mm256_mul_ps(x, _mm256_loadu_ps(wr + 24)));
        }
      }
    }
    _mm256_storeu_ps(out + z, a0);
    _mm256_storeu_ps(out + z + 8, a1);
    _mm256_storeu_ps(out + z + 16, a2);
    _mm256_storeu_ps(out + z + 24, a3);
  }
  for (; z + 8 <= co; z += 8) {
    __m256 a0 = _mm256_setzero_ps();
    for (std::size_t i = 0; i < g.k; ++i) {
      for (std::size_t j = 0; j < g.k; ++j) {
        std::size_t off;
        if (!tap_in_bounds(g, oy, ox, i, j, off)) continue;
        const float* wk = w + (i * g.k + j) * g.c_in * co + z;
        for (std::size_t c = 0; c < g.c_in; ++c) {
          const __m256 x = _mm256_set1_ps(in[c * plane + off]);
          a0 = _mm256_add_ps(a0, _mm256_mul_ps(x, _mm256_loadu_ps(wk + c * co)));
        }
      }
    }
    _mm256_storeu_ps(out + z, a0);
  }
  for (; z < co; ++z) {
    float acc = 0.0f;
    for (std::size_t i = 0; i < g.k; ++i) {
      for (std::size_t j = 0; j < g.k; ++j) {
        std::size_t off;
        if (!tap_in_bounds(g, oy, ox, i, j, off)) continue;
        const float* wk = w + (i * g.k + j) * g.c_in * co + z;
        for (std::size_t c = 0; c < g.c_in; ++c) acc = acc + in[c * plane + off] * wk[c * co];
      }
    }
    out[z] = acc;
  }
}

void axpy(float a, const float* x, float* y, std::size_t n) {
  const __m256 av = _mm256_set1_ps(a);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(y + i), _mm256_mul_ps(av, _mm256_loadu_ps(x + i))));
  }
  for (; i < n; ++i) y[i] = y[i] + a * x[i];
}

float dot(const float* a, const float* b, std::size_t n) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc = _mm256_add_ps(acc, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  }
  float s = hsum(acc);
  for (; i < n; ++i) s = s + a[i] * b[i];
  return s;
}

void conv_pixel_backward(const ConvGeometry& g, const float* in, const float* w, std::size_t oy, std::size_t ox,
                         const float* gout, float* gin, float* gw) {
  const std::size_t plane = g.h_in * g.w_in;
  for (std::size_t i = 0; i < g.k; ++i) {
    for (std::size_t j = 0; j < g.k; ++j) {
      std::size_t off;
      if (!tap_in_bounds(g, oy, ox, i, j, off)) continue;
      for (std::size_t c = 0; c < g.c_in; ++c) {
        const std::size_t row = ((i * g.k + j) * g.c_in + c) * g.c_out;
        axpy(in[c * plane + off], gout, gw + row, g.c_out);
        gin[c * plane + off] += dot(w + row, gout, g.c_out);
      }
    }
  }
}

void dw_plane(const float* in, std::size_t h, std::size_t w, const float* taps, std::size_t k, float* out) {
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  const auto wi = static_cast<std::ptrdiff_t>(w);
  std::fill(out, out + h * w, 0.0f);
  for (std::size_t y = 0; y < h; ++y) {
    float* orow = out + y * w;
    for (std::size_t i = 0; i < k; ++i) {
      const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(i) - pad;
      const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -shift);
      const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(wi, wi - shift);
      for (std::size_t j = 0; j < k; ++j) {
        const auto yy = static_cast<std::ptrdiff_t>(y + j) - pad;
        if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(h)) continue;
        const float* irow = in + static_cast<std::size_t>(yy) * w;
        const __m256 t = _mm256_set1_ps(taps[i * k + j]);
        const float tf = taps[i * k + j];
        std::ptrdiff_t x = x0;
        for (; x + 8 <= x1; x += 8) {
          const __m256 v = _mm256_loadu_ps(irow + x + shift);
          _mm256_storeu_ps(orow + x, _mm256_add_ps(_mm256_loadu_ps(orow + x), _mm256_mul_ps(v, t)));
        }
        for (; x < x1; ++x) orow[x] = orow[x] + irow[x + shift] * tf;
      }
    }
  }
}

bool cpu_has_avx2() {
#if defined(__GNUC__) || defined(__clang__)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2");
#else
  return false;
#endif
}

}  // namespace

const KernelTable* avx2_kernels() {
  static const KernelTable table{Isa::avx2, conv_pixel, conv_pixel_backward, dw_plane, axpy, dot};
  static const bool supported = cpu_has_avx2();
  return supported ? &table : nullptr;
}

}  // namespace zap::simd
