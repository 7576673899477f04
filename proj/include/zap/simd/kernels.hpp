#pragma once

// Inner-loop kernels with a scalar reference and ISA-specific variants.
//
// Forward kernels (conv_pixel, dw_plane, axpy) evaluate every output element
// with the same operation order in all variants, using separate multiply and
// add (never fused), so variants are bit-identical. Reductions (dot and the
// input-gradient half of conv_pixel_backward) reassociate and only agree to
// rounding.

#include <cstddef>
#include <string_view>

namespace zap::simd {

enum class Isa { scalar, avx2 };

std::string_view isa_name(Isa isa);

/// Dense convolution geometry. Input is one CxHxW sample; weights are laid
/// out [k (x offset)][k (y offset)][c_in][c_out].
struct ConvGeometry {
  std::size_t c_in = 0;
  std::size_t h_in = 0;
  std::size_t w_in = 0;
  std::size_t c_out = 0;
  std::size_t k = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;

  std::size_t h_out() const noexcept { return (h_in + 2 * pad - k) / stride + 1; }
  std::size_t w_out() const noexcept { return (w_in + 2 * pad - k) / stride + 1; }
};

struct KernelTable {
  Isa isa;

  /// out[z] = sum over (i, j, c), channel innermost, of
  /// in[c, oy*s+j-p, ox*s+i-p] * w[i, j, c, z]. Out-of-bounds taps are skipped.
  void (*conv_pixel)(const ConvGeometry& g, const float* in, const float* w, std::size_t oy, std::size_t ox,
                     float* out);

  /// Accumulates gradients of one output pixel: gw[i,j,c,:] += in * gout and
  /// gin[c, ...] += dot(w[i,j,c,:], gout).
  void (*conv_pixel_backward)(const ConvGeometry& g, const float* in, const float* w, std::size_t oy,
                              std::size_t ox, const float* gout, float* gin, float* gw);

  /// Same-size depthwise filter over one plane with zero padding (k-1)/2:
  /// out[y,x] = sum over (i, j) of in[y+j-p, x+i-p] * taps[i*k + j]. Overwrites out.
  void (*dw_plane)(const float* in, std::size_t h, std::size_t w, const float* taps, std::size_t k, float* out);

  /// y[i] += a * x[i]
  void (*axpy)(float a, const float* x, float* y, std::size_t n);

  float (*dot)(const float* a, const float* b, std::size_t n);
};

const KernelTable& scalar_kernels();

/// Null when the variant was not compiled in or the CPU lacks the feature.
const KernelTable* avx2_kernels();

/// Kernels used by every op. Chosen once at startup: the best supported ISA,
/// unless the environment variable ZAP_ISA=scalar forces the reference.
const KernelTable& active();

/// Overrides the active table (tests and benchmarks). Returns false when the
/// requested ISA is unavailable on this machine.
bool set_active(Isa isa);

}  // namespace zap::simd
