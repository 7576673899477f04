#include "zap/simd/kernels.hpp"

namespace zap::simd {
namespace {

void conv_pixel(const ConvGeometry& g, const float* in, const float* w, std::size_t oy, std::size_t ox,
                float* out) {
  const std::size_t plane = g.h_in * g.w_in;
  for (std::size_t z = 0; z < g.c_out; ++z) {
    float acc = 0.0f;
    for (std::size_t i = 0; i < g.k; ++i) {
      const auto xx = static_cast<std::ptrdiff_t>(ox * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
      if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(g.w_in)) continue;
      for (std::size_t j = 0; j < g.k; ++j) {
        const auto yy = static_cast<std::ptrdiff_t>(oy * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
        if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(g.h_in)) continue;
        const float* src = in + static_cast<std::size_t>(yy) * g.w_in + static_cast<std::size_t>(xx);
        const float* wk = w + (i * g.k + j) * g.c_in * g.c_out + z;
        for (std::size_t c = 0; c < g.c_in; ++c) {
          acc = acc + src[c * plane] * wk[c * g.c_out];
        }
      }
    }
    out[z] = acc;
  }
}

void conv_pixel_backward(const ConvGeometry& g, const float* in, const float* w, std::size_t oy, std::size_t ox,
                         const float* gout, float* gin, float* gw) {
  const std::size_t plane = g.h_in * g.w_in;
  for (std::size_t i = 0; i < g.k; ++i) {
    const auto xx = static_cast<std::ptrdiff_t>(ox * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
    if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(g.w_in)) continue;
    for (std::size_t j = 0; j < g.k; ++j) {
      const auto yy = static_cast<std::ptrdiff_t>(oy * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
      if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(g.h_in)) continue;
      const std::size_t off = static_cast<std::size_t>(yy) * g.w_in + static_cast<std::size_t>(xx);
      for (std::size_t c = 0; c < g.c_in; ++c) {
        const float a = in[c * plane + off];
        const float* wk = w + ((i * g.k + j) * g.c_in + c) * g.c_out;
        float* gk = gw + ((i * g.k + j) * g.c_in + c) * g.c_out;
        float acc = 0.0f;
        for (std::size_t z = 0; z < g.c_out; ++z) {
          gk[z] = gk[z] + a * gout[z];
          acc = acc + wk[z] * gout[z];
        }
        gin[c * plane + off] += acc;
      }
    }
  }
}

void dw_plane(const float* in, std::size_t h, std::size_t w, const float* taps, std::size_t k, float* out) {
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      float acc = 0.0f;
      for (std::size_t i = 0; i < k; ++i) {
        const auto xx = static_cast<std::ptrdiff_t>(x + i) - pad;
        if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) continue;
        for (std::size_t j = 0; j < k; ++j) {
          const auto yy = static_cast<std::ptrdiff_t>(y + j) - pad;
          if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(h)) continue;
          acc = acc + in[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)] * taps[i * k + j];
        }
      }
      out[y * w + x] = acc;
    }
  }
}

void axpy(float a, const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = y[i] + a * x[i];
}

float dot(const float* a, const float* b, std::size_t n) {
  float acc = 0.0f;
  for (std::size_t i = 0; i < n; ++i) acc = acc + a[i] * b[i];
  return acc;
}

}  // namespace

const KernelTable& scalar_kernels() {
  static const KernelTable table{Isa::scalar, conv_pixel, conv_pixel_backward, dw_plane, axpy, dot};
  return table;
}

}  // namespace zap::simd
