#include "zap/ops.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace zap {

void ConvParams::validate() const {
  if (weights.rank() != 4) {
    throw ShapeError("conv weights must be rank 4 [k,k,c_in,c_out], got " + to_string(weights.shape()));
  }
  if (weights.dim(0) != weights.dim(1)) {
    throw ShapeError("conv filters must be square, got " + to_string(weights.shape()));
  }
  if (bias.rank() != 1 || bias.dim(0) != weights.dim(3)) {
    throw ShapeError("conv bias " + to_string(bias.shape()) + " does not match weights " +
                     to_string(weights.shape()));
  }
  if (stride == 0) throw ShapeError("conv stride must be positive");
}

simd::ConvGeometry conv_geometry(const FeatureDims& in, const ConvParams& params) {
  params.validate();
  if (in.c != params.c_in()) {
    throw ShapeError("conv input " + to_string(Shape{in.c, in.h, in.w}) + " has " + std::to_string(in.c) +
                     " channels but weights " + to_string(params.weights.shape()) + " expect " +
                     std::to_string(params.c_in()));
  }
  if (in.h + 2 * params.padding < params.k() || in.w + 2 * params.padding < params.k()) {
    throw ShapeError("padded input " + std::to_string(in.h) + "x" + std::to_string(in.w) +
                     " smaller than filter " + to_string(params.weights.shape()));
  }
  return {in.c, in.h, in.w, params.c_out(), params.k(), params.stride, params.padding};
}

Shape conv2d_output_shape(const Tensor& input, const ConvParams& params) {
  const auto g = conv_geometry(feature_dims(input, "conv input"), params);
  return feature_shape(input, g.c_out, g.h_out(), g.w_out());
}

void conv2d_pixel(const float* sample, const simd::ConvGeometry& g, const ConvParams& params, std::size_t oy,
                  std::size_t ox, float* out) {
  simd::active().conv_pixel(g, sample, params.weights.raw(), oy, ox, out);
  for (std::size_t z = 0; z < g.c_out; ++z) out[z] = out[z] + params.bias[z];
}

float conv2d_element(const float* sample, const simd::ConvGeometry& g, const ConvParams& params, std::size_t oy,
                     std::size_t ox, std::size_t z) {
  const std::size_t plane = g.h_in * g.w_in;
  const float* w = params.weights.raw();
  float acc = 0.0f;
  for (std::size_t i = 0; i < g.k; ++i) {
    const auto xx = static_cast<std::ptrdiff_t>(ox * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
    if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(g.w_in)) continue;
    for (std::size_t j = 0; j < g.k; ++j) {
      const auto yy = static_cast<std::ptrdiff_t>(oy * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
      if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(g.h_in)) continue;
      const float* src = sample + static_cast<std::size_t>(yy) * g.w_in + static_cast<std::size_t>(xx);
      const float* wk = w + (i * g.k + j) * g.c_in * g.c_out + z;
      for (std::size_t c = 0; c < g.c_in; ++c) acc = acc + src[c * plane] * wk[c * g.c_out];
    }
  }
  return acc + params.bias[z];
}

Tensor conv2d(const Tensor& input, const ConvParams& params, MacCounter& counter, std::string_view tag) {
  const FeatureDims in = feature_dims(input, "conv input");
  const auto g = conv_geometry(in, params);
  const std::size_t ho = g.h_out(), wo = g.w_out();
  Tensor out(feature_shape(input, g.c_out, ho, wo));
  std::vector<float> pixel(g.c_out);
  const std::size_t out_plane = ho * wo;
  for (std::size_t n = 0; n < in.n; ++n) {
    const float* sample = input.raw() + n * in.sample();
    float* dst = out.raw() + n * g.c_out * out_plane;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        conv2d_pixel(sample, g, params, oy, ox, pixel.data());
        for (std::size_t z = 0; z < g.c_out; ++z) dst[z * out_plane + oy * wo + ox] = pixel[z];
      }
    }
  }
  counter.add(tag, static_cast<std::uint64_t>(in.n) * out_plane * g.c_out * g.k * g.k * g.c_in);
  return out;
}

Tensor dwconv2d(const Tensor& input, const Tensor& filters, MacCounter& counter,
                std::optional<std::size_t> charged_elements, std::string_view tag) {
  const FeatureDims in = feature_dims(input, "depthwise input");
  if (filters.rank() != 4 || filters.dim(0) != filters.dim(1) || filters.dim(2) != 1 || filters.dim(0) % 2 == 0) {
    throw ShapeError("depthwise filters must be [K,K,1,C] with odd K, got " + to_string(filters.shape()));
  }
  if (filters.dim(3) != in.c) {
    throw ShapeError("depthwise filters " + to_string(filters.shape()) + " do not match input channels of " +
                     to_string(input.shape()));
  }
  const std::size_t k = filters.dim(0);
  Tensor out = Tensor::like(input);
  std::vector<float> taps(k * k);
  const auto& kern = simd::active();
  for (std::size_t c = 0; c < in.c; ++c) {
    for (std::size_t t = 0; t < k * k; ++t) taps[t] = filters[t * in.c + c];
    for (std::size_t n = 0; n < in.n; ++n) {
      const std::size_t off = n * in.sample() + c * in.plane();
      kern.dw_plane(input.raw() + off, in.h, in.w, taps.data(), k, out.raw() + off);
    }
  }
  counter.add(tag, static_cast<std::uint64_t>(k * k) * charged_elements.value_or(input.size()));
  return out;
}

BatchNormParams BatchNormParams::identity(std::size_t channels) {
  return {Tensor({channels}, 1.0f), Tensor({channels}, 0.0f), Tensor({channels}, 0.0f), Tensor({channels}, 1.0f)};
}

void BatchNormParams::validate() const {
  const std::size_t c = gamma.size();
  for (const Tensor* t : {&gamma, &beta, &running_mean, &running_var}) {
    if (t->rank() != 1 || t->size() != c) {
      throw ShapeError("batch-norm parameter vectors disagree: " + to_string(gamma.shape()) + " vs " +
                       to_string(t->shape()));
    }
  }
}

namespace {

void check_bn_channels(const FeatureDims& in, const BatchNormParams& p, const Tensor& input) {
  p.validate();
  if (p.channels() != in.c) {
    throw ShapeError("batch-norm parameters have " + std::to_string(p.channels()) + " channels, input is " +
                     to_string(input.shape()));
  }
}

}  // namespace

ChannelStats channel_statistics(const Tensor& input) {
  const FeatureDims in = feature_dims(input, "batch-norm input");
  ChannelStats s;
  s.mean.assign(in.c, 0.0);
  s.var.assign(in.c, 0.0);
  s.count = in.n * in.plane();
  for (std::size_t c = 0; c < in.c; ++c) {
    double sum = 0.0;
    for (std::size_t n = 0; n < in.n; ++n) {
      const float* p = input.raw() + n * in.sample() + c * in.plane();
      for (std::size_t i = 0; i < in.plane(); ++i) sum += p[i];
    }
    const double mean = sum / static_cast<double>(s.count);
    double sq = 0.0;
    for (std::size_t n = 0; n < in.n; ++n) {
      const float* p = input.raw() + n * in.sample() + c * in.plane();
      for (std::size_t i = 0; i < in.plane(); ++i) {
        const double d = p[i] - mean;
        sq += d * d;
      }
    }
    s.mean[c] = mean;
    s.var[c] = sq / static_cast<double>(s.count);
  }
  return s;
}

Tensor batch_norm(const Tensor& input, const BatchNormParams& p) {
  const FeatureDims in = feature_dims(input, "batch-norm input");
  check_bn_channels(in, p, input);
  for (std::size_t c = 0; c < in.c; ++c) {
    if (!(p.running_var[c] > 0.0f)) {
      throw std::invalid_argument("batch-norm running variance must be positive (channel " + std::to_string(c) +
                                  ")");
    }
  }
  Tensor out = Tensor::like(input);
  for (std::size_t n = 0; n < in.n; ++n) {
    for (std::size_t c = 0; c < in.c; ++c) {
      const std::size_t off = n * in.sample() + c * in.plane();
      const float g = p.gamma[c], b = p.beta[c], m = p.running_mean[c], v = p.running_var[c];
      for (std::size_t i = 0; i < in.plane(); ++i) out[off + i] = bn_infer(input[off + i], g, b, m, v, p.eps);
    }
  }
  return out;
}

void update_running_stats(const ChannelStats& s, BatchNormParams& p) {
  const double unbias = s.count > 1 ? static_cast<double>(s.count) / static_cast<double>(s.count - 1) : 1.0;
  for (std::size_t c = 0; c < p.channels(); ++c) {
    p.running_mean[c] = static_cast<float>((1.0 - p.momentum) * p.running_mean[c] + p.momentum * s.mean[c]);
    p.running_var[c] = static_cast<float>((1.0 - p.momentum) * p.running_var[c] + p.momentum * s.var[c] * unbias);
  }
}

Tensor batch_norm(const Tensor& input, BatchNormParams& p, bool training) {
  if (!training) return batch_norm(input, static_cast<const BatchNormParams&>(p));
  const FeatureDims in = feature_dims(input, "batch-norm input");
  check_bn_channels(in, p, input);
  const ChannelStats s = channel_statistics(input);
  Tensor out = Tensor::like(input);
  for (std::size_t c = 0; c < in.c; ++c) {
    const float mean = static_cast<float>(s.mean[c]);
    const float inv_std = static_cast<float>(1.0 / std::sqrt(s.var[c] + p.eps));
    for (std::size_t n = 0; n < in.n; ++n) {
      const std::size_t off = n * in.sample() + c * in.plane();
      for (std::size_t i = 0; i < in.plane(); ++i) {
        out[off + i] = (input[off + i] - mean) * inv_std * p.gamma[c] + p.beta[c];
      }
    }
  }
  update_running_stats(s, p);
  return out;
}

Tensor relu(const Tensor& input, std::optional<float> cap) {
  Tensor out = Tensor::like(input);
  for (std::size_t i = 0; i < input.size(); ++i) {
    float v = std::max(input[i], 0.0f);
    if (cap) v = std::min(v, *cap);
    out[i] = v;
  }
  return out;
}

Tensor maxpool2x2(const Tensor& input) {
  const FeatureDims in = feature_dims(input, "maxpool input");
  if (in.h < 2 || in.w < 2) throw ShapeError("maxpool2x2 needs spatial extents >= 2, got " + to_string(input.shape()));
  const std::size_t ho = in.h / 2, wo = in.w / 2;
  Tensor out(feature_shape(input, in.c, ho, wo));
  for (std::size_t n = 0; n < in.n; ++n) {
    for (std::size_t c = 0; c < in.c; ++c) {
      const float* src = input.raw() + n * in.sample() + c * in.plane();
      float* dst = out.raw() + (n * in.c + c) * ho * wo;
      for (std::size_t y = 0; y < ho; ++y) {
        for (std::size_t x = 0; x < wo; ++x) {
          const float* p = src + 2 * y * in.w + 2 * x;
          dst[y * wo + x] = std::max(std::max(p[0], p[1]), std::max(p[in.w], p[in.w + 1]));
        }
      }
    }
  }
  return out;
}

Tensor linear(const Tensor& input, const Tensor& weights, const Tensor& bias, MacCounter& counter,
              std::string_view tag) {
  if (weights.rank() != 2 || bias.rank() != 1 || bias.dim(0) != weights.dim(1)) {
    throw ShapeError("linear weights " + to_string(weights.shape()) + " / bias " + to_string(bias.shape()) +
                     " malformed");
  }
  const std::size_t fan_in = weights.dim(0), fan_out = weights.dim(1);
  const bool batched = input.rank() == 2 || input.rank() == 4;
  const std::size_t n = batched ? input.dim(0) : 1;
  if (input.size() != n * fan_in) {
    throw ShapeError("linear input " + to_string(input.shape()) + " does not match weights " +
                     to_string(weights.shape()));
  }
  Tensor out(batched ? Shape{n, fan_out} : Shape{fan_out});
  const auto& kern = simd::active();
  for (std::size_t s = 0; s < n; ++s) {
    float* y = out.raw() + s * fan_out;
    const float* x = input.raw() + s * fan_in;
    for (std::size_t i = 0; i < fan_in; ++i) kern.axpy(x[i], weights.raw() + i * fan_out, y, fan_out);
    for (std::size_t o = 0; o < fan_out; ++o) y[o] = y[o] + bias[o];
  }
  counter.add(tag, static_cast<std::uint64_t>(n) * fan_in * fan_out);
  return out;
}

}  // namespace zap
