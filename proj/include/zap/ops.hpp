#pragma once

// Forward numerical kernels. All functions are pure apart from the explicit
// MacCounter and, for training-mode batch norm, the running statistics.

#include <cmath>
#include <cstddef>
#include <optional>
#include <string_view>

#include "zap/mac_counter.hpp"
#include "zap/simd/kernels.hpp"
#include "zap/tensor.hpp"

namespace zap {

/// Dense convolution parameters. weights: [k, k, c_in, c_out]; bias: [c_out].
struct ConvParams {
  Tensor weights;
  Tensor bias;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t k() const { return weights.dim(0); }
  std::size_t c_in() const { return weights.dim(2); }
  std::size_t c_out() const { return weights.dim(3); }

  /// Throws ShapeError on malformed weights or bias.
  void validate() const;
};

/// Geometry for one sample of `input` under `params`; validates compatibility.
simd::ConvGeometry conv_geometry(const FeatureDims& input, const ConvParams& params);

/// Output extents of conv2d for the given input.
Shape conv2d_output_shape(const Tensor& input, const ConvParams& params);

/// Dense convolution. Charges k*k*c_in MACs per output element to `tag`.
Tensor conv2d(const Tensor& input, const ConvParams& params, MacCounter& counter,
              std::string_view tag = "conv2d");

/// One output pixel (all c_out channels, bias included) of a single CxHxW
/// sample. Does not touch any counter.
void conv2d_pixel(const float* sample, const simd::ConvGeometry& g, const ConvParams& params, std::size_t oy,
                  std::size_t ox, float* out);

/// One output element of a single sample. Same operation order as
/// conv2d_pixel, so both give bit-identical values.
float conv2d_element(const float* sample, const simd::ConvGeometry& g, const ConvParams& params, std::size_t oy,
                     std::size_t ox, std::size_t z);

/// Same-size depthwise convolution (stride 1, padding (K-1)/2).
/// filters: [K, K, 1, C]. Charges K*K MACs per element, or per
/// `charged_elements` when the caller applies sparse accounting.
Tensor dwconv2d(const Tensor& input, const Tensor& filters, MacCounter& counter,
                std::optional<std::size_t> charged_elements = std::nullopt, std::string_view tag = "dwconv2d");

/// Per-channel batch-norm parameters and running statistics.
struct BatchNormParams {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  float eps = 1e-5f;
  float momentum = 0.1f;

  static BatchNormParams identity(std::size_t channels);

  std::size_t channels() const { return gamma.size(); }
  void validate() const;
};

/// Inference-mode batch norm of a single value.
inline float bn_infer(float x, float gamma, float beta, float mean, float var, float eps) {
  return (x - mean) / std::sqrt(var + eps) * gamma + beta;
}

/// Per-channel mean and biased variance over batch and spatial extents,
/// accumulated in double with a fixed order.
struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> var;
  std::size_t count = 0;
};
ChannelStats channel_statistics(const Tensor& input);

/// Inference mode: normalizes with running statistics.
Tensor batch_norm(const Tensor& input, const BatchNormParams& params);

/// training == false is inference mode. training == true normalizes with
/// batch statistics and folds them into the running statistics:
/// running = (1 - momentum) * running + momentum * batch, where the batch
/// variance is the unbiased estimate.
Tensor batch_norm(const Tensor& input, BatchNormParams& params, bool training);

/// Folds batch statistics into running statistics without normalizing.
void update_running_stats(const ChannelStats& stats, BatchNormParams& params);

Tensor relu(const Tensor& input, std::optional<float> cap = std::nullopt);

/// 2x2 max pooling, stride 2; odd trailing rows/columns are dropped.
Tensor maxpool2x2(const Tensor& input);

/// Fully connected layer. weights: [in, out]; bias: [out]. Rank-1 and rank-3
/// inputs are one sample; rank-2 and rank-4 inputs carry a leading batch.
/// Charges in*out MACs per sample.
Tensor linear(const Tensor& input, const Tensor& weights, const Tensor& bias, MacCounter& counter,
              std::string_view tag = "linear");

}  // namespace zap
