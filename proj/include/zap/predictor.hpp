#pragma once

// Zero-activation predictor and the three-step predicted convolution.
//
// A ZapUnit looks at the partially computed, post-ReLU ofm X_o[I_s] and
// produces a confidence map M through two depthwise 3x3 layers:
//
//   M = BN2(DW2(ReLU(BN1(DW1(X_o[I_s])))))
//
// Positions of I_t with M > sigma are then computed exactly; the rest are
// skipped and hold 0.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <string_view>
#include <utility>
#include <vector>

#include "zap/mac_counter.hpp"
#include "zap/ops.hpp"
#include "zap/pattern.hpp"
#include "zap/tensor.hpp"

namespace zap {

/// Threshold sentinel: compute every activation and bypass the predictor.
inline constexpr float kComputeAll = -std::numeric_limits<float>::infinity();

/// Predictor filter width and height.
inline constexpr std::size_t kZapKernel = 3;

struct ZapUnit {
  PatternMask pattern = PatternMask::make(PatternId::B);
  Tensor dw1;  // [3, 3, 1, C]
  BatchNormParams bn1;
  Tensor dw2;  // [3, 3, 1, C]
  BatchNormParams bn2;
  float sigma = 0.0f;
  bool enabled = true;

  /// Fresh unit: filters uniform in +-1/sqrt(9), batch norms at identity.
  static ZapUnit create(std::size_t channels, PatternMask pattern, std::uint64_t seed);

  std::size_t channels() const { return dw1.dim(3); }
  std::size_t parameter_count() const { return dw1.size() + dw2.size() + 4 * (bn1.channels() + bn2.channels()); }

  /// Throws ShapeError when filters or batch norms disagree.
  void validate() const;
};

/// Predictor output M for a partial ofm (zeros outside I_s). Only I_t
/// positions of the result are meaningful. Charges K*K MACs per computed
/// element to the first layer and per predicted element to the second.
Tensor predict_mask(const Tensor& partial_ofm, const ZapUnit& unit, MacCounter& counter,
                    std::string_view tag = "zap");

/// Element-wise M > sigma; true means "predicted non-zero, compute it".
std::vector<bool> binarize(const Tensor& m, float sigma);

struct Misprediction {
  std::size_t index = 0;  // flat index into the ofm
  float value = 0.0f;     // true (post-ReLU) activation that was skipped
};

struct PredictionOutcome {
  /// Per ofm element: true where the activation was skipped and left at 0.
  std::vector<bool> skipped_mask;
  std::size_t computed = 0;  // I_t elements computed in step three
  std::size_t skipped = 0;   // I_t elements skipped
  std::size_t predicted_set = 0;  // |I_t| including channels and batch
  std::size_t computed_set = 0;   // |I_s| including channels and batch
  /// Non-zero activations predicted as zero. Filled only when requested.
  std::vector<Misprediction> mispredictions;
};

struct PredictedConvOptions {
  /// Host batch norm between convolution and ReLU, inference mode.
  const BatchNormParams* batch_norm = nullptr;
  /// Evaluate skipped activations (uncounted) and record mispredictions.
  bool record_mispredictions = false;
  /// Overrides unit.sigma.
  std::optional<float> sigma;
  /// Receives the predictor map M when the predictor runs.
  Tensor* m_out = nullptr;
  std::string_view tag = "layer";
};

/// Three-step convolution: computes X_o[I_s] exactly, predicts I_t, computes
/// the predicted non-zero part of I_t. Returns the post-ReLU ofm. MACs go to
/// "<tag>.conv" and "<tag>.zap". With sigma == kComputeAll, or a disabled
/// unit, the predictor is bypassed and the result equals conv (+BN) + ReLU
/// bit for bit. Only stride-1 convolutions are supported.
std::pair<Tensor, PredictionOutcome> predicted_conv(const Tensor& input, const ConvParams& params,
                                                    const ZapUnit& unit, MacCounter& counter,
                                                    const PredictedConvOptions& options = {});

/// Keep-gate for a dense post-ReLU ofm: 0 at I_t positions the unit would
/// skip at `sigma` when fed apply_mask(ofm, I_s), 1 elsewhere. Used where the
/// whole ofm is already available (calibration, fine-tuning). No MACs.
Tensor skip_gate(const Tensor& post_relu_ofm, const ZapUnit& unit, float sigma);

/// Host-layer activation: conv result -> optional BN -> ReLU, the exact
/// expression shared by predicted and plain execution.
inline float host_activation(float conv, const BatchNormParams* bn, std::size_t z) {
  float v = conv;
  if (bn) v = bn_infer(v, bn->gamma[z], bn->beta[z], bn->running_mean[z], bn->running_var[z], bn->eps);
  return std::max(v, 0.0f);
}

struct MispredictionHistogram {
  double bin_width = 0.1;
  /// share[b]: skipped non-zero activations with value in [b*w, (b+1)*w),
  /// divided by the number of ofm elements.
  std::vector<double> share;
  std::size_t ofm_elements = 0;
  std::size_t mispredicted = 0;

  double total_share() const;
};

/// Histogram of true values that were skipped although non-zero.
/// Throws std::invalid_argument for a non-positive bin width.
MispredictionHistogram misprediction_histogram(const PredictionOutcome& outcome, const Tensor& true_ofm,
                                               double bin_width);

/// Adds `other` into `into` (same bin width); both shares are re-weighted by
/// their element counts.
void merge_histogram(MispredictionHistogram& into, const MispredictionHistogram& other);

}  // namespace zap
