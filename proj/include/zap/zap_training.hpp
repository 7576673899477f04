#pragma once

// Label-free teacher-student training of predictors, batch-norm
// recalibration and gated fine-tuning of the host model.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "zap/io.hpp"
#include "zap/model.hpp"
#include "zap/optim.hpp"
#include "zap/trainer.hpp"

namespace zap {

/// Teacher snapshot of one zapped layer.
struct LayerCapture {
  std::size_t layer = 0;
  Tensor ifm;  // empty unless requested
  Tensor ofm;  // true post-ReLU ofm [N, C, H, W]
};

/// Appends per-layer snapshots of a predictor-free forward pass over `batch`.
/// Layers missing from `captures` are created; existing ones grow along the
/// batch axis.
void capture_pairs(const Model& model, std::span<const std::size_t> layers, const Tensor& batch,
                   std::map<std::size_t, LayerCapture>& captures, bool keep_ifm = false);

/// Convenience overload covering every zapped layer.
std::map<std::size_t, LayerCapture> capture_pairs(const Model& model, const Tensor& batch, bool keep_ifm = false);

/// X_o[I_s]: the ofm with every I_t position zeroed.
Tensor partial_ofm(const Tensor& ofm, const PatternMask& pattern);

/// Captures round-trip through the weight container format as
/// "capture.<layer>.ofm" (and ".ifm") entries.
void spill_captures(const std::map<std::size_t, LayerCapture>& captures, const std::string& path);
std::map<std::size_t, LayerCapture> load_captures(const std::string& path);

struct ZapTrainConfig {
  std::size_t epochs = 5;
  std::size_t batch = 32;
  AdamConfig adam;
  std::uint64_t seed = 1;
};

struct ZapTrainReport {
  std::size_t layer = 0;
  std::vector<double> epoch_loss;  // mean I_t loss per epoch
};

/// Trains `unit` in place against the captured ofm: the target is
/// (ofm > 0) on I_t, the loss is MSE restricted to I_t and the output
/// passes a ReLU capped at 1. Batch norms use batch statistics and update
/// their running statistics. Throws std::invalid_argument on an empty
/// capture.
ZapTrainReport train_zap(ZapUnit& unit, const Tensor& ofm, const ZapTrainConfig& config);

/// Trains every predictor of `model` against its own capture, one task per
/// layer, concurrently. Creates missing units with `pattern`.
std::vector<ZapTrainReport> train_zaps(Model& model, const std::map<std::size_t, LayerCapture>& captures,
                                       const PatternMask& pattern, const ZapTrainConfig& config,
                                       bool parallel = true);

/// Zero / non-zero classification quality on I_t for a threshold.
struct ZapQuality {
  std::size_t true_zero = 0;      // target zero, predicted zero
  std::size_t false_zero = 0;     // target non-zero, predicted zero (misprediction)
  std::size_t true_nonzero = 0;   // target non-zero, predicted non-zero
  std::size_t false_nonzero = 0;  // target zero, predicted non-zero

  std::size_t total() const { return true_zero + false_zero + true_nonzero + false_nonzero; }
  double accuracy() const;
  /// Mean of the per-class recalls.
  double balanced_accuracy() const;
  /// Accuracy of always answering the more frequent class.
  double majority_baseline() const;
};

ZapQuality zap_quality(const ZapUnit& unit, const Tensor& ofm, float sigma);

/// Refreshes host batch-norm running statistics by calibration passes over
/// `data` with predictors applied per `zaps`. No gradients; `batches` batches
/// of `batch` samples are drawn in order (wrapping). No-op without batch norm.
void recalibrate_bn(Model& model, const TinyImageSet& data, const ZapSettings& zaps, std::size_t batches = 50,
                    std::size_t batch = 64);

/// Supervised fine-tuning with frozen predictors gating the host layers.
/// With zaps.enabled == false this is plain training.
std::vector<EpochStats> fine_tune(Model& model, const TinyImageSet& data, const ZapSettings& zaps,
                                  const TrainConfig& config, const EpochCallback& on_epoch = {});

}  // namespace zap
