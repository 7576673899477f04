#pragma once

// Supervised training and evaluation of a host model.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "zap/io.hpp"
#include "zap/mac_counter.hpp"
#include "zap/model.hpp"

namespace zap {

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch = 32;
  float lr = 0.01f;
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
  std::uint64_t seed = 1;
};

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;
};

using EpochCallback = std::function<void(const EpochStats&)>;

/// SGD with momentum on softmax cross-entropy. Batch norms run on batch
/// statistics and update their running statistics. With gates.enabled, every
/// zapped layer's post-ReLU output is multiplied by the skip gate of its
/// (frozen) predictor; the gate is a constant, so no gradient flows through it.
std::vector<EpochStats> train_classifier(Model& model, const TinyImageSet& data, const TrainConfig& config,
                                         const ZapSettings& gates = {}, const EpochCallback& on_epoch = {});

struct EvalResult {
  std::size_t correct = 0;
  std::size_t total = 0;
  MacCounter macs;  // summed over all evaluated samples

  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
  double macs_per_sample() const {
    return total ? static_cast<double>(macs.total()) / static_cast<double>(total) : 0.0;
  }
};

/// Top-1 accuracy and MAC tally of inference-mode forward passes.
EvalResult evaluate(const Model& model, const TinyImageSet& data, const ForwardOptions& options = {},
                    std::size_t batch = 100);

/// Index of the largest logit per row of [N, classes].
std::vector<std::size_t> argmax_rows(const Tensor& logits);

}  // namespace zap
