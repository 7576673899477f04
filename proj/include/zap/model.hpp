#pragma once

// Sequential CNN description, parameters, and inference-time forward passes.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "zap/io.hpp"
#include "zap/mac_counter.hpp"
#include "zap/ops.hpp"
#include "zap/predictor.hpp"

namespace zap {

enum class LayerKind { conv, batch_norm, relu, maxpool, linear };

std::string_view layer_kind_name(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t out = 0;  // conv output channels or linear output features
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  bool zap = false;  // conv only: host a predictor
  std::optional<float> cap;  // relu only

  bool operator==(const LayerSpec&) const = default;
};

struct ModelSpec {
  std::string name = "model";
  std::size_t in_channels = 3;
  std::size_t in_height = 24;
  std::size_t in_width = 24;
  std::size_t classes = 10;
  std::vector<LayerSpec> layers;

  bool operator==(const ModelSpec&) const = default;

  std::string to_json() const;
  /// Throws std::invalid_argument on malformed JSON.
  static ModelSpec from_json(const std::string& text);
  static ModelSpec load(const std::string& path);
  void save(const std::string& path) const;
};

/// 4 conv (3x3, pad 1) + 2 max-pool + 1 linear classifier with ReLU and
/// optional batch norm. Every conv except the first hosts a predictor.
ModelSpec toynet4(std::size_t classes = 10, bool batch_norm = true, std::size_t in_channels = 3,
                  std::size_t height = 24, std::size_t width = 24, std::size_t width_mult = 16);

/// Looks up a built-in spec by name ("toynet4", "toynet4-nobn").
std::optional<ModelSpec> zoo_spec(const std::string& name);

struct Layer {
  LayerSpec spec;
  Shape in_shape;   // per sample
  Shape out_shape;  // per sample
  ConvParams conv;
  BatchNormParams bn;
  Tensor weight;  // linear [in, out]
  Tensor bias;    // linear [out]
};

/// Predictor settings for one forward pass.
struct ZapSettings {
  bool enabled = false;
  float sigma = 0.0f;
  std::map<std::size_t, float> layer_sigma;

  float sigma_for(std::size_t layer) const {
    auto it = layer_sigma.find(layer);
    return it == layer_sigma.end() ? sigma : it->second;
  }
  static ZapSettings off() { return {}; }
  static ZapSettings uniform(float s) { return {true, s, {}}; }
};

/// Per zapped layer information delivered during a forward pass.
struct ZapLayerEvent {
  std::size_t layer = 0;
  const Tensor* ifm = nullptr;
  const Tensor* ofm = nullptr;  // post-ReLU, after prediction if enabled
  const PredictionOutcome* outcome = nullptr;  // null when predictors are off
  const Tensor* m = nullptr;  // predictor map, null when bypassed
};

struct ForwardOptions {
  ZapSettings zaps;
  bool record_mispredictions = false;
  std::function<void(const ZapLayerEvent&)> observer;
};

/// Conv layer geometry needed by the MAC accounting of one zapped layer.
struct ZapLayerGeometry {
  std::size_t layer = 0;
  std::size_t c_in = 0;
  std::size_t c_out = 0;
  std::size_t height = 0;  // ofm
  std::size_t width = 0;   // ofm
  std::size_t kernel = 3;
  std::size_t computed_elements = 0;   // |I_s| per sample, channels included
  std::size_t predicted_elements = 0;  // |I_t| per sample, channels included

  std::uint64_t conv_macs_per_element() const { return static_cast<std::uint64_t>(kernel) * kernel * c_in; }
  std::uint64_t baseline_macs() const { return conv_macs_per_element() * (computed_elements + predicted_elements); }
  std::uint64_t predictor_macs() const {
    return static_cast<std::uint64_t>(kZapKernel) * kZapKernel * (computed_elements + predicted_elements);
  }
};

class Model {
 public:
  Model() = default;

  const ModelSpec& spec() const noexcept { return spec_; }
  std::vector<Layer>& layers() noexcept { return layers_; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }

  /// Indices of conv layers marked as predictor hosts.
  std::vector<std::size_t> zap_layers() const;

  std::map<std::size_t, ZapUnit>& zaps() noexcept { return zaps_; }
  const std::map<std::size_t, ZapUnit>& zaps() const noexcept { return zaps_; }
  bool has_all_zaps() const;

  /// Host layer block: conv index, optional BN index, ReLU index.
  struct Block {
    std::size_t conv = 0;
    std::optional<std::size_t> bn;
    std::size_t relu = 0;
  };
  Block block(std::size_t conv_layer) const;

  ZapLayerGeometry geometry(std::size_t conv_layer, const PatternMask& pattern) const;

  /// Conv MACs of one sample without predictors.
  std::uint64_t baseline_conv_macs() const;

  /// Host-model trainable parameter count (conv/linear weights and biases,
  /// batch-norm gamma/beta).
  std::size_t parameter_count() const;

  /// Attaches freshly initialized predictors to every zapped layer.
  void attach_zaps(const PatternMask& pattern, std::uint64_t seed);

  /// Input batch [N, C, H, W] (or one sample [C, H, W]) to logits.
  /// MAC tags: "L<i>.conv", "L<i>.zap", "L<i>.linear".
  Tensor forward(const Tensor& input, MacCounter& counter, const ForwardOptions& options = {}) const;

  /// Forward pass with host batch norms in batch-statistics mode, folding
  /// each batch into the running statistics. Zapped layers run the full
  /// convolution and then zero the activations their predictor skips.
  /// No MACs are counted.
  Tensor calibration_pass(const Tensor& input, const ZapSettings& zaps);

  WeightContainer to_container() const;
  /// Loads host parameters and any predictor entries. Throws
  /// std::invalid_argument on missing or mis-shaped entries.
  void load_container(const WeightContainer& container);

 private:
  friend Model build_model(const ModelSpec& spec, std::uint64_t seed);

  ModelSpec spec_;
  std::vector<Layer> layers_;
  std::map<std::size_t, ZapUnit> zaps_;
};

/// Validates the spec and allocates initialized parameters (conv/linear
/// uniform fan-in, batch norm at identity). Throws std::invalid_argument when
/// a predictor is requested on the first conv, a strided conv, or a conv not
/// followed by ReLU (optionally through batch norm).
Model build_model(const ModelSpec& spec, std::uint64_t seed = 0);

/// Pattern stored with trained predictors, when present in the container.
std::optional<PatternMask> stored_pattern(const WeightContainer& container);

}  // namespace zap
