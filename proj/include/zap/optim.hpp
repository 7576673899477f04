#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "zap/tensor.hpp"

namespace zap {

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

/// Moment estimates for a fixed list of parameters. Moments are created on
/// the first step and must keep matching the parameter shapes afterwards.
class AdamState {
 public:
  explicit AdamState(AdamConfig config = {});

  const AdamConfig& config() const noexcept { return config_; }
  std::uint64_t step_count() const noexcept { return step_; }
  const std::vector<Tensor>& first_moments() const noexcept { return m_; }
  const std::vector<Tensor>& second_moments() const noexcept { return v_; }

 private:
  friend void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state);

  AdamConfig config_;
  std::uint64_t step_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

/// One bias-corrected Adam update of every parameter.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state);

/// Heavy-ball SGD: v = momentum * v + g + weight_decay * p; p -= lr * v.
class SgdMomentum {
 public:
  SgdMomentum(float lr, float momentum = 0.9f, float weight_decay = 0.0f)
      : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}

  void step(std::span<Tensor* const> params, std::span<const Tensor> grads);

  void set_lr(float lr) noexcept { lr_ = lr; }
  float lr() const noexcept { return lr_; }

 private:
  float lr_;
  float momentum_;
  float weight_decay_;
  std::vector<Tensor> velocity_;
};

}  // namespace zap
