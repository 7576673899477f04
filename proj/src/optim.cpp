#include "zap/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace zap {

namespace {

void check_pairs(std::span<Tensor* const> params, std::span<const Tensor> grads) {
  if (params.size() != grads.size()) {
    throw std::invalid_argument("optimizer got " + std::to_string(params.size()) + " parameters and " +
                                std::to_string(grads.size()) + " gradients");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape()) {
      throw ShapeError("gradient " + to_string(grads[i].shape()) + " does not match parameter " +
                       to_string(params[i]->shape()));
    }
  }
}

void init_like(std::vector<Tensor>& slots, std::span<Tensor* const> params) {
  if (slots.empty()) {
    for (const Tensor* p : params) slots.push_back(Tensor::like(*p));
    return;
  }
  if (slots.size() != params.size()) throw std::invalid_argument("optimizer parameter list changed size");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (slots[i].shape() != params[i]->shape()) throw ShapeError("optimizer state does not match parameter shape");
  }
}

}  // namespace

AdamState::AdamState(AdamConfig config) : config_(config) {
  if (!(config_.lr > 0.0f)) throw std::invalid_argument("Adam learning rate must be positive");
  if (config_.beta1 < 0.0f || config_.beta1 >= 1.0f || config_.beta2 < 0.0f || config_.beta2 >= 1.0f) {
    throw std::invalid_argument("Adam betas must lie in [0, 1)");
  }
  if (!(config_.eps > 0.0f)) throw std::invalid_argument("Adam epsilon must be positive");
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state) {
  check_pairs(params, grads);
  init_like(state.m_, params);
  init_like(state.v_, params);
  ++state.step_;
  const auto& c = state.config_;
  const double t = static_cast<double>(state.step_);
  const float corr1 = static_cast<float>(1.0 - std::pow(static_cast<double>(c.beta1), t));
  const float corr2 = static_cast<float>(1.0 - std::pow(static_cast<double>(c.beta2), t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    Tensor& m = state.m_[k];
    Tensor& v = state.v_[k];
    const Tensor& g = grads[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0f - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0f - c.beta2) * g[i] * g[i];
      const float mhat = m[i] / corr1;
      const float vhat = v[i] / corr2;
      p[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

void SgdMomentum::step(std::span<Tensor* const> params, std::span<const Tensor> grads) {
  check_pairs(params, grads);
  init_like(velocity_, params);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    Tensor& v = velocity_[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = momentum_ * v[i] + grads[k][i] + weight_decay_ * p[i];
      p[i] -= lr_ * v[i];
    }
  }
}

}  // namespace zap
