#pragma once

// Tape-based reverse-mode differentiation over the forward kernels.
//
// Every op appends a node holding its value and a closure that pushes the
// node's gradient to its inputs. Nodes are addressed by index, so a Var is
// only meaningful together with the tape that created it.

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "zap/ops.hpp"
#include "zap/tensor.hpp"

namespace zap::autograd {

struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

class Tape {
 public:
  /// Input or constant; no gradient is tracked.
  Var constant(Tensor value);
  /// Trainable leaf; its gradient is available after backward().
  Var parameter(Tensor value);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient of the last backward() root with respect to v. Parameters the
  /// root does not depend on get an all-zero gradient.
  Tensor grad(Var v) const;

  /// Reverse sweep from a single-element loss.
  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }

  // Ops. Shapes follow the forward kernels in zap/ops.hpp.
  Var conv2d(Var x, Var weights, Var bias, std::size_t stride, std::size_t padding);
  Var dwconv2d(Var x, Var filters);
  /// Training-mode batch norm over batch statistics. When `running` is given
  /// its running statistics are updated as in zap::batch_norm.
  Var batch_norm_train(Var x, Var gamma, Var beta, float eps, BatchNormParams* running = nullptr);
  /// Inference-mode batch norm with fixed statistics.
  Var batch_norm_eval(Var x, Var gamma, Var beta, const Tensor& mean, const Tensor& var, float eps);
  Var relu(Var x, std::optional<float> cap = std::nullopt);
  Var maxpool2x2(Var x);
  Var linear(Var x, Var weights, Var bias);
  /// Elementwise product.
  Var mul(Var a, Var b);
  /// Elementwise product with a constant gate; no gradient flows to the gate.
  Var gate(Var x, const Tensor& mask);
  /// Mean squared error over the positions where `select` is non-zero (all
  /// positions when absent). Throws std::invalid_argument on an empty selection.
  Var mse_loss(Var pred, const Tensor& target, const std::vector<bool>* select = nullptr);
  /// Mean softmax cross-entropy of logits [N, C] (or [C]) against labels.
  Var cross_entropy(Var logits, std::span<const std::size_t> labels);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::function<void(Tape&)> backward;
  };

  Var push(Tensor value, bool requires_grad, std::function<void(Tape&)> backward = {});
  Tensor& grad_ref(std::size_t id);
  bool any_grad(std::initializer_list<Var> vs) const;

  std::vector<Node> nodes_;
};

}  // namespace zap::autograd
