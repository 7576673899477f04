#include "zap/trainer.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "zap/autograd.hpp"
#include "zap/optim.hpp"

namespace zap {
namespace {

// Pointers to the trainable host tensors in a fixed order.
struct ParamRefs {
  std::vector<Tensor*> tensors;
  std::vector<std::size_t> first;  // index into tensors per layer
};

ParamRefs collect_params(Model& model) {
  ParamRefs r;
  for (auto& l : model.layers()) {
    r.first.push_back(r.tensors.size());
    switch (l.spec.kind) {
      case LayerKind::conv:
        r.tensors.push_back(&l.conv.weights);
        r.tensors.push_back(&l.conv.bias);
        break;
      case LayerKind::batch_norm:
        r.tensors.push_back(&l.bn.gamma);
        r.tensors.push_back(&l.bn.beta);
        break;
      case LayerKind::linear:
        r.tensors.push_back(&l.weight);
        r.tensors.push_back(&l.bias);
        break;
      default: break;
    }
  }
  return r;
}

}  // namespace

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  const std::size_t classes = logits.shape().back();
  const std::size_t n = logits.size() / classes;
  std::vector<std::size_t> out(n);
  for (std::size_t s = 0; s < n; ++s) {
    const float* row = logits.raw() + s * classes;
    out[s] = static_cast<std::size_t>(std::max_element(row, row + classes) - row);
  }
  return out;
}

std::vector<EpochStats> train_classifier(Model& model, const TinyImageSet& data, const TrainConfig& cfg,
                                         const ZapSettings& gates, const EpochCallback& on_epoch) {
  data.validate();
  if (cfg.batch == 0 || cfg.epochs == 0) throw std::invalid_argument("epochs and batch size must be positive");
  if (data.classes != model.spec().classes) {
    throw std::invalid_argument("dataset has " + std::to_string(data.classes) + " classes, model expects " +
                                std::to_string(model.spec().classes));
  }
  if (gates.enabled && !model.has_all_zaps()) throw std::invalid_argument("gated training needs every predictor");

  ParamRefs refs = collect_params(model);
  SgdMomentum sgd(cfg.lr, cfg.momentum, cfg.weight_decay);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  // Blocks whose ReLU output gets gated: relu index -> conv index.
  std::vector<std::optional<std::size_t>> gated_relu(model.layers().size());
  if (gates.enabled) {
    for (auto i : model.zap_layers()) gated_relu[model.block(i).relu] = i;
  }

  std::vector<EpochStats> history;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t first = 0; first < order.size(); first += cfg.batch) {
      const std::size_t count = std::min(cfg.batch, order.size() - first);
      if (count < 2) continue;  // batch statistics need two samples
      const std::span<const std::size_t> idx(order.data() + first, count);
      std::vector<std::size_t> labels(count);
      for (std::size_t k = 0; k < count; ++k) labels[k] = data.labels[idx[k]];

      autograd::Tape tape;
      std::vector<autograd::Var> pv;
      for (Tensor* t : refs.tensors) pv.push_back(tape.parameter(*t));
      autograd::Var x = tape.constant(data.gather(idx));
      for (std::size_t i = 0; i < model.layers().size(); ++i) {
        Layer& l = model.layers()[i];
        const std::size_t p = refs.first[i];
        switch (l.spec.kind) {
          case LayerKind::conv: x = tape.conv2d(x, pv[p], pv[p + 1], l.conv.stride, l.conv.padding); break;
          case LayerKind::batch_norm: x = tape.batch_norm_train(x, pv[p], pv[p + 1], l.bn.eps, &l.bn); break;
          case LayerKind::relu:
            x = tape.relu(x, l.spec.cap);
            if (gated_relu[i]) {
              const std::size_t c = *gated_relu[i];
              x = tape.gate(x, skip_gate(tape.value(x), model.zaps().at(c), gates.sigma_for(c)));
            }
            break;
          case LayerKind::maxpool: x = tape.maxpool2x2(x); break;
          case LayerKind::linear: x = tape.linear(x, pv[p], pv[p + 1]); break;
        }
      }
      const auto pred = argmax_rows(tape.value(x));
      for (std::size_t k = 0; k < count; ++k) correct += pred[k] == labels[k];
      autograd::Var loss = tape.cross_entropy(x, labels);
      loss_sum += tape.value(loss)[0] * static_cast<double>(count);
      tape.backward(loss);
      std::vector<Tensor> grads;
      grads.reserve(pv.size());
      for (auto v : pv) grads.push_back(tape.grad(v));
      sgd.step(refs.tensors, grads);
    }
    EpochStats st{epoch + 1, loss_sum / static_cast<double>(data.size()),
                  static_cast<double>(correct) / static_cast<double>(data.size())};
    history.push_back(st);
    if (on_epoch) on_epoch(st);
  }
  return history;
}

EvalResult evaluate(const Model& model, const TinyImageSet& data, const ForwardOptions& options, std::size_t batch) {
  data.validate();
  if (batch == 0) throw std::invalid_argument("evaluation batch must be positive");
  EvalResult r;
  for (std::size_t first = 0; first < data.size(); first += batch) {
    const std::size_t count = std::min(batch, data.size() - first);
    const Tensor logits = model.forward(data.batch(first, count), r.macs, options);
    const auto pred = argmax_rows(logits);
    for (std::size_t k = 0; k < count; ++k) r.correct += pred[k] == data.labels[first + k];
    r.total += count;
  }
  return r;
}

}  // namespace zap
