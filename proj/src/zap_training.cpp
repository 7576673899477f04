#include "zap/zap_training.hpp"

#include <algorithm>
#include <array>
#include <future>
#include <numeric>
#include <random>

#include "zap/autograd.hpp"

namespace zap {
namespace {

void append_batch(Tensor& dst, const Tensor& src) {
  const FeatureDims s = feature_dims(src, "captured map");
  if (dst.empty()) {
    dst = src.rank() == 4 ? src : src.reshaped({1, s.c, s.h, s.w});
    return;
  }
  const FeatureDims d = feature_dims(dst, "capture");
  if (d.c != s.c || d.h != s.h || d.w != s.w) {
    throw ShapeError("capture " + to_string(dst.shape()) + " cannot grow by " + to_string(src.shape()));
  }
  std::vector<float> data = dst.vec();
  data.insert(data.end(), src.vec().begin(), src.vec().end());
  dst = Tensor({d.n + s.n, d.c, d.h, d.w}, std::move(data));
}

Tensor samples(const Tensor& t, std::span<const std::size_t> idx) {
  const FeatureDims d = feature_dims(t);
  Tensor out({idx.size(), d.c, d.h, d.w});
  for (std::size_t k = 0; k < idx.size(); ++k) {
    std::copy_n(t.raw() + idx[k] * d.sample(), d.sample(), out.raw() + k * d.sample());
  }
  return out;
}

// I_t membership and the (ofm > 0) target over a whole batch.
void targets(const Tensor& ofm, const IndexSets& sets, std::vector<bool>& select, Tensor& target) {
  const FeatureDims d = feature_dims(ofm);
  select.assign(ofm.size(), false);
  target = Tensor::like(ofm);
  for (std::size_t nc = 0; nc < d.n * d.c; ++nc) {
    for (auto p : sets.predicted) select[nc * d.plane() + p] = true;
  }
  for (std::size_t i = 0; i < ofm.size(); ++i) target[i] = ofm[i] > 0.0f ? 1.0f : 0.0f;
}

}  // namespace

Tensor partial_ofm(const Tensor& ofm, const PatternMask& pattern) {
  const FeatureDims d = feature_dims(ofm, "ofm");
  return apply_mask(ofm, index_sets(pattern, d.w, d.h).computed);
}

void capture_pairs(const Model& model, std::span<const std::size_t> layers, const Tensor& batch,
                   std::map<std::size_t, LayerCapture>& captures, bool keep_ifm) {
  if (layers.empty()) return;
  ForwardOptions opt;
  opt.observer = [&](const ZapLayerEvent& ev) {
    if (std::find(layers.begin(), layers.end(), ev.layer) == layers.end()) return;
    LayerCapture& c = captures[ev.layer];
    c.layer = ev.layer;
    append_batch(c.ofm, *ev.ofm);
    if (keep_ifm) append_batch(c.ifm, *ev.ifm);
  };
  MacCounter scratch;
  model.forward(batch, scratch, opt);
}

std::map<std::size_t, LayerCapture> capture_pairs(const Model& model, const Tensor& batch, bool keep_ifm) {
  std::map<std::size_t, LayerCapture> out;
  const auto layers = model.zap_layers();
  capture_pairs(model, layers, batch, out, keep_ifm);
  return out;
}

void spill_captures(const std::map<std::size_t, LayerCapture>& captures, const std::string& path) {
  WeightContainer c;
  for (const auto& [layer, cap] : captures) {
    const std::string n = "capture." + std::to_string(layer) + ".";
    c.add(n + "ofm", cap.ofm);
    if (!cap.ifm.empty()) c.add(n + "ifm", cap.ifm);
  }
  c.save(path);
}

std::map<std::size_t, LayerCapture> load_captures(const std::string& path) {
  const WeightContainer c = WeightContainer::load(path);
  std::map<std::size_t, LayerCapture> out;
  for (const auto& e : c.entries()) {
    const auto dot1 = e.name.find('.');
    const auto dot2 = e.name.rfind('.');
    if (!e.name.starts_with("capture.") || dot1 == dot2) {
      throw std::invalid_argument("unexpected entry '" + e.name + "' in capture file");
    }
    const std::size_t layer = std::stoul(e.name.substr(dot1 + 1, dot2 - dot1 - 1));
    const std::string what = e.name.substr(dot2 + 1);
    LayerCapture& cap = out[layer];
    cap.layer = layer;
    if (what == "ofm") {
      cap.ofm = e.tensor;
    } else if (what == "ifm") {
      cap.ifm = e.tensor;
    } else {
      throw std::invalid_argument("unexpected entry '" + e.name + "' in capture file");
    }
  }
  return out;
}

ZapTrainReport train_zap(ZapUnit& unit, const Tensor& ofm, const ZapTrainConfig& cfg) {
  if (ofm.empty()) throw std::invalid_argument("predictor training needs a non-empty capture");
  if (cfg.epochs == 0 || cfg.batch == 0) throw std::invalid_argument("epochs and batch size must be positive");
  unit.validate();
  const FeatureDims d = feature_dims(ofm, "captured ofm");
  if (d.c != unit.channels()) {
    throw ShapeError("capture " + to_string(ofm.shape()) + " does not match a " + std::to_string(unit.channels()) +
                     "-channel predictor");
  }
  const IndexSets sets = index_sets(unit.pattern, d.w, d.h);
  if (sets.predicted.empty()) throw std::invalid_argument("pattern leaves nothing to predict on this ofm");

  AdamState adam(cfg.adam);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(d.n);
  std::iota(order.begin(), order.end(), 0);
  std::array<Tensor*, 6> params{&unit.dw1, &unit.bn1.gamma, &unit.bn1.beta,
                                &unit.dw2, &unit.bn2.gamma, &unit.bn2.beta};

  ZapTrainReport report;
  std::vector<bool> select;
  Tensor target;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t first = 0; first < d.n; first += cfg.batch) {
      const std::size_t count = std::min(cfg.batch, d.n - first);
      if (count < 2 && d.n >= 2) continue;
      const Tensor x = samples(ofm, std::span(order.data() + first, count));
      targets(x, sets, select, target);

      autograd::Tape tape;
      std::array<autograd::Var, 6> v;
      for (std::size_t k = 0; k < params.size(); ++k) v[k] = tape.parameter(*params[k]);
      autograd::Var h = tape.constant(apply_mask(x, sets.computed));
      h = tape.dwconv2d(h, v[0]);
      h = tape.batch_norm_train(h, v[1], v[2], unit.bn1.eps, &unit.bn1);
      h = tape.relu(h);
      h = tape.dwconv2d(h, v[3]);
      h = tape.batch_norm_train(h, v[4], v[5], unit.bn2.eps, &unit.bn2);
      h = tape.relu(h, 1.0f);
      const autograd::Var loss = tape.mse_loss(h, target, &select);
      tape.backward(loss);
      std::vector<Tensor> grads;
      for (auto var : v) grads.push_back(tape.grad(var));
      adam_step(params, grads, adam);
      loss_sum += tape.value(loss)[0];
      ++batches;
    }
    report.epoch_loss.push_back(batches ? loss_sum / static_cast<double>(batches) : 0.0);
  }
  return report;
}

std::vector<ZapTrainReport> train_zaps(Model& model, const std::map<std::size_t, LayerCapture>& captures,
                                       const PatternMask& pattern, const ZapTrainConfig& cfg, bool parallel) {
  const auto layers = model.zap_layers();
  for (auto i : layers) {
    if (!captures.contains(i)) throw std::invalid_argument("no capture for zapped layer " + std::to_string(i));
    if (!model.zaps().contains(i)) {
      model.zaps().emplace(i, ZapUnit::create(model.layers()[i].out_shape[0], pattern, cfg.seed * 7919ULL + i));
    }
  }
  std::vector<ZapTrainReport> reports(layers.size());
  auto task = [&](std::size_t k) {
    const std::size_t i = layers[k];
    ZapTrainConfig c = cfg;
    c.seed = cfg.seed + i;
    ZapTrainReport r = train_zap(model.zaps().at(i), captures.at(i).ofm, c);
    r.layer = i;
    return r;
  };
  if (parallel) {
    // std::map nodes are stable, so each task owns exactly one unit.
    std::vector<std::future<ZapTrainReport>> futures;
    for (std::size_t k = 0; k < layers.size(); ++k) futures.push_back(std::async(std::launch::async, task, k));
    for (std::size_t k = 0; k < layers.size(); ++k) reports[k] = futures[k].get();
  } else {
    for (std::size_t k = 0; k < layers.size(); ++k) reports[k] = task(k);
  }
  return reports;
}

double ZapQuality::accuracy() const {
  return total() ? static_cast<double>(true_zero + true_nonzero) / static_cast<double>(total()) : 0.0;
}

double ZapQuality::balanced_accuracy() const {
  const std::size_t zeros = true_zero + false_nonzero, nonzeros = true_nonzero + false_zero;
  double sum = 0.0;
  int classes = 0;
  if (zeros) {
    sum += static_cast<double>(true_zero) / static_cast<double>(zeros);
    ++classes;
  }
  if (nonzeros) {
    sum += static_cast<double>(true_nonzero) / static_cast<double>(nonzeros);
    ++classes;
  }
  return classes ? sum / classes : 0.0;
}

double ZapQuality::majority_baseline() const {
  const std::size_t zeros = true_zero + false_nonzero, nonzeros = true_nonzero + false_zero;
  return total() ? static_cast<double>(std::max(zeros, nonzeros)) / static_cast<double>(total()) : 0.0;
}

ZapQuality zap_quality(const ZapUnit& unit, const Tensor& ofm, float sigma) {
  const FeatureDims d = feature_dims(ofm, "ofm");
  const IndexSets sets = index_sets(unit.pattern, d.w, d.h);
  MacCounter scratch;
  const Tensor m = predict_mask(apply_mask(ofm, sets.computed), unit, scratch);
  ZapQuality q;
  for (std::size_t nc = 0; nc < d.n * d.c; ++nc) {
    for (auto p : sets.predicted) {
      const std::size_t i = nc * d.plane() + p;
      const bool nonzero = ofm[i] > 0.0f, keep = m[i] > sigma;
      if (nonzero) {
        ++(keep ? q.true_nonzero : q.false_zero);
      } else {
        ++(keep ? q.false_nonzero : q.true_zero);
      }
    }
  }
  return q;
}

void recalibrate_bn(Model& model, const TinyImageSet& data, const ZapSettings& zaps, std::size_t batches,
                    std::size_t batch) {
  const bool has_bn = std::any_of(model.layers().begin(), model.layers().end(),
                                  [](const Layer& l) { return l.spec.kind == LayerKind::batch_norm; });
  if (!has_bn || batches == 0) return;
  data.validate();
  if (batch < 2) throw std::invalid_argument("calibration batches need at least two samples");
  batch = std::min(batch, data.size());
  std::size_t first = 0;
  for (std::size_t b = 0; b < batches; ++b) {
    if (first + batch > data.size()) first = 0;
    model.calibration_pass(data.batch(first, batch), zaps);
    first += batch;
  }
}

std::vector<EpochStats> fine_tune(Model& model, const TinyImageSet& data, const ZapSettings& zaps,
                                  const TrainConfig& config, const EpochCallback& on_epoch) {
  return train_classifier(model, data, config, zaps, on_epoch);
}

}  // namespace zap
