#include "zap/model.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace zap {
namespace {

using nlohmann::json;

std::string layer_name(std::size_t i) { return "L" + std::to_string(i); }

LayerKind parse_kind(const std::string& s) {
  for (auto k : {LayerKind::conv, LayerKind::batch_norm, LayerKind::relu, LayerKind::maxpool, LayerKind::linear}) {
    if (layer_kind_name(k) == s) return k;
  }
  throw std::invalid_argument("unknown layer kind '" + s + "'");
}

Tensor pack_bn(const BatchNormParams& bn) {
  const std::size_t c = bn.channels();
  Tensor t({4, c});
  for (std::size_t i = 0; i < c; ++i) {
    t[i] = bn.gamma[i];
    t[c + i] = bn.beta[i];
    t[2 * c + i] = bn.running_mean[i];
    t[3 * c + i] = bn.running_var[i];
  }
  return t;
}

BatchNormParams unpack_bn(const Tensor& t, std::size_t channels, const std::string& name) {
  if (t.shape() != Shape{4, channels}) {
    throw std::invalid_argument("entry '" + name + "' has shape " + to_string(t.shape()) + ", expected " +
                                to_string({4, channels}));
  }
  BatchNormParams bn = BatchNormParams::identity(channels);
  for (std::size_t i = 0; i < channels; ++i) {
    bn.gamma[i] = t[i];
    bn.beta[i] = t[channels + i];
    bn.running_mean[i] = t[2 * channels + i];
    bn.running_var[i] = t[3 * channels + i];
  }
  return bn;
}

const Tensor& require(const WeightContainer& c, const std::string& name, const Shape& shape) {
  const Tensor* t = c.find(name);
  if (!t) throw std::invalid_argument("weight container lacks entry '" + name + "'");
  if (t->shape() != shape) {
    throw std::invalid_argument("entry '" + name + "' has shape " + to_string(t->shape()) + ", expected " +
                                to_string(shape));
  }
  return *t;
}

void fill_uniform(Tensor& t, float bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> dist(-bound, bound);
  for (auto& v : t.vec()) v = dist(rng);
}

}  // namespace

std::string_view layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::batch_norm: return "bn";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::linear: return "linear";
  }
  return "?";
}

std::string ModelSpec::to_json() const {
  json j;
  j["name"] = name;
  j["input"] = {in_channels, in_height, in_width};
  j["classes"] = classes;
  j["layers"] = json::array();
  for (const auto& l : layers) {
    json e;
    e["kind"] = std::string(layer_kind_name(l.kind));
    switch (l.kind) {
      case LayerKind::conv:
        e["out"] = l.out;
        e["kernel"] = l.kernel;
        e["stride"] = l.stride;
        e["padding"] = l.padding;
        e["zap"] = l.zap;
        break;
      case LayerKind::linear: e["out"] = l.out; break;
      case LayerKind::relu:
        if (l.cap) e["cap"] = *l.cap;
        break;
      default: break;
    }
    j["layers"].push_back(e);
  }
  return j.dump(2);
}

ModelSpec ModelSpec::from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    ModelSpec s;
    s.name = j.value("name", "model");
    const auto& in = j.at("input");
    if (!in.is_array() || in.size() != 3) throw std::invalid_argument("'input' must be [channels, height, width]");
    s.in_channels = in[0].get<std::size_t>();
    s.in_height = in[1].get<std::size_t>();
    s.in_width = in[2].get<std::size_t>();
    s.classes = j.at("classes").get<std::size_t>();
    for (const auto& e : j.at("layers")) {
      LayerSpec l;
      l.kind = parse_kind(e.at("kind").get<std::string>());
      if (l.kind == LayerKind::conv) {
        l.out = e.at("out").get<std::size_t>();
        l.kernel = e.value("kernel", std::size_t{3});
        l.stride = e.value("stride", std::size_t{1});
        l.padding = e.value("padding", std::size_t{1});
        l.zap = e.value("zap", false);
      } else if (l.kind == LayerKind::linear) {
        l.out = e.at("out").get<std::size_t>();
      } else if (l.kind == LayerKind::relu && e.contains("cap")) {
        l.cap = e.at("cap").get<float>();
      }
      s.layers.push_back(l);
    }
    return s;
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("malformed model spec: ") + e.what());
  }
}

ModelSpec ModelSpec::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open model spec '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

void ModelSpec::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write model spec '" + path + "'");
  out << to_json() << '\n';
}

ModelSpec toynet4(std::size_t classes, bool batch_norm, std::size_t in_channels, std::size_t height,
                  std::size_t width, std::size_t width_mult) {
  ModelSpec s;
  s.name = batch_norm ? "toynet4" : "toynet4-nobn";
  s.in_channels = in_channels;
  s.in_height = height;
  s.in_width = width;
  s.classes = classes;
  auto plain = [&](LayerKind kind, std::size_t out = 0) {
    LayerSpec l;
    l.kind = kind;
    l.out = out;
    s.layers.push_back(l);
  };
  auto conv = [&](std::size_t out, bool zap) {
    LayerSpec c;
    c.kind = LayerKind::conv;
    c.out = out;
    c.zap = zap;
    s.layers.push_back(c);
    if (batch_norm) plain(LayerKind::batch_norm);
    plain(LayerKind::relu);
  };
  conv(width_mult, false);
  conv(width_mult, true);
  plain(LayerKind::maxpool);
  conv(2 * width_mult, true);
  conv(2 * width_mult, true);
  plain(LayerKind::maxpool);
  plain(LayerKind::linear, classes);
  return s;
}

std::optional<ModelSpec> zoo_spec(const std::string& name) {
  if (name == "toynet4") return toynet4(10, true);
  if (name == "toynet4-nobn") return toynet4(10, false);
  return std::nullopt;
}

Model build_model(const ModelSpec& spec, std::uint64_t seed) {
  if (spec.in_channels == 0 || spec.in_height == 0 || spec.in_width == 0) {
    throw std::invalid_argument("model input extents must be positive");
  }
  if (spec.classes == 0) throw std::invalid_argument("model needs at least one class");
  if (spec.layers.empty()) throw std::invalid_argument("model has no layers");

  Model m;
  m.spec_ = spec;
  std::mt19937_64 rng(seed);
  Shape cur{spec.in_channels, spec.in_height, spec.in_width};
  bool seen_conv = false;
  bool flat = false;

  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& ls = spec.layers[i];
    Layer l;
    l.spec = ls;
    l.in_shape = cur;
    const std::string where = "layer " + std::to_string(i) + " (" + std::string(layer_kind_name(ls.kind)) + ")";
    if (flat && ls.kind != LayerKind::linear && ls.kind != LayerKind::relu) {
      throw std::invalid_argument(where + " follows a linear layer");
    }
    switch (ls.kind) {
      case LayerKind::conv: {
        if (ls.out == 0 || ls.kernel == 0 || ls.stride == 0) throw std::invalid_argument(where + ": zero extent");
        const std::size_t ci = cur[0];
        if (cur[1] + 2 * ls.padding < ls.kernel || cur[2] + 2 * ls.padding < ls.kernel) {
          throw std::invalid_argument(where + ": input " + to_string(cur) + " smaller than kernel");
        }
        if (ls.zap) {
          if (!seen_conv) throw std::invalid_argument(where + ": the first convolution cannot host a predictor");
          if (ls.stride != 1) throw std::invalid_argument(where + ": predictors need a stride-1 convolution");
          std::size_t next = i + 1;
          if (next < spec.layers.size() && spec.layers[next].kind == LayerKind::batch_norm) ++next;
          if (next >= spec.layers.size() || spec.layers[next].kind != LayerKind::relu || spec.layers[next].cap) {
            throw std::invalid_argument(where + ": predictor host must be followed by ReLU (optionally via batch norm)");
          }
        }
        seen_conv = true;
        l.conv.weights = Tensor({ls.kernel, ls.kernel, ci, ls.out});
        l.conv.bias = Tensor({ls.out});
        l.conv.stride = ls.stride;
        l.conv.padding = ls.padding;
        fill_uniform(l.conv.weights, std::sqrt(6.0f / static_cast<float>(ls.kernel * ls.kernel * ci)), rng);
        cur = {ls.out, (cur[1] + 2 * ls.padding - ls.kernel) / ls.stride + 1,
               (cur[2] + 2 * ls.padding - ls.kernel) / ls.stride + 1};
        break;
      }
      case LayerKind::batch_norm:
        if (cur.size() != 3) throw std::invalid_argument(where + ": batch norm needs a feature map");
        l.bn = BatchNormParams::identity(cur[0]);
        break;
      case LayerKind::relu: break;
      case LayerKind::maxpool:
        if (cur[1] < 2 || cur[2] < 2) throw std::invalid_argument(where + ": input " + to_string(cur) + " too small");
        cur = {cur[0], cur[1] / 2, cur[2] / 2};
        break;
      case LayerKind::linear: {
        if (ls.out == 0) throw std::invalid_argument(where + ": zero outputs");
        const std::size_t fan_in = shape_size(cur);
        l.weight = Tensor({fan_in, ls.out});
        l.bias = Tensor({ls.out});
        fill_uniform(l.weight, 1.0f / std::sqrt(static_cast<float>(fan_in)), rng);
        cur = {ls.out};
        flat = true;
        break;
      }
    }
    l.out_shape = cur;
    m.layers_.push_back(std::move(l));
  }
  if (cur != Shape{spec.classes}) {
    throw std::invalid_argument("model output " + to_string(cur) + " does not match " + std::to_string(spec.classes) +
                                " classes");
  }
  return m;
}

std::vector<std::size_t> Model::zap_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].spec.kind == LayerKind::conv && layers_[i].spec.zap) out.push_back(i);
  }
  return out;
}

bool Model::has_all_zaps() const {
  for (auto i : zap_layers()) {
    if (!zaps_.contains(i)) return false;
  }
  return true;
}

Model::Block Model::block(std::size_t conv_layer) const {
  if (conv_layer >= layers_.size() || layers_[conv_layer].spec.kind != LayerKind::conv) {
    throw std::invalid_argument("layer " + std::to_string(conv_layer) + " is not a convolution");
  }
  Block b;
  b.conv = conv_layer;
  std::size_t next = conv_layer + 1;
  if (next < layers_.size() && layers_[next].spec.kind == LayerKind::batch_norm) b.bn = next++;
  if (next >= layers_.size() || layers_[next].spec.kind != LayerKind::relu) {
    throw std::invalid_argument("convolution " + std::to_string(conv_layer) + " is not followed by ReLU");
  }
  b.relu = next;
  return b;
}

ZapLayerGeometry Model::geometry(std::size_t conv_layer, const PatternMask& pattern) const {
  const Layer& l = layers_.at(conv_layer);
  if (l.spec.kind != LayerKind::conv) throw std::invalid_argument("geometry requested for a non-conv layer");
  ZapLayerGeometry g;
  g.layer = conv_layer;
  g.c_in = l.in_shape[0];
  g.c_out = l.out_shape[0];
  g.height = l.out_shape[1];
  g.width = l.out_shape[2];
  g.kernel = l.spec.kernel;
  const IndexSets sets = index_sets(pattern, g.width, g.height);
  g.computed_elements = sets.computed.size() * g.c_out;
  g.predicted_elements = sets.predicted.size() * g.c_out;
  return g;
}

std::uint64_t Model::baseline_conv_macs() const {
  std::uint64_t total = 0;
  for (const auto& l : layers_) {
    if (l.spec.kind != LayerKind::conv) continue;
    total += static_cast<std::uint64_t>(l.spec.kernel) * l.spec.kernel * l.in_shape[0] * shape_size(l.out_shape);
  }
  return total;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) {
    switch (l.spec.kind) {
      case LayerKind::conv: n += l.conv.weights.size() + l.conv.bias.size(); break;
      case LayerKind::batch_norm: n += 2 * l.bn.channels(); break;
      case LayerKind::linear: n += l.weight.size() + l.bias.size(); break;
      default: break;
    }
  }
  return n;
}

void Model::attach_zaps(const PatternMask& pattern, std::uint64_t seed) {
  zaps_.clear();
  for (auto i : zap_layers()) {
    zaps_.emplace(i, ZapUnit::create(layers_[i].out_shape[0], pattern, seed * 1000003ULL + i));
  }
}

Tensor Model::forward(const Tensor& input, MacCounter& counter, const ForwardOptions& opt) const {
  const FeatureDims d = feature_dims(input, "model input");
  if (d.c != spec_.in_channels || d.h != spec_.in_height || d.w != spec_.in_width) {
    throw ShapeError("model input " + to_string(input.shape()) + " does not match " +
                     to_string({spec_.in_channels, spec_.in_height, spec_.in_width}));
  }
  Tensor x = input;
  std::size_t i = 0;
  while (i < layers_.size()) {
    const Layer& l = layers_[i];
    const std::string tag = layer_name(i);
    switch (l.spec.kind) {
      case LayerKind::conv: {
        if (!l.spec.zap) {
          x = conv2d(x, l.conv, counter, tag + ".conv");
          ++i;
          break;
        }
        const Block b = block(i);
        const BatchNormParams* bn = b.bn ? &layers_[*b.bn].bn : nullptr;
        ZapLayerEvent ev;
        ev.layer = i;
        ev.ifm = &x;
        Tensor y, m;
        PredictionOutcome oc;
        if (opt.zaps.enabled) {
          auto it = zaps_.find(i);
          if (it == zaps_.end()) throw std::invalid_argument("layer " + std::to_string(i) + " has no trained predictor");
          PredictedConvOptions po;
          po.batch_norm = bn;
          po.record_mispredictions = opt.record_mispredictions;
          po.sigma = opt.zaps.sigma_for(i);
          po.m_out = &m;
          po.tag = tag;
          std::tie(y, oc) = predicted_conv(x, l.conv, it->second, counter, po);
          ev.outcome = &oc;
          if (!m.empty()) ev.m = &m;
        } else {
          y = conv2d(x, l.conv, counter, tag + ".conv");
          if (bn) y = batch_norm(y, *bn);
          y = relu(y);
        }
        ev.ofm = &y;
        if (opt.observer) opt.observer(ev);
        x = std::move(y);
        i = b.relu + 1;
        break;
      }
      case LayerKind::batch_norm:
        x = batch_norm(x, l.bn);
        ++i;
        break;
      case LayerKind::relu:
        x = relu(x, l.spec.cap);
        ++i;
        break;
      case LayerKind::maxpool:
        x = maxpool2x2(x);
        ++i;
        break;
      case LayerKind::linear:
        x = linear(x, l.weight, l.bias, counter, tag + ".linear");
        ++i;
        break;
    }
  }
  return x;
}

Tensor Model::calibration_pass(const Tensor& input, const ZapSettings& zaps) {
  MacCounter scratch;
  Tensor x = input;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    Layer& l = layers_[i];
    switch (l.spec.kind) {
      case LayerKind::conv:
        x = conv2d(x, l.conv, scratch);
        if (l.spec.zap && zaps.enabled) {
          const Block b = block(i);
          if (b.bn) x = batch_norm(x, layers_[*b.bn].bn, true);
          x = relu(x);
          auto it = zaps_.find(i);
          if (it == zaps_.end()) throw std::invalid_argument("layer " + std::to_string(i) + " has no trained predictor");
          const Tensor gate = skip_gate(x, it->second, zaps.sigma_for(i));
          for (std::size_t k = 0; k < x.size(); ++k) x[k] *= gate[k];
          i = b.relu;
        }
        break;
      case LayerKind::batch_norm: x = batch_norm(x, l.bn, true); break;
      case LayerKind::relu: x = relu(x, l.spec.cap); break;
      case LayerKind::maxpool: x = maxpool2x2(x); break;
      case LayerKind::linear: x = linear(x, l.weight, l.bias, scratch); break;
    }
  }
  return x;
}

WeightContainer Model::to_container() const {
  WeightContainer c;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const Layer& l = layers_[i];
    const std::string n = layer_name(i);
    switch (l.spec.kind) {
      case LayerKind::conv:
        c.add(n + ".w", l.conv.weights);
        c.add(n + ".b", l.conv.bias);
        break;
      case LayerKind::batch_norm: c.add(n + ".bn", pack_bn(l.bn)); break;
      case LayerKind::linear:
        c.add(n + ".w", l.weight);
        c.add(n + ".b", l.bias);
        break;
      default: break;
    }
  }
  for (const auto& [i, u] : zaps_) {
    const std::string n = "zap." + std::to_string(i) + ".";
    c.add(n + "dw1", u.dw1);
    c.add(n + "bn1", pack_bn(u.bn1));
    c.add(n + "dw2", u.dw2);
    c.add(n + "bn2", pack_bn(u.bn2));
    c.add(n + "pattern", Tensor::scalar(static_cast<float>(static_cast<int>(u.pattern.id()))));
  }
  return c;
}

void Model::load_container(const WeightContainer& c) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    Layer& l = layers_[i];
    const std::string n = layer_name(i);
    switch (l.spec.kind) {
      case LayerKind::conv:
        l.conv.weights = require(c, n + ".w", l.conv.weights.shape());
        l.conv.bias = require(c, n + ".b", l.conv.bias.shape());
        break;
      case LayerKind::batch_norm:
        l.bn = unpack_bn(require(c, n + ".bn", {4, l.bn.channels()}), l.bn.channels(), n + ".bn");
        break;
      case LayerKind::linear:
        l.weight = require(c, n + ".w", l.weight.shape());
        l.bias = require(c, n + ".b", l.bias.shape());
        break;
      default: break;
    }
  }
  zaps_.clear();
  const auto pattern = stored_pattern(c);
  for (auto i : zap_layers()) {
    const std::string n = "zap." + std::to_string(i) + ".";
    if (!c.find(n + "dw1")) continue;
    const std::size_t ch = layers_[i].out_shape[0];
    const Shape fshape{kZapKernel, kZapKernel, 1, ch};
    ZapUnit u;
    u.dw1 = require(c, n + "dw1", fshape);
    u.dw2 = require(c, n + "dw2", fshape);
    u.bn1 = unpack_bn(require(c, n + "bn1", {4, ch}), ch, n + "bn1");
    u.bn2 = unpack_bn(require(c, n + "bn2", {4, ch}), ch, n + "bn2");
    u.pattern = pattern.value_or(PatternMask::make(PatternId::B));
    if (const Tensor* p = c.find(n + "pattern")) {
      const float code = (*p)[0];
      if (code < 0.0f || code > 3.0f || code != std::floor(code)) {
        throw std::invalid_argument("entry '" + n + "pattern' holds an invalid pattern code");
      }
      u.pattern = PatternMask::make(static_cast<PatternId>(static_cast<int>(code)));
    }
    zaps_.emplace(i, std::move(u));
  }
}

std::optional<PatternMask> stored_pattern(const WeightContainer& c) {
  for (const auto& e : c.entries()) {
    if (e.name.starts_with("zap.") && e.name.ends_with(".pattern") && e.tensor.size() == 1) {
      const float code = e.tensor[0];
      if (code >= 0.0f && code <= 3.0f && code == std::floor(code)) {
        return PatternMask::make(static_cast<PatternId>(static_cast<int>(code)));
      }
    }
  }
  return std::nullopt;
}

}  // namespace zap
