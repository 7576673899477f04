#include "zap/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

namespace zap {

ZapUnit ZapUnit::create(std::size_t channels, PatternMask pattern, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const float bound = 1.0f / std::sqrt(static_cast<float>(kZapKernel * kZapKernel));
  std::uniform_real_distribution<float> dist(-bound, bound);
  ZapUnit u;
  u.pattern = pattern;
  u.dw1 = Tensor({kZapKernel, kZapKernel, 1, channels});
  u.dw2 = Tensor({kZapKernel, kZapKernel, 1, channels});
  for (auto& v : u.dw1.vec()) v = dist(rng);
  for (auto& v : u.dw2.vec()) v = dist(rng);
  u.bn1 = BatchNormParams::identity(channels);
  u.bn2 = BatchNormParams::identity(channels);
  return u;
}

void ZapUnit::validate() const {
  if (dw1.rank() != 4 || dw1.dim(0) != kZapKernel || dw1.dim(1) != kZapKernel || dw1.dim(2) != 1) {
    throw ShapeError("predictor filters must be [3,3,1,C], got " + to_string(dw1.shape()));
  }
  if (dw2.shape() != dw1.shape()) {
    throw ShapeError("predictor filter banks differ: " + to_string(dw1.shape()) + " vs " + to_string(dw2.shape()));
  }
  bn1.validate();
  bn2.validate();
  if (bn1.channels() != channels() || bn2.channels() != channels()) {
    throw ShapeError("predictor batch norms do not match " + std::to_string(channels()) + " channels");
  }
}

Tensor predict_mask(const Tensor& partial_ofm, const ZapUnit& unit, MacCounter& counter, std::string_view tag) {
  unit.validate();
  const FeatureDims d = feature_dims(partial_ofm, "partial ofm");
  if (d.c != unit.channels()) {
    throw ShapeError("partial ofm " + to_string(partial_ofm.shape()) + " has " + std::to_string(d.c) +
                     " channels, predictor expects " + std::to_string(unit.channels()));
  }
  const IndexSets sets = index_sets(unit.pattern, d.w, d.h);
  const std::size_t per_plane = d.n * d.c;
  Tensor h = dwconv2d(partial_ofm, unit.dw1, counter, per_plane * sets.computed.size(), tag);
  h = relu(batch_norm(h, unit.bn1));
  h = dwconv2d(h, unit.dw2, counter, per_plane * sets.predicted.size(), tag);
  return batch_norm(h, unit.bn2);
}

std::vector<bool> binarize(const Tensor& m, float sigma) {
  std::vector<bool> out(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i] > sigma;
  return out;
}

std::pair<Tensor, PredictionOutcome> predicted_conv(const Tensor& input, const ConvParams& params,
                                                    const ZapUnit& unit, MacCounter& counter,
                                                    const PredictedConvOptions& opt) {
  const FeatureDims in = feature_dims(input, "conv input");
  const simd::ConvGeometry g = conv_geometry(in, params);
  if (params.stride != 1) throw ShapeError("predicted convolution supports stride 1 only");
  if (opt.batch_norm) {
    opt.batch_norm->validate();
    if (opt.batch_norm->channels() != g.c_out) throw ShapeError("host batch norm does not match conv output channels");
  }
  unit.validate();
  if (unit.channels() != g.c_out) {
    throw ShapeError("predictor has " + std::to_string(unit.channels()) + " channels, conv produces " +
                     std::to_string(g.c_out));
  }
  const std::size_t ho = g.h_out(), wo = g.w_out(), plane = ho * wo;
  const std::size_t co = g.c_out;
  Tensor out(feature_shape(input, co, ho, wo));
  const IndexSets sets = index_sets(unit.pattern, wo, ho);
  const std::uint64_t macs_per = g.k * g.k * g.c_in;
  const std::string conv_tag = std::string(opt.tag) + ".conv";
  const std::string zap_tag = std::string(opt.tag) + ".zap";

  PredictionOutcome oc;
  oc.skipped_mask.assign(out.size(), false);
  oc.computed_set = in.n * sets.computed.size() * co;
  oc.predicted_set = in.n * sets.predicted.size() * co;

  std::vector<float> pixel(co);
  auto compute_pixel = [&](std::size_t n, std::size_t p) {
    conv2d_pixel(input.raw() + n * in.sample(), g, params, p / wo, p % wo, pixel.data());
    float* dst = out.raw() + n * co * plane + p;
    for (std::size_t z = 0; z < co; ++z) dst[z * plane] = host_activation(pixel[z], opt.batch_norm, z);
  };

  const float sigma = opt.sigma.value_or(unit.sigma);
  const bool bypass = !unit.enabled || (std::isinf(sigma) && sigma < 0.0f);
  if (bypass) {
    for (std::size_t n = 0; n < in.n; ++n) {
      for (std::size_t p = 0; p < plane; ++p) compute_pixel(n, p);
    }
    oc.computed = oc.predicted_set;
    counter.add(conv_tag, macs_per * (oc.computed_set + oc.predicted_set));
    return {std::move(out), std::move(oc)};
  }

  for (std::size_t n = 0; n < in.n; ++n) {
    for (auto p : sets.computed) compute_pixel(n, p);
  }
  counter.add(conv_tag, macs_per * oc.computed_set);

  Tensor m = predict_mask(out, unit, counter, zap_tag);

  std::vector<std::size_t> wanted;
  for (std::size_t n = 0; n < in.n; ++n) {
    const float* sample = input.raw() + n * in.sample();
    const std::size_t base = n * co * plane;
    for (auto p : sets.predicted) {
      wanted.clear();
      for (std::size_t z = 0; z < co; ++z) {
        const std::size_t idx = base + z * plane + p;
        if (m[idx] > sigma) {
          wanted.push_back(z);
        } else {
          oc.skipped_mask[idx] = true;
          ++oc.skipped;
          if (opt.record_mispredictions) {
            const float v =
                host_activation(conv2d_element(sample, g, params, p / wo, p % wo, z), opt.batch_norm, z);
            if (v > 0.0f) oc.mispredictions.push_back({idx, v});
          }
        }
      }
      oc.computed += wanted.size();
      // Whole-pixel and single-element evaluation give identical values; the
      // pixel kernel is only faster when most channels are needed.
      if (wanted.size() * 4 >= co) {
        conv2d_pixel(sample, g, params, p / wo, p % wo, pixel.data());
        for (auto z : wanted) out[base + z * plane + p] = host_activation(pixel[z], opt.batch_norm, z);
      } else {
        for (auto z : wanted) {
          out[base + z * plane + p] =
              host_activation(conv2d_element(sample, g, params, p / wo, p % wo, z), opt.batch_norm, z);
        }
      }
    }
  }
  counter.add(conv_tag, macs_per * oc.computed);
  if (opt.m_out) *opt.m_out = std::move(m);
  return {std::move(out), std::move(oc)};
}

Tensor skip_gate(const Tensor& ofm, const ZapUnit& unit, float sigma) {
  Tensor gate = Tensor::like(ofm, 1.0f);
  if (!unit.enabled || (std::isinf(sigma) && sigma < 0.0f)) return gate;
  const FeatureDims d = feature_dims(ofm, "gated ofm");
  const IndexSets sets = index_sets(unit.pattern, d.w, d.h);
  MacCounter scratch;
  const Tensor m = predict_mask(apply_mask(ofm, sets.computed), unit, scratch);
  for (std::size_t nc = 0; nc < d.n * d.c; ++nc) {
    for (auto p : sets.predicted) {
      const std::size_t idx = nc * d.plane() + p;
      if (!(m[idx] > sigma)) gate[idx] = 0.0f;
    }
  }
  return gate;
}

double MispredictionHistogram::total_share() const {
  double s = 0.0;
  for (double v : share) s += v;
  return s;
}

MispredictionHistogram misprediction_histogram(const PredictionOutcome& outcome, const Tensor& true_ofm,
                                               double bin_width) {
  if (!(bin_width > 0.0)) throw std::invalid_argument("histogram bin width must be positive");
  if (outcome.skipped_mask.size() != true_ofm.size()) {
    throw ShapeError("prediction outcome covers " + std::to_string(outcome.skipped_mask.size()) +
                     " elements, ofm has " + std::to_string(true_ofm.size()));
  }
  MispredictionHistogram h;
  h.bin_width = bin_width;
  h.ofm_elements = true_ofm.size();
  std::vector<std::size_t> counts;
  for (std::size_t i = 0; i < true_ofm.size(); ++i) {
    if (!outcome.skipped_mask[i] || !(true_ofm[i] > 0.0f)) continue;
    const auto bin = static_cast<std::size_t>(std::floor(true_ofm[i] / bin_width));
    if (bin >= counts.size()) counts.resize(bin + 1, 0);
    ++counts[bin];
    ++h.mispredicted;
  }
  h.share.resize(counts.size());
  for (std::size_t b = 0; b < counts.size(); ++b) {
    h.share[b] = static_cast<double>(counts[b]) / static_cast<double>(h.ofm_elements);
  }
  return h;
}

void merge_histogram(MispredictionHistogram& into, const MispredictionHistogram& other) {
  if (into.ofm_elements == 0) {
    into = other;
    return;
  }
  if (into.bin_width != other.bin_width) throw std::invalid_argument("cannot merge histograms with different bins");
  const double total = static_cast<double>(into.ofm_elements + other.ofm_elements);
  const double wa = static_cast<double>(into.ofm_elements) / total;
  const double wb = static_cast<double>(other.ofm_elements) / total;
  const std::size_t bins = std::max(into.share.size(), other.share.size());
  into.share.resize(bins, 0.0);
  for (std::size_t b = 0; b < bins; ++b) {
    into.share[b] = into.share[b] * wa + (b < other.share.size() ? other.share[b] * wb : 0.0);
  }
  into.ofm_elements += other.ofm_elements;
  into.mispredicted += other.mispredicted;
}

}  // namespace zap
