#include "zap/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "zap/simd/kernels.hpp"

namespace zap::autograd {

Var Tape::push(Tensor value, bool requires_grad, std::function<void(Tape&)> backward) {
  nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, requires_grad ? std::move(backward) : nullptr});
  return Var{nodes_.size() - 1};
}

Var Tape::constant(Tensor value) { return push(std::move(value), false); }

Var Tape::parameter(Tensor value) { return push(std::move(value), true); }

Tensor& Tape::grad_ref(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor::like(n.value);
  return n.grad;
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.grad.empty() ? Tensor::like(n.value) : n.grad;
}

bool Tape::any_grad(std::initializer_list<Var> vs) const {
  return std::any_of(vs.begin(), vs.end(), [&](Var v) { return nodes_.at(v.id).requires_grad; });
}

void Tape::backward(Var loss) {
  if (value(loss).size() != 1) {
    throw ShapeError("backward() needs a single-element loss, got " + to_string(value(loss).shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor{};
  grad_ref(loss.id)[0] = 1.0f;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && !n.grad.empty()) n.backward(*this);
  }
}

Var Tape::conv2d(Var x, Var weights, Var bias, std::size_t stride, std::size_t padding) {
  ConvParams params{value(weights), value(bias), stride, padding};
  MacCounter scratch;
  Tensor out = zap::conv2d(value(x), params, scratch);
  const std::size_t self = nodes_.size();
  return push(std::move(out), any_grad({x, weights, bias}), [=](Tape& t) {
    const Tensor& in = t.value(x);
    const Tensor& w = t.value(weights);
    const Tensor& gout = t.nodes_[self].grad;
    const FeatureDims d = feature_dims(in);
    const simd::ConvGeometry g{d.c, d.h, d.w, w.dim(3), w.dim(0), stride, padding};
    const std::size_t ho = g.h_out(), wo = g.w_out(), plane = ho * wo;
    Tensor gin = Tensor::like(in);
    Tensor gw = Tensor::like(w);
    Tensor gb({g.c_out});
    std::vector<float> gz(g.c_out);
    const auto& kern = simd::active();
    for (std::size_t n = 0; n < d.n; ++n) {
      const float* go = gout.raw() + n * g.c_out * plane;
      for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox) {
          bool nonzero = false;
          for (std::size_t z = 0; z < g.c_out; ++z) {
            gz[z] = go[z * plane + oy * wo + ox];
            gb[z] += gz[z];
            nonzero |= gz[z] != 0.0f;
          }
          if (!nonzero) continue;
          kern.conv_pixel_backward(g, in.raw() + n * d.sample(), w.raw(), oy, ox, gz.data(),
                                   gin.raw() + n * d.sample(), gw.raw());
        }
      }
    }
    auto accumulate = [&](Var v, const Tensor& gsrc) {
      if (!t.requires_grad(v)) return;
      Tensor& dst = t.grad_ref(v.id);
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += gsrc[i];
    };
    accumulate(x, gin);
    accumulate(weights, gw);
    accumulate(bias, gb);
  });
}

Var Tape::dwconv2d(Var x, Var filters) {
  MacCounter scratch;
  Tensor out = zap::dwconv2d(value(x), value(filters), scratch);
  const std::size_t self = nodes_.size();
  return push(std::move(out), any_grad({x, filters}), [=](Tape& t) {
    const Tensor& in = t.value(x);
    const Tensor& f = t.value(filters);
    const Tensor& gout = t.nodes_[self].grad;
    const FeatureDims d = feature_dims(in);
    const std::size_t k = f.dim(0);
    const auto pad = static_cast<std::ptrdiff_t>(k / 2);
    const auto& kern = simd::active();
    std::vector<float> flipped(k * k), plane(d.plane());
    if (t.requires_grad(x)) {
      Tensor& gin = t.grad_ref(x.id);
      for (std::size_t c = 0; c < d.c; ++c) {
        for (std::size_t i = 0; i < k; ++i) {
          for (std::size_t j = 0; j < k; ++j) flipped[i * k + j] = f[((k - 1 - i) * k + (k - 1 - j)) * d.c + c];
        }
        for (std::size_t n = 0; n < d.n; ++n) {
          const std::size_t off = n * d.sample() + c * d.plane();
          kern.dw_plane(gout.raw() + off, d.h, d.w, flipped.data(), k, plane.data());
          for (std::size_t i = 0; i < d.plane(); ++i) gin[off + i] += plane[i];
        }
      }
    }
    if (t.requires_grad(filters)) {
      Tensor& gf = t.grad_ref(filters.id);
      const auto wi = static_cast<std::ptrdiff_t>(d.w);
      for (std::size_t c = 0; c < d.c; ++c) {
        for (std::size_t i = 0; i < k; ++i) {
          const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(i) - pad;
          const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -shift);
          const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(wi, wi - shift);
          if (x1 <= x0) continue;
          for (std::size_t j = 0; j < k; ++j) {
            double acc = 0.0;
            for (std::size_t n = 0; n < d.n; ++n) {
              const std::size_t off = n * d.sample() + c * d.plane();
              for (std::size_t y = 0; y < d.h; ++y) {
                const auto yy = static_cast<std::ptrdiff_t>(y + j) - pad;
                if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(d.h)) continue;
                acc += kern.dot(gout.raw() + off + y * d.w + x0,
                                in.raw() + off + static_cast<std::size_t>(yy) * d.w + x0 + shift,
                                static_cast<std::size_t>(x1 - x0));
              }
            }
            gf[(i * k + j) * d.c + c] += static_cast<float>(acc);
          }
        }
      }
    }
  });
}

Var Tape::batch_norm_train(Var x, Var gamma, Var beta, float eps, BatchNormParams* running) {
  const Tensor& in = value(x);
  const FeatureDims d = feature_dims(in, "batch-norm input");
  if (value(gamma).size() != d.c || value(beta).size() != d.c) {
    throw ShapeError("batch-norm parameters do not match input " + to_string(in.shape()));
  }
  const ChannelStats stats = channel_statistics(in);
  if (running) update_running_stats(stats, *running);
  std::vector<float> mean(d.c), inv_std(d.c);
  Tensor xhat = Tensor::like(in);
  Tensor out = Tensor::like(in);
  for (std::size_t c = 0; c < d.c; ++c) {
    mean[c] = static_cast<float>(stats.mean[c]);
    inv_std[c] = static_cast<float>(1.0 / std::sqrt(stats.var[c] + eps));
    const float g = value(gamma)[c], b = value(beta)[c];
    for (std::size_t n = 0; n < d.n; ++n) {
      const std::size_t off = n * d.sample() + c * d.plane();
      for (std::size_t i = 0; i < d.plane(); ++i) {
        xhat[off + i] = (in[off + i] - mean[c]) * inv_std[c];
        out[off + i] = xhat[off + i] * g + b;
      }
    }
  }
  const std::size_t self = nodes_.size();
  return push(std::move(out), any_grad({x, gamma, beta}), [=, xhat = std::move(xhat)](Tape& t) {
    const Tensor& gout = t.nodes_[self].grad;
    const double count = static_cast<double>(d.n * d.plane());
    Tensor* gin = t.requires_grad(x) ? &t.grad_ref(x.id) : nullptr;
    for (std::size_t c = 0; c < d.c; ++c) {
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::size_t n = 0; n < d.n; ++n) {
        const std::size_t off = n * d.sample() + c * d.plane();
        for (std::size_t i = 0; i < d.plane(); ++i) {
          sum_g += gout[off + i];
          sum_gx += static_cast<double>(gout[off + i]) * xhat[off + i];
        }
      }
      if (t.requires_grad(gamma)) t.grad_ref(gamma.id)[c] += static_cast<float>(sum_gx);
      if (t.requires_grad(beta)) t.grad_ref(beta.id)[c] += static_cast<float>(sum_g);
      if (!gin) continue;
      const double scale = t.value(gamma)[c] * inv_std[c] / count;
      for (std::size_t n = 0; n < d.n; ++n) {
        const std::size_t off = n * d.sample() + c * d.plane();
        for (std::size_t i = 0; i < d.plane(); ++i) {
          (*gin)[off + i] += static_cast<float>(scale * (count * gout[off + i] - sum_g - xhat[off + i] * sum_gx));
        }
      }
    }
  });
}

Var Tape::batch_norm_eval(Var x, Var gamma, Var beta, const Tensor& mean, const Tensor& var, float eps) {
  BatchNormParams p{value(gamma), value(beta), mean, var, eps};
  Tensor out = zap::batch_norm(value(x), p);
  const std::size_t self = nodes_.size();
  return push(std::move(out), any_grad({x, gamma, beta}), [=](Tape& t) {
    const Tensor& in = t.value(x);
    const Tensor& gout = t.nodes_[self].grad;
    const FeatureDims d = feature_dims(in);
    for (std::size_t c = 0; c < d.c; ++c) {
      const float inv_std = 1.0f / std::sqrt(var[c] + eps);
      const float g = t.value(gamma)[c];
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::size_t n = 0; n < d.n; ++n) {
        const std::size_t off = n * d.sample() + c * d.plane();
        for (std::size_t i = 0; i < d.plane(); ++i) {
          sum_g += gout[off + i];
          sum_gx += static_cast<double>(gout[off + i]) * (in[off + i] - mean[c]) * inv_std;
          if (t.requires_grad(x)) t.grad_ref(x.id)[off + i] += gout[off + i] * g * inv_std;
        }
      }
      if (t.requires_grad(gamma)) t.grad_ref(gamma.id)[c] += static_cast<float>(sum_gx);
      if (t.requires_grad(beta)) t.grad_ref(beta.id)[c] += static_cast<float>(sum_g);
    }
  });
}

Var Tape::relu(Var x, std::optional<float> cap) {
  Tensor out = zap::relu(value(x), cap);
  const std::size_t self = nodes_.size();
  return push(std::move(out), any_grad({x}), [=](Tape& t) {
    const Tensor& in = t.value(x);
    const Tensor& gout = t.nodes_[self].grad;
    Tensor& gin = t.grad_ref(x.id);
    for (std::size_t i = 0; i < in.size(); ++i) {
      const bool pass = in[i] > 0.0f && (!cap || in[i] < *cap);
      if (pass) gin[i] += gout[i];
    }
  });
}

Var Tape::maxpool2x2(Var x) {
  Tensor out = zap::maxpool2x2(value(x));
  const std::size_t self = nodes_.size();
  return push(std::move(out), any_grad({x}), [=](Tape& t) {
    const Tensor& in = t.value(x);
    const Tensor& gout = t.nodes_[self].grad;
    Tensor& gin = t.grad_ref(x.id);
    const FeatureDims d = feature_dims(in);
    const std::size_t ho = d.h / 2, wo = d.w / 2;
    for (std::size_t p = 0; p < d.n * d.c; ++p) {
      const std::size_t base = p * d.plane();
      for (std::size_t y = 0; y < ho; ++y) {
        for (std::size_t xo = 0; xo < wo; ++xo) {
          const std::size_t cand[4] = {base + 2 * y * d.w + 2 * xo, base + 2 * y * d.w + 2 * xo + 1,
                                       base + (2 * y + 1) * d.w + 2 * xo, base + (2 * y + 1) * d.w + 2 * xo + 1};
          std::size_t best = cand[0];
          for (std::size_t q = 1; q < 4; ++q) {
            if (in[cand[q]] > in[best]) best = cand[q];
          }
          gin[best] += gout[p * ho * wo + y * wo + xo];
        }
      }
    }
  });
}

Var Tape::linear(Var x, Var weights, Var bias) {
  MacCounter scratch;
  Tensor out = zap::linear(value(x), value(weights), value(bias), scratch);
  const std::size_t self = nodes_.size();
  return push(std::move(out), any_grad({x, weights, bias}), [=](Tape& t) {
    const Tensor& in = t.value(x);
    const Tensor& w = t.value(weights);
    const Tensor& gout = t.nodes_[self].grad;
    const std::size_t fan_in = w.dim(0), fan_out = w.dim(1);
    const std::size_t n = in.size() / fan_in;
    const auto& kern = simd::active();
    for (std::size_t s = 0; s < n; ++s) {
      const float* g = gout.raw() + s * fan_out;
      const float* xi = in.raw() + s * fan_in;
      if (t.requires_grad(weights)) {
        Tensor& gw = t.grad_ref(weights.id);
        for (std::size_t i = 0; i < fan_in; ++i) kern.axpy(xi[i], g, gw.raw() + i * fan_out, fan_out);
      }
      if (t.requires_grad(bias)) {
        Tensor& gb = t.grad_ref(bias.id);
        for (std::size_t o = 0; o < fan_out; ++o) gb[o] += g[o];
      }
      if (t.requires_grad(x)) {
        Tensor& gx = t.grad_ref(x.id);
        for (std::size_t i = 0; i < fan_in; ++i) gx[s * fan_in + i] += kern.dot(w.raw() + i * fan_out, g, fan_out);
      }
    }
  });
}

Var Tape::mul(Var a, Var b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (va.shape() != vb.shape()) {
    throw ShapeError("mul operands " + to_string(va.shape()) + " and " + to_string(vb.shape()) + " differ");
  }
  Tensor out = Tensor::like(va);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
  const std::size_t self = nodes_.size();
  return push(std::move(out), any_grad({a, b}), [=](Tape& t) {
    const Tensor& gout = t.nodes_[self].grad;
    const Tensor ca = t.value(a);
    const Tensor cb = t.value(b);
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_ref(a.id);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gout[i] * cb[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_ref(b.id);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gout[i] * ca[i];
    }
  });
}

Var Tape::gate(Var x, const Tensor& mask) {
  const Tensor& vx = value(x);
  if (vx.shape() != mask.shape()) {
    throw ShapeError("gate mask " + to_string(mask.shape()) + " does not match " + to_string(vx.shape()));
  }
  Tensor out = Tensor::like(vx);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = vx[i] * mask[i];
  const std::size_t self = nodes_.size();
  return push(std::move(out), any_grad({x}), [=](Tape& t) {
    const Tensor& gout = t.nodes_[self].grad;
    Tensor& gx = t.grad_ref(x.id);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gout[i] * mask[i];
  });
}

Var Tape::mse_loss(Var pred, const Tensor& target, const std::vector<bool>* select) {
  const Tensor& p = value(pred);
  if (p.shape() != target.shape()) {
    throw ShapeError("mse prediction " + to_string(p.shape()) + " and target " + to_string(target.shape()) +
                     " differ");
  }
  if (select && select->size() != p.size()) throw ShapeError("mse selection length does not match prediction");
  std::size_t count = 0;
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (select && !(*select)[i]) continue;
    const double d = static_cast<double>(p[i]) - target[i];
    sum += d * d;
    ++count;
  }
  if (count == 0) throw std::invalid_argument("mse_loss: empty index set");
  const std::size_t self = nodes_.size();
  std::vector<bool> sel = select ? *select : std::vector<bool>{};
  return push(Tensor::scalar(static_cast<float>(sum / static_cast<double>(count))), any_grad({pred}),
              [=, sel = std::move(sel)](Tape& t) {
                const float g = t.nodes_[self].grad[0];
                const Tensor& pv = t.value(pred);
                Tensor& gp = t.grad_ref(pred.id);
                const float scale = 2.0f * g / static_cast<float>(count);
                for (std::size_t i = 0; i < pv.size(); ++i) {
                  if (!sel.empty() && !sel[i]) continue;
                  gp[i] += scale * (pv[i] - target[i]);
                }
              });
}

Var Tape::cross_entropy(Var logits, std::span<const std::size_t> labels) {
  const Tensor& z = value(logits);
  const std::size_t classes = z.shape().back();
  const std::size_t n = z.size() / classes;
  if (labels.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     to_string(z.shape()));
  }
  Tensor probs = Tensor::like(z);
  double loss = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    if (labels[s] >= classes) throw std::out_of_range("cross_entropy: label out of range");
    const float* row = z.raw() + s * classes;
    const float mx = *std::max_element(row, row + classes);
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) denom += std::exp(static_cast<double>(row[c]) - mx);
    for (std::size_t c = 0; c < classes; ++c) {
      probs[s * classes + c] = static_cast<float>(std::exp(static_cast<double>(row[c]) - mx) / denom);
    }
    loss += std::log(denom) + mx - row[labels[s]];
  }
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  const std::size_t self = nodes_.size();
  return push(Tensor::scalar(static_cast<float>(loss / static_cast<double>(n))), any_grad({logits}),
              [=, probs = std::move(probs), lab = std::move(lab)](Tape& t) {
                const float g = t.nodes_[self].grad[0] / static_cast<float>(n);
                Tensor& gz = t.grad_ref(logits.id);
                for (std::size_t s = 0; s < n; ++s) {
                  for (std::size_t c = 0; c < classes; ++c) {
                    const float onehot = c == lab[s] ? 1.0f : 0.0f;
                    gz[s * classes + c] += g * (probs[s * classes + c] - onehot);
                  }
                }
              });
}

}  // namespace zap::autograd
