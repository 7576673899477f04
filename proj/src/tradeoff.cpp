#include "zap/tradeoff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>
#include <json.hpp>
#include <unsupported/Eigen/LevenbergMarquardt>

#include "zap/trainer.hpp"

namespace zap {
namespace {

using nlohmann::json;

double interpolate(std::span<const double> xs, std::span<const double> ys, double x) {
  if (xs.empty()) throw std::invalid_argument("cannot interpolate an empty curve");
  if (x <= xs.front()) return ys.front();
  if (x >= xs.back()) return ys.back();
  const auto it = std::upper_bound(xs.begin(), xs.end(), x);
  const std::size_t k = static_cast<std::size_t>(it - xs.begin());
  const double t = (x - xs[k - 1]) / (xs[k] - xs[k - 1]);
  return ys[k - 1] + t * (ys[k] - ys[k - 1]);
}

// Residuals of the normalized sigmoid d + c / (1 + exp(-a (t - b))).
struct SigmoidResidual : Eigen::DenseFunctor<double> {
  SigmoidResidual(const Eigen::VectorXd& t, const Eigen::VectorXd& y)
      : Eigen::DenseFunctor<double>(4, static_cast<int>(t.size())), t_(t), y_(y) {}

  int operator()(const InputType& p, ValueType& f) const {
    for (Eigen::Index i = 0; i < t_.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-p[0] * (t_[i] - p[1])));
      f[i] = p[3] + p[2] * s - y_[i];
    }
    return 0;
  }

  int df(const InputType& p, JacobianType& j) const {
    for (Eigen::Index i = 0; i < t_.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-p[0] * (t_[i] - p[1])));
      const double ds = s * (1.0 - s);
      j(i, 0) = p[2] * ds * (t_[i] - p[1]);
      j(i, 1) = -p[2] * ds * p[0];
      j(i, 2) = s;
      j(i, 3) = 1.0;
    }
    return 0;
  }

  Eigen::VectorXd t_, y_;
};

json histogram_json(const ValueHistogram& h) {
  return {{"lo", h.lo}, {"width", h.width}, {"total", h.total}, {"counts", h.counts}};
}

ValueHistogram histogram_from(const json& j) {
  ValueHistogram h;
  h.lo = j.at("lo").get<double>();
  h.width = j.at("width").get<double>();
  h.total = j.at("total").get<std::uint64_t>();
  h.counts = j.at("counts").get<std::vector<std::uint64_t>>();
  return h;
}

json geometry_json(const ZapLayerGeometry& g) {
  return {{"layer", g.layer},   {"c_in", g.c_in},     {"c_out", g.c_out},
          {"height", g.height}, {"width", g.width},   {"kernel", g.kernel},
          {"computed_elements", g.computed_elements}, {"predicted_elements", g.predicted_elements}};
}

ZapLayerGeometry geometry_from(const json& j) {
  ZapLayerGeometry g;
  g.layer = j.at("layer").get<std::size_t>();
  g.c_in = j.at("c_in").get<std::size_t>();
  g.c_out = j.at("c_out").get<std::size_t>();
  g.height = j.at("height").get<std::size_t>();
  g.width = j.at("width").get<std::size_t>();
  g.kernel = j.at("kernel").get<std::size_t>();
  g.computed_elements = j.at("computed_elements").get<std::size_t>();
  g.predicted_elements = j.at("predicted_elements").get<std::size_t>();
  return g;
}

json curves_json(const LayerCurves& c) {
  return {{"layer", c.layer},
          {"pattern", std::string(1, c.pattern)},
          {"geometry", geometry_json(c.geometry)},
          {"samples", c.samples},
          {"sigma", c.sigma},
          {"eps", c.eps},
          {"zpr", c.zpr},
          {"macs", c.macs},
          {"m_histogram", histogram_json(c.m_histogram)}};
}

LayerCurves curves_from(const json& j) {
  LayerCurves c;
  c.layer = j.at("layer").get<std::size_t>();
  const auto p = j.at("pattern").get<std::string>();
  c.pattern = PatternMask::parse(p).name();
  c.geometry = geometry_from(j.at("geometry"));
  c.samples = j.at("samples").get<std::size_t>();
  c.sigma = j.at("sigma").get<std::vector<double>>();
  c.eps = j.at("eps").get<std::vector<double>>();
  c.zpr = j.at("zpr").get<std::vector<double>>();
  c.macs = j.at("macs").get<std::vector<double>>();
  if (c.eps.size() != c.sigma.size() || c.zpr.size() != c.sigma.size() || c.macs.size() != c.sigma.size()) {
    throw std::invalid_argument("curve arrays for layer " + std::to_string(c.layer) + " differ in length");
  }
  c.m_histogram = histogram_from(j.at("m_histogram"));
  return c;
}

json sigmoid_json(const SigmoidFit& f) {
  return {{"a", f.a}, {"b", f.b}, {"c", f.c}, {"d", f.d}, {"rms", f.rms}, {"max_residual", f.max_residual},
          {"x_lo", f.x_lo}, {"x_hi", f.x_hi}};
}

SigmoidFit sigmoid_from(const json& j) {
  SigmoidFit f;
  f.a = j.at("a").get<double>();
  f.b = j.at("b").get<double>();
  f.c = j.at("c").get<double>();
  f.d = j.at("d").get<double>();
  f.rms = j.at("rms").get<double>();
  f.max_residual = j.at("max_residual").get<double>();
  f.x_lo = j.at("x_lo").get<double>();
  f.x_hi = j.at("x_hi").get<double>();
  return f;
}

json linear_json(const LinearAccuracyModel& m) {
  return {{"slope", m.slope}, {"intercept", m.intercept}, {"r2", m.r2}, {"rms", m.rms},
          {"max_residual", m.max_residual}, {"points", m.points}};
}

LinearAccuracyModel linear_from(const json& j) {
  LinearAccuracyModel m;
  m.slope = j.at("slope").get<double>();
  m.intercept = j.at("intercept").get<double>();
  m.r2 = j.at("r2").get<double>();
  m.rms = j.at("rms").get<double>();
  m.max_residual = j.at("max_residual").get<double>();
  m.points = j.at("points").get<std::size_t>();
  return m;
}

template <class F>
auto parse_guard(const char* what, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("malformed ") + what + ": " + e.what());
  }
}

}  // namespace

std::vector<double> sigma_grid(double lo, double hi, double step) {
  if (!(step > 0.0) || !(hi >= lo) || !std::isfinite(lo) || !std::isfinite(hi)) {
    throw std::invalid_argument("sigma grid needs finite lo <= hi and a positive step");
  }
  const auto n = static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9));
  std::vector<double> g(n + 1);
  for (std::size_t k = 0; k <= n; ++k) g[k] = lo + static_cast<double>(k) * step;
  return g;
}

double layer_error(const Tensor& true_ofm, const Tensor& predicted_ofm) {
  if (true_ofm.shape() != predicted_ofm.shape()) {
    throw ShapeError("true ofm " + to_string(true_ofm.shape()) + " and predicted ofm " +
                     to_string(predicted_ofm.shape()) + " differ");
  }
  double t = 0.0, p = 0.0;
  for (std::size_t i = 0; i < true_ofm.size(); ++i) {
    t += true_ofm[i];
    p += predicted_ofm[i];
  }
  if (!(t > 0.0)) return 0.0;
  return std::clamp(1.0 - p / t, 0.0, 1.0);
}

ScaleError scale_error(std::span<const double> eps) {
  ScaleError s;
  for (double e : eps) {
    s.product *= 1.0 - e;
    s.linear -= e;
  }
  return s;
}

ValueHistogram ValueHistogram::build(std::span<const float> values, double width) {
  if (!(width > 0.0)) throw std::invalid_argument("histogram width must be positive");
  ValueHistogram h;
  h.width = width;
  if (values.empty()) return h;
  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  h.lo = std::floor(static_cast<double>(*mn) / width) * width;
  const auto bins = static_cast<std::size_t>(std::floor((static_cast<double>(*mx) - h.lo) / width)) + 1;
  h.counts.assign(bins, 0);
  for (float v : values) {
    auto k = static_cast<std::size_t>(std::floor((static_cast<double>(v) - h.lo) / width));
    ++h.counts[std::min(k, bins - 1)];
  }
  h.total = values.size();
  return h;
}

double zero_prediction_rate(const ValueHistogram& m, double sigma) {
  if (m.total == 0) throw std::invalid_argument("zero-prediction rate of an empty histogram");
  if (sigma < m.min()) return 0.0;
  if (sigma >= m.max()) return 1.0;
  const double pos = (sigma - m.lo) / m.width;
  const auto k = std::min(static_cast<std::size_t>(pos), m.counts.size() - 1);
  const double frac = pos - static_cast<double>(k);
  double below = 0.0;
  for (std::size_t i = 0; i < k; ++i) below += static_cast<double>(m.counts[i]);
  below += frac * static_cast<double>(m.counts[k]);
  return std::clamp(below / static_cast<double>(m.total), 0.0, 1.0);
}

double LayerCurves::macs_for_rate(double rate) const {
  const double conv = static_cast<double>(geometry.conv_macs_per_element());
  return conv * (static_cast<double>(geometry.computed_elements) +
                 static_cast<double>(geometry.predicted_elements) * (1.0 - rate)) +
         static_cast<double>(geometry.predictor_macs());
}

std::vector<LayerCurves> collect_curves(const Model& model, const TinyImageSet& data, std::span<const double> grid,
                                        std::size_t batch) {
  data.validate();
  if (grid.empty() || !std::is_sorted(grid.begin(), grid.end())) {
    throw std::invalid_argument("sigma grid must be non-empty and ascending");
  }
  if (batch == 0) throw std::invalid_argument("batch must be positive");

  struct Acc {
    double mass = 0.0;
    std::vector<double> lost;
    std::vector<std::uint64_t> skipped;
    std::uint64_t predicted = 0;
    std::vector<float> m;
  };
  std::map<std::size_t, Acc> acc;
  for (const auto& [layer, unit] : model.zaps()) {
    acc[layer].lost.assign(grid.size(), 0.0);
    acc[layer].skipped.assign(grid.size(), 0);
  }

  ForwardOptions opt;
  opt.observer = [&](const ZapLayerEvent& ev) {
    auto it = acc.find(ev.layer);
    if (it == acc.end()) return;
    Acc& a = it->second;
    const ZapUnit& unit = model.zaps().at(ev.layer);
    const Tensor& ofm = *ev.ofm;
    const FeatureDims d = feature_dims(ofm);
    const IndexSets sets = index_sets(unit.pattern, d.w, d.h);
    MacCounter scratch;
    const Tensor m = predict_mask(apply_mask(ofm, sets.computed), unit, scratch);
    for (float v : ofm.data()) a.mass += v;
    for (std::size_t nc = 0; nc < d.n * d.c; ++nc) {
      for (auto p : sets.predicted) {
        const std::size_t i = nc * d.plane() + p;
        a.m.push_back(m[i]);
        // First grid value at or above M: skipped from there on.
        const auto g = static_cast<std::size_t>(
            std::lower_bound(grid.begin(), grid.end(), static_cast<double>(m[i])) - grid.begin());
        if (g < grid.size()) {
          a.lost[g] += ofm[i];
          ++a.skipped[g];
        }
      }
    }
    a.predicted += d.n * d.c * sets.predicted.size();
  };
  MacCounter scratch;
  for (std::size_t first = 0; first < data.size(); first += batch) {
    model.forward(data.batch(first, std::min(batch, data.size() - first)), scratch, opt);
  }

  std::vector<LayerCurves> out;
  for (auto& [layer, a] : acc) {
    const ZapUnit& unit = model.zaps().at(layer);
    LayerCurves c;
    c.layer = layer;
    c.pattern = unit.pattern.name();
    c.geometry = model.geometry(layer, unit.pattern);
    c.samples = data.size();
    c.sigma.assign(grid.begin(), grid.end());
    double lost = 0.0;
    std::uint64_t skipped = 0;
    for (std::size_t k = 0; k < grid.size(); ++k) {
      lost += a.lost[k];
      skipped += a.skipped[k];
      c.eps.push_back(a.mass > 0.0 ? std::clamp(lost / a.mass, 0.0, 1.0) : 0.0);
      c.zpr.push_back(a.predicted ? static_cast<double>(skipped) / static_cast<double>(a.predicted) : 0.0);
      c.macs.push_back(c.macs_for_rate(c.zpr.back()));
    }
    c.m_histogram = ValueHistogram::build(a.m);
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<double> measure_errors(const Model& model, const TinyImageSet& data,
                                   const std::map<std::size_t, float>& sigma, float fallback, std::size_t batch) {
  data.validate();
  if (batch == 0) throw std::invalid_argument("batch must be positive");
  std::map<std::size_t, std::pair<double, double>> mass;  // layer -> (total, lost)
  for (const auto& [layer, unit] : model.zaps()) mass[layer] = {0.0, 0.0};
  ForwardOptions opt;
  opt.observer = [&](const ZapLayerEvent& ev) {
    auto it = mass.find(ev.layer);
    if (it == mass.end()) return;
    const ZapUnit& unit = model.zaps().at(ev.layer);
    const auto s = sigma.find(ev.layer);
    const float th = s == sigma.end() ? fallback : s->second;
    const Tensor& ofm = *ev.ofm;
    const FeatureDims d = feature_dims(ofm);
    const IndexSets sets = index_sets(unit.pattern, d.w, d.h);
    MacCounter scratch;
    const Tensor m = predict_mask(apply_mask(ofm, sets.computed), unit, scratch);
    const std::vector<bool> keep = binarize(m, th);
    for (float v : ofm.data()) it->second.first += v;
    for (std::size_t nc = 0; nc < d.n * d.c; ++nc) {
      for (auto p : sets.predicted) {
        const std::size_t i = nc * d.plane() + p;
        if (!keep[i]) it->second.second += ofm[i];
      }
    }
  };
  MacCounter scratch;
  for (std::size_t first = 0; first < data.size(); first += batch) {
    model.forward(data.batch(first, std::min(batch, data.size() - first)), scratch, opt);
  }
  std::vector<double> eps;
  for (const auto& [layer, m] : mass) eps.push_back(m.first > 0.0 ? std::clamp(m.second / m.first, 0.0, 1.0) : 0.0);
  return eps;
}

std::vector<MispredictionHistogram> misprediction_profile(const Model& model, const TinyImageSet& data,
                                                          std::span<const double> sigma, double bin_width,
                                                          std::size_t batch) {
  data.validate();
  if (!(bin_width > 0.0)) throw std::invalid_argument("histogram bin width must be positive");
  if (batch == 0) throw std::invalid_argument("batch must be positive");
  std::vector<MispredictionHistogram> out(sigma.size());
  for (auto& h : out) h.bin_width = bin_width;
  ForwardOptions opt;
  opt.observer = [&](const ZapLayerEvent& ev) {
    auto it = model.zaps().find(ev.layer);
    if (it == model.zaps().end()) return;
    const Model::Block b = model.block(ev.layer);
    PredictedConvOptions pc;
    pc.batch_norm = b.bn ? &model.layers()[*b.bn].bn : nullptr;
    for (std::size_t k = 0; k < sigma.size(); ++k) {
      pc.sigma = static_cast<float>(sigma[k]);
      MacCounter scratch;
      const auto [ofm, outcome] = predicted_conv(*ev.ifm, model.layers()[ev.layer].conv, it->second, scratch, pc);
      merge_histogram(out[k], misprediction_histogram(outcome, *ev.ofm, bin_width));
    }
  };
  MacCounter scratch;
  for (std::size_t first = 0; first < data.size(); first += batch) {
    model.forward(data.batch(first, std::min(batch, data.size() - first)), scratch, opt);
  }
  return out;
}

Sweep run_sweep(const Model& model, const TinyImageSet& data, std::span<const double> grid,
                const SweepOptions& options) {
  if (!model.has_all_zaps()) throw std::invalid_argument("sweep needs a predictor on every zapped layer");
  Sweep s;
  const EvalResult base = evaluate(model, data, {}, options.batch);
  s.base_accuracy = base.accuracy();
  s.base_macs = base.macs_per_sample();
  s.curves = collect_curves(model, data, grid, options.batch);
  if (!options.measure_accuracy) return s;
  for (std::size_t k = 0; k < grid.size(); ++k) {
    ForwardOptions fo;
    fo.zaps = ZapSettings::uniform(static_cast<float>(grid[k]));
    const EvalResult r = evaluate(model, data, fo, options.batch);
    SweepPoint p;
    p.sigma = grid[k];
    p.accuracy = r.accuracy();
    p.macs_per_sample = r.macs_per_sample();
    p.mac_reduction = 1.0 - p.macs_per_sample / s.base_macs;
    for (const auto& c : s.curves) p.eps.push_back(c.eps[k]);
    p.scale = scale_error(p.eps);
    s.points.push_back(std::move(p));
  }
  return s;
}

std::string Sweep::to_json() const {
  json j;
  j["base_accuracy"] = base_accuracy;
  j["base_macs"] = base_macs;
  j["curves"] = json::array();
  for (const auto& c : curves) j["curves"].push_back(curves_json(c));
  j["points"] = json::array();
  for (const auto& p : points) {
    j["points"].push_back({{"sigma", p.sigma},
                           {"accuracy", p.accuracy},
                           {"macs_per_sample", p.macs_per_sample},
                           {"mac_reduction", p.mac_reduction},
                           {"eps", p.eps},
                           {"scale_product", p.scale.product},
                           {"scale_linear", p.scale.linear}});
  }
  return j.dump(1);
}

Sweep Sweep::from_json(const std::string& text) {
  return parse_guard("sweep", [&] {
    const json j = json::parse(text);
    Sweep s;
    s.base_accuracy = j.at("base_accuracy").get<double>();
    s.base_macs = j.at("base_macs").get<double>();
    for (const auto& c : j.at("curves")) s.curves.push_back(curves_from(c));
    for (const auto& e : j.at("points")) {
      SweepPoint p;
      p.sigma = e.at("sigma").get<double>();
      p.accuracy = e.at("accuracy").get<double>();
      p.macs_per_sample = e.at("macs_per_sample").get<double>();
      p.mac_reduction = e.at("mac_reduction").get<double>();
      p.eps = e.at("eps").get<std::vector<double>>();
      p.scale.product = e.at("scale_product").get<double>();
      p.scale.linear = e.at("scale_linear").get<double>();
      s.points.push_back(std::move(p));
    }
    return s;
  });
}

std::string Sweep::curves_csv() const {
  std::ostringstream os;
  os.precision(10);
  os << "layer,sigma,eps,macs\n";
  for (const auto& c : curves) {
    for (std::size_t k = 0; k < c.sigma.size(); ++k) {
      os << c.layer << ',' << c.sigma[k] << ',' << c.eps[k] << ',' << c.macs[k] << '\n';
    }
  }
  return os.str();
}

double SigmoidFit::operator()(double sigma) const { return d + c / (1.0 + std::exp(-a * (sigma - b))); }

SigmoidFit fit_sigmoid(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("sigmoid fit: x and y differ in length");
  if (x.size() < 4) throw std::invalid_argument("sigmoid fit needs at least four samples");
  const auto [xmin, xmax] = std::minmax_element(x.begin(), x.end());
  const auto [ymin, ymax] = std::minmax_element(y.begin(), y.end());
  SigmoidFit best;
  best.x_lo = *xmin;
  best.x_hi = *xmax;
  const double xr = *xmax - *xmin;
  const double yr = *ymax - *ymin;
  if (!(xr > 0.0)) throw std::invalid_argument("sigmoid fit needs distinct abscissae");

  auto finish = [&](SigmoidFit& f) {
    double ss = 0.0, mx = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double r = f(x[i]) - y[i];
      ss += r * r;
      mx = std::max(mx, std::abs(r));
    }
    f.rms = std::sqrt(ss / static_cast<double>(x.size()));
    f.max_residual = mx;
  };

  if (yr <= 1e-12 * std::max(1.0, std::abs(*ymax))) {
    best.a = 0.0;
    best.b = 0.5 * (*xmin + *xmax);
    best.c = 0.0;
    best.d = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
    finish(best);
    return best;
  }

  // Fit on [0,1] x [0,1] and map back.
  Eigen::VectorXd t(x.size()), v(y.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    t[static_cast<Eigen::Index>(i)] = (x[i] - *xmin) / xr;
    v[static_cast<Eigen::Index>(i)] = (y[i] - *ymin) / yr;
  }
  // Direction from the values at the two ends of the sampled range.
  const auto lo_i = static_cast<std::size_t>(xmin - x.begin());
  const auto hi_i = static_cast<std::size_t>(xmax - x.begin());
  const bool rising = y[hi_i] >= y[lo_i];

  SigmoidResidual fn(t, v);
  double best_ss = std::numeric_limits<double>::infinity();
  Eigen::VectorXd best_p(4);
  for (double b0 : {-0.5, 0.0, 0.25, 0.5, 0.75, 1.0, 1.5}) {
    for (double a0 : {2.0, 6.0, 15.0, 40.0}) {
      Eigen::VectorXd p(4);
      p << a0, b0, rising ? 1.0 : -1.0, rising ? 0.0 : 1.0;
      Eigen::LevenbergMarquardt<SigmoidResidual> lm(fn);
      lm.setMaxfev(4000);
      lm.setXtol(1e-14);
      lm.setFtol(1e-14);
      lm.minimize(p);
      if (!p.allFinite()) continue;
      Eigen::VectorXd f(t.size());
      fn(p, f);
      const double ss = f.squaredNorm();
      if (ss < best_ss) {
        best_ss = ss;
        best_p = p;
      }
    }
  }
  if (!std::isfinite(best_ss)) throw std::runtime_error("sigmoid fit did not converge");
  double a = best_p[0], b = best_p[1], c = best_p[2], d = best_p[3];
  if (a < 0.0) {
    a = -a;
    d += c;
    c = -c;
  }
  best.a = a / xr;
  best.b = *xmin + b * xr;
  best.c = c * yr;
  best.d = *ymin + d * yr;
  finish(best);
  return best;
}

LinearAccuracyModel fit_linear_accuracy(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("linear fit: x and y differ in length");
  if (x.size() < 2) throw std::invalid_argument("linear fit needs at least two measurements");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (!(sxx > 1e-24 * std::max(1.0, mx * mx))) throw std::invalid_argument("linear fit: identical abscissae");
  LinearAccuracyModel m;
  m.points = x.size();
  m.slope = sxy / sxx;
  m.intercept = my - m.slope * mx;
  double ss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = y[i] - m.predict(x[i]);
    ss += r * r;
    m.max_residual = std::max(m.max_residual, std::abs(r));
  }
  m.rms = std::sqrt(ss / n);
  m.r2 = syy > 0.0 ? 1.0 - ss / syy : (ss <= 1e-24 ? 1.0 : 0.0);
  return m;
}

double LayerFit::eps_at(double sigma) const { return std::clamp(eps(sigma), 0.0, 1.0); }

double LayerFit::macs_at(double sigma) const {
  const double rate = std::clamp(zpr(sigma), 0.0, 1.0);
  const double conv = static_cast<double>(geometry.conv_macs_per_element());
  return conv * (static_cast<double>(geometry.computed_elements) +
                 static_cast<double>(geometry.predicted_elements) * (1.0 - rate)) +
         static_cast<double>(geometry.predictor_macs());
}

std::optional<double> LayerFit::sigma_for_macs(double target, double lo, double hi) const {
  double a = lo, b = hi;
  double fa = macs_at(a) - target, fb = macs_at(b) - target;
  if (fa == 0.0) return a;
  if (fb == 0.0) return b;
  if ((fa > 0.0) == (fb > 0.0)) return std::nullopt;
  for (int it = 0; it < 100 && b - a > 1e-12; ++it) {
    const double m = 0.5 * (a + b);
    const double fm = macs_at(m) - target;
    if ((fm > 0.0) == (fa > 0.0)) {
      a = m;
      fa = fm;
    } else {
      b = m;
    }
  }
  return 0.5 * (a + b);
}

TradeoffModel fit_tradeoff(const Sweep& sweep) {
  TradeoffModel m;
  m.base_accuracy = sweep.base_accuracy;
  m.base_macs = sweep.base_macs;
  m.curves = sweep.curves;
  for (const auto& c : sweep.curves) {
    LayerFit f;
    f.layer = c.layer;
    f.geometry = c.geometry;
    f.eps = fit_sigmoid(c.sigma, c.eps);
    f.zpr = fit_sigmoid(c.sigma, c.zpr);
    m.fits.push_back(f);
  }
  if (sweep.points.size() >= 2) {
    std::vector<double> xs, ys;
    for (const auto& p : sweep.points) {
      xs.push_back(p.scale.linear);
      ys.push_back(100.0 * (sweep.base_accuracy - p.accuracy));
    }
    m.accuracy = fit_linear_accuracy(xs, ys);
  }
  return m;
}

std::string TradeoffModel::to_json() const {
  json j;
  j["base_accuracy"] = base_accuracy;
  j["base_macs"] = base_macs;
  j["curves"] = json::array();
  for (const auto& c : curves) j["curves"].push_back(curves_json(c));
  j["fits"] = json::array();
  for (const auto& f : fits) {
    j["fits"].push_back({{"layer", f.layer},
                         {"geometry", geometry_json(f.geometry)},
                         {"eps", sigmoid_json(f.eps)},
                         {"zpr", sigmoid_json(f.zpr)}});
  }
  j["accuracy"] = linear_json(accuracy);
  return j.dump(1);
}

TradeoffModel TradeoffModel::from_json(const std::string& text) {
  return parse_guard("trade-off model", [&] {
    const json j = json::parse(text);
    TradeoffModel m;
    m.base_accuracy = j.at("base_accuracy").get<double>();
    m.base_macs = j.at("base_macs").get<double>();
    for (const auto& c : j.at("curves")) m.curves.push_back(curves_from(c));
    for (const auto& e : j.at("fits")) {
      LayerFit f;
      f.layer = e.at("layer").get<std::size_t>();
      f.geometry = geometry_from(e.at("geometry"));
      f.eps = sigmoid_from(e.at("eps"));
      f.zpr = sigmoid_from(e.at("zpr"));
      m.fits.push_back(f);
    }
    if (m.fits.size() != m.curves.size()) throw std::invalid_argument("fits and curves differ in count");
    m.accuracy = linear_from(j.at("accuracy"));
    return m;
  });
}

OperatingPointEstimate estimate_operating_point(const TradeoffModel& model, std::span<const double> sigma,
                                                CurveSource source) {
  if (sigma.size() != model.fits.size()) {
    throw std::invalid_argument("expected " + std::to_string(model.fits.size()) + " thresholds, got " +
                                std::to_string(sigma.size()));
  }
  if (source == CurveSource::sampled && model.curves.size() != model.fits.size()) {
    throw std::invalid_argument("sampled estimate needs the layer curves");
  }
  OperatingPointEstimate e;
  e.sigma.assign(sigma.begin(), sigma.end());
  double macs = model.base_macs;
  for (std::size_t i = 0; i < sigma.size(); ++i) {
    const LayerFit& f = model.fits[i];
    if (sigma[i] < f.eps.x_lo - 1e-12 || sigma[i] > f.eps.x_hi + 1e-12) e.extrapolated = true;
    double eps = 0.0, layer_macs = 0.0;
    if (source == CurveSource::fitted) {
      eps = f.eps_at(sigma[i]);
      layer_macs = f.macs_at(sigma[i]);
    } else {
      const LayerCurves& c = model.curves[i];
      eps = interpolate(c.sigma, c.eps, sigma[i]);
      layer_macs = c.macs_for_rate(interpolate(c.sigma, c.zpr, sigma[i]));
    }
    e.eps.push_back(eps);
    macs += layer_macs - static_cast<double>(f.geometry.baseline_macs());
  }
  e.scale = scale_error(e.eps);
  e.accuracy_drop = model.accuracy.predict(e.scale.linear);
  e.macs_per_sample = macs;
  e.mac_reduction = model.base_macs > 0.0 ? 1.0 - macs / model.base_macs : 0.0;
  return e;
}

std::vector<LayerObjective> objectives(const TradeoffModel& model) {
  std::vector<LayerObjective> out;
  for (const auto& f : model.fits) {
    out.push_back({[f](double s) { return f.eps_at(s); }, [f](double s) { return f.macs_at(s); }, f.eps.x_lo,
                   f.eps.x_hi});
  }
  return out;
}

ThresholdSolution optimize_thresholds(std::span<const LayerObjective> layers, double budget, BudgetKind kind) {
  if (layers.empty()) throw std::invalid_argument("no layers to optimize");
  if (!(budget >= 0.0)) throw std::invalid_argument("budget must be non-negative");
  const std::size_t n = layers.size();
  const bool err = kind == BudgetKind::error;
  auto f = [&](std::size_t i, double s) { return err ? layers[i].macs(s) : layers[i].eps(s); };
  auto g = [&](std::size_t i, double s) { return err ? layers[i].eps(s) : layers[i].macs(s); };

  constexpr std::size_t kScan = 201;
  std::vector<std::vector<double>> xs(n), fs(n), gs(n);
  double g_min = 0.0, f_span = 0.0, g_span = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& L = layers[i];
    if (!(L.hi >= L.lo)) throw std::invalid_argument("layer threshold range is empty");
    for (std::size_t k = 0; k < kScan; ++k) {
      const double s = L.lo + (L.hi - L.lo) * static_cast<double>(k) / (kScan - 1);
      xs[i].push_back(s);
      fs[i].push_back(f(i, s));
      gs[i].push_back(g(i, s));
    }
    g_min += *std::min_element(gs[i].begin(), gs[i].end());
    const auto [f0, f1] = std::minmax_element(fs[i].begin(), fs[i].end());
    const auto [g0, g1] = std::minmax_element(gs[i].begin(), gs[i].end());
    f_span += *f1 - *f0;
    g_span += *g1 - *g0;
  }
  if (g_min > budget) {
    throw InfeasibleBudget("budget " + std::to_string(budget) + " is below the minimal achievable " +
                               std::to_string(g_min),
                           g_min);
  }

  auto argmin = [&](std::size_t i, double lambda) {
    std::size_t kb = 0;
    double vb = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < kScan; ++k) {
      const double v = fs[i][k] + lambda * gs[i][k];
      if (v < vb) {
        vb = v;
        kb = k;
      }
    }
    // Golden-section refinement inside the neighbouring scan cells.
    double a = xs[i][kb == 0 ? 0 : kb - 1], b = xs[i][std::min(kb + 1, kScan - 1)];
    auto obj = [&](double s) { return f(i, s) + lambda * g(i, s); };
    const double r = 0.5 * (std::sqrt(5.0) - 1.0);
    double c = b - r * (b - a), d = a + r * (b - a);
    double fc = obj(c), fd = obj(d);
    for (int it = 0; it < 60 && b - a > 1e-12; ++it) {
      if (fc < fd) {
        b = d;
        d = c;
        fd = fc;
        c = b - r * (b - a);
        fc = obj(c);
      } else {
        a = c;
        c = d;
        fc = fd;
        d = a + r * (b - a);
        fd = obj(d);
      }
    }
    const double s = fc < fd ? c : d;
    return obj(s) < vb ? s : xs[i][kb];
  };

  struct Point {
    std::vector<double> s;
    double F = 0.0, G = 0.0;
  };
  auto solve = [&](double lambda) {
    Point p;
    for (std::size_t i = 0; i < n; ++i) {
      p.s.push_back(argmin(i, lambda));
      p.F += f(i, p.s.back());
      p.G += g(i, p.s.back());
    }
    return p;
  };

  ThresholdSolution sol;
  Point best = solve(0.0);
  const double tol = 1e-4 * std::max(1.0, std::abs(budget));
  if (best.G > budget) {
    double lo = 0.0;
    double hi = g_span > 0.0 ? std::max(f_span / g_span, 1e-12) : 1.0;
    Point ph = solve(hi);
    for (int k = 0; ph.G > budget && k < 200; ++k) {
      lo = hi;
      hi *= 2.0;
      ph = solve(hi);
    }
    if (ph.G > budget) {
      // Only the pure constraint minimizer is feasible.
      ph = Point{};
      for (std::size_t i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(std::min_element(gs[i].begin(), gs[i].end()) - gs[i].begin());
        ph.s.push_back(xs[i][k]);
        ph.F += fs[i][k];
        ph.G += gs[i][k];
      }
    }
    best = ph;
    std::size_t it = 0;
    while (it < 60 && budget - best.G >= tol) {
      ++it;
      const double mid = 0.5 * (lo + hi);
      Point pm = solve(mid);
      if (pm.G <= budget) {
        hi = mid;
        best = pm;
      } else {
        lo = mid;
      }
    }
    sol.lambda = hi;
    sol.iterations = it;
  }

  // Spend remaining slack layer by layer.
  for (int pass = 0; pass < 20; ++pass) {
    bool improved = false;
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g(i, best.s[i]);
      const double limit = budget - (best.G - gi);
      const double fi = f(i, best.s[i]);
      double s_best = best.s[i], f_best = fi;
      auto consider = [&](double s) {
        const double gv = g(i, s);
        if (gv > limit) return;
        const double fv = f(i, s);
        if (fv < f_best) {
          f_best = fv;
          s_best = s;
        }
      };
      for (std::size_t k = 0; k < kScan; ++k) {
        consider(xs[i][k]);
        // Boundary between a feasible and an infeasible neighbour.
        if (k + 1 < kScan && (gs[i][k] <= limit) != (gs[i][k + 1] <= limit)) {
          double a = xs[i][k], b = xs[i][k + 1];
          if (gs[i][k] > limit) std::swap(a, b);  // a feasible, b not
          for (int it = 0; it < 60; ++it) {
            const double m = 0.5 * (a + b);
            (g(i, m) <= limit ? a : b) = m;
          }
          consider(a);
        }
      }
      if (f_best < fi - 1e-15 * std::max(1.0, std::abs(fi))) {
        best.G += g(i, s_best) - gi;
        best.F += f_best - fi;
        best.s[i] = s_best;
        improved = true;
      }
    }
    if (!improved) break;
  }

  sol.sigma = best.s;
  for (std::size_t i = 0; i < n; ++i) {
    sol.total_eps += layers[i].eps(best.s[i]);
    sol.total_macs += layers[i].macs(best.s[i]);
  }
  return sol;
}

}  // namespace zap
