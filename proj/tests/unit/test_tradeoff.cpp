#include <doctest.h>

#include <chrono>
#include <cmath>
#include <random>

#include "test_util.hpp"
#include "zap/synthetic.hpp"
#include "zap/tradeoff.hpp"

using namespace zap;

namespace {

double logistic(double a, double b, double c, double d, double x) { return d + c / (1.0 + std::exp(-a * (x - b))); }

// Layer with eps and MACs following known logistic curves.
LayerObjective synthetic_layer(double center, double eps_max, double base_macs, double max_saving) {
  return {[=](double s) { return logistic(18.0, center, eps_max, 0.0, s); },
          [=](double s) { return base_macs * (1.0 - max_saving * logistic(14.0, center - 0.03, 1.0, 0.0, s)); }, 0.0,
          0.5};
}

Model zapped_model(PatternId id) {
  Model m = build_model(toynet4(4, true, 3, 24, 24, 4), 11);
  m.attach_zaps(PatternMask::make(id), 3);
  std::mt19937 rng(2);
  for (auto& [layer, u] : m.zaps()) {
    u.bn2.beta = zap::test::random_tensor({u.channels()}, rng, 0.1f, 0.4f);
    u.bn2.gamma = zap::test::random_tensor({u.channels()}, rng, 0.2f, 0.4f);
  }
  return m;
}

}  // namespace

TEST_CASE("layer error") {
  const Tensor t({4}, std::vector<float>{1.0f, 2.0f, 3.0f, 4.0f});
  CHECK(layer_error(t, t) == 0.0);
  CHECK(layer_error(t, Tensor({4}, std::vector<float>{1.0f, 0.0f, 0.0f, 4.0f})) == doctest::Approx(0.5));
  CHECK(layer_error(Tensor({4}, 0.0f), Tensor({4}, 0.0f)) == 0.0);
  CHECK(layer_error(t, Tensor({4}, 5.0f)) == 0.0);  // overshoot clamps
  CHECK_THROWS_AS(layer_error(t, Tensor({3})), ShapeError);

  std::mt19937 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor truth = relu(zap::test::random_tensor({2, 3, 5, 5}, rng));
    Tensor pred = truth;
    std::bernoulli_distribution drop(0.3);
    double kept = 0.0, total = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (drop(rng)) pred[i] = 0.0f;
      kept += pred[i];
      total += truth[i];
    }
    CHECK(layer_error(truth, pred) == doctest::Approx(1.0 - kept / total).epsilon(1e-9));
  }
}

TEST_CASE("scale error forms") {
  const double zeros[] = {0.0, 0.0, 0.0};
  CHECK(scale_error(zeros).product == 1.0);
  CHECK(scale_error(zeros).linear == 1.0);
  const double small[] = {0.01, 0.02, 0.03};
  const ScaleError s = scale_error(small);
  CHECK(s.product == doctest::Approx(0.941094).epsilon(1e-9));
  CHECK(s.linear == doctest::Approx(0.94).epsilon(1e-12));
  CHECK(s.product - s.linear < 2e-3);
  const double half[] = {0.5};
  CHECK(scale_error(half).product == 0.5);
  CHECK(scale_error(half).linear == 0.5);

  // Second-order bound |prod - lin| <= sum_{i<j} eps_i eps_j.
  std::mt19937 rng(4);
  std::uniform_real_distribution<double> u(0.0, 0.3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> e(1 + trial % 6);
    for (auto& v : e) v = u(rng);
    double pairs = 0.0;
    for (std::size_t i = 0; i < e.size(); ++i)
      for (std::size_t j = i + 1; j < e.size(); ++j) pairs += e[i] * e[j];
    const ScaleError se = scale_error(e);
    CHECK(std::abs(se.product - se.linear) <= pairs + 1e-12);
  }
}

TEST_CASE("zero prediction rate") {
  const float m[] = {0.1f, 0.2f, 0.6f, 0.9f};
  const ValueHistogram h = ValueHistogram::build(m);
  CHECK(zero_prediction_rate(h, 0.5) == doctest::Approx(0.5));
  CHECK(zero_prediction_rate(h, 0.0) == 0.0);
  CHECK(zero_prediction_rate(h, 1.0) == 1.0);
  CHECK(zero_prediction_rate(h, 0.15) == doctest::Approx(0.25));
  CHECK_THROWS_AS(zero_prediction_rate(ValueHistogram{}, 0.1), std::invalid_argument);

  std::mt19937 rng(5);
  std::normal_distribution<float> g(0.2f, 0.2f);
  std::vector<float> v(5000);
  for (auto& x : v) x = g(rng);
  const ValueHistogram big = ValueHistogram::build(v);
  double prev = 0.0;
  for (double s = -0.5; s <= 1.0; s += 0.01) {
    double count = 0.0;
    for (float x : v) count += x <= s;
    const double r = zero_prediction_rate(big, s);
    CHECK(r >= prev);
    CHECK(r == doctest::Approx(count / 5000.0).epsilon(0.0).scale(1.0).epsilon(2e-3));
    prev = r;
  }
}

TEST_CASE("sigmoid fits") {
  const std::vector<double> x = sigma_grid();
  REQUIRE(x.size() == 26u);
  CHECK(x.back() == doctest::Approx(0.5));

  const double params[][4] = {{12.0, 0.25, 0.6, 0.02}, {25.0, 0.1, 0.3, 0.0}, {6.0, 0.35, 1.0, 0.05}};
  for (const auto& p : params) {
    std::vector<double> y;
    for (double s : x) y.push_back(logistic(p[0], p[1], p[2], p[3], s));
    const SigmoidFit f = fit_sigmoid(x, y);
    CHECK(f.a == doctest::Approx(p[0]).epsilon(1e-3));
    CHECK(f.b == doctest::Approx(p[1]).epsilon(1e-3));
    CHECK(f.c == doctest::Approx(p[2]).epsilon(1e-3));
    CHECK(std::abs(f.d - p[3]) < 1e-3);
    CHECK(f.rms < 1e-6);

    // Falling data gives a falling fit.
    std::vector<double> down;
    for (double v : y) down.push_back(1.0 - v);
    const SigmoidFit g = fit_sigmoid(x, down);
    CHECK(g.a >= 0.0);
    CHECK(g.c < 0.0);
    CHECK(g(0.5) < g(0.0));
  }

  std::mt19937 rng(7);
  std::normal_distribution<double> noise(0.0, 0.01);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> y;
    for (double s : x) y.push_back(logistic(15.0, 0.2 + 0.02 * trial, 0.5, 0.01, s) + noise(rng));
    const SigmoidFit f = fit_sigmoid(x, y);
    CHECK(f.rms < 0.05);
    CHECK(f.max_residual < 0.05);
  }

  const std::vector<double> flat(26, 0.3);
  const SigmoidFit c = fit_sigmoid(x, flat);
  CHECK(std::abs(c.c) < 1e-9);
  CHECK(c.d == doctest::Approx(0.3));
  CHECK_THROWS_AS(fit_sigmoid(std::span(x).first(3), std::span(flat).first(3)), std::invalid_argument);
}

TEST_CASE("linear accuracy fit") {
  const double x2[] = {0.9, 0.7}, y2[] = {1.0, 3.0};
  const LinearAccuracyModel two = fit_linear_accuracy(x2, y2);
  CHECK(two.slope == doctest::Approx(-10.0));
  CHECK(two.predict(0.9) == doctest::Approx(1.0));
  CHECK(two.predict(0.7) == doctest::Approx(3.0));

  const double x[] = {1.0, 0.9, 0.8, 0.5}, y[] = {0.5, 1.5, 2.5, 5.5};
  const LinearAccuracyModel line = fit_linear_accuracy(x, y);
  CHECK(line.r2 == doctest::Approx(1.0));
  CHECK(line.intercept == doctest::Approx(10.5));
  CHECK(line.points == 4u);

  const double same[] = {0.5, 0.5};
  CHECK_THROWS_AS(fit_linear_accuracy(same, y2), std::invalid_argument);
  CHECK_THROWS_AS(fit_linear_accuracy(std::span(x2).first(1), std::span(y2).first(1)), std::invalid_argument);
}

TEST_CASE("optimizer boundary cases") {
  std::vector<LayerObjective> layers{synthetic_layer(0.2, 0.3, 1e5, 0.5), synthetic_layer(0.3, 0.2, 2e5, 0.4)};
  // Flat zero error: any budget leaves every layer at its maximum saving.
  std::vector<LayerObjective> free = layers;
  for (auto& l : free) l.eps = [](double) { return 0.0; };
  ThresholdSolution s = optimize_thresholds(free, 0.0);
  for (double v : s.sigma) CHECK(v == doctest::Approx(0.5));

  // Errors that vanish only at the lower end: budget 0 keeps everything at lo.
  std::vector<LayerObjective> ramp = layers;
  for (auto& l : ramp) l.eps = [](double x) { return x; };
  s = optimize_thresholds(ramp, 0.0);
  for (double v : s.sigma) CHECK(v == doctest::Approx(0.0));
  CHECK(s.total_eps <= 1e-4);

  s = optimize_thresholds(layers, 10.0);
  for (double v : s.sigma) CHECK(v == doctest::Approx(0.5).epsilon(1e-3));

  double min_eps = 0.0;
  for (const auto& l : layers) min_eps += l.eps(0.0);
  try {
    optimize_thresholds(layers, min_eps / 2);
    FAIL("expected InfeasibleBudget");
  } catch (const InfeasibleBudget& e) {
    CHECK(e.minimal() == doctest::Approx(min_eps).epsilon(1e-6));
  }
  CHECK_THROWS_AS(optimize_thresholds(layers, -1.0), std::invalid_argument);

  // MAC budget: minimal error at a given MAC total.
  const double budget = layers[0].macs(0.25) + layers[1].macs(0.25);
  s = optimize_thresholds(layers, budget, BudgetKind::macs);
  CHECK(s.total_macs <= budget * (1 + 1e-9));
  CHECK(s.total_eps <= layers[0].eps(0.25) + layers[1].eps(0.25) + 1e-9);
}

TEST_CASE("optimizer against a grid search") {
  const std::vector<LayerObjective> layers{synthetic_layer(0.15, 0.25, 3e5, 0.55), synthetic_layer(0.25, 0.4, 1e5, 0.6),
                                           synthetic_layer(0.35, 0.15, 2e5, 0.45)};
  const int n = 51;
  std::vector<double> grid(n);
  for (int i = 0; i < n; ++i) grid[i] = 0.5 * i / (n - 1);
  std::vector<std::vector<double>> e(3, std::vector<double>(n)), mac(3, std::vector<double>(n));
  for (int l = 0; l < 3; ++l)
    for (int i = 0; i < n; ++i) {
      e[l][i] = layers[l].eps(grid[i]);
      mac[l][i] = layers[l].macs(grid[i]);
    }
  for (double budget : {0.05, 0.1, 0.2, 0.4}) {
    const ThresholdSolution s = optimize_thresholds(layers, budget);
    CHECK(s.total_eps <= budget + 1e-4);
    double best = 1e300;
    bool dominated = false;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k) {
          const double te = e[0][i] + e[1][j] + e[2][k];
          const double tm = mac[0][i] + mac[1][j] + mac[2][k];
          if (te <= budget) best = std::min(best, tm);
          if (te <= s.total_eps && tm < s.total_macs * (1.0 - 1e-6)) dominated = true;
        }
    CHECK(s.total_macs <= best * 1.0001);
    CHECK_FALSE(dominated);
  }
}

TEST_CASE("curves agree with direct per-layer evaluation") {
  const Model m = zapped_model(PatternId::B);
  const TinyImageSet data = generate_synthetic(24, 4, 3);
  const std::vector<double> grid{0.0, 0.125, 0.25, 0.375, 0.5};
  const auto curves = collect_curves(m, data, grid);
  REQUIRE(curves.size() == 3u);

  // Teacher inputs of each zapped layer.
  std::map<std::size_t, Tensor> ifm, ofm;
  ForwardOptions o;
  o.observer = [&](const ZapLayerEvent& ev) {
    ifm[ev.layer] = *ev.ifm;
    ofm[ev.layer] = *ev.ofm;
  };
  MacCounter scratch;
  m.forward(data.batch(0, data.size()), scratch, o);

  for (std::size_t li = 0; li < curves.size(); ++li) {
    const LayerCurves& c = curves[li];
    const std::size_t layer = c.layer;
    const auto b = m.block(layer);
    for (std::size_t g = 0; g < grid.size(); ++g) {
      MacCounter mc;
      PredictedConvOptions po;
      po.batch_norm = &m.layers()[*b.bn].bn;
      po.sigma = static_cast<float>(grid[g]);
      const auto [pred, oc] = predicted_conv(ifm[layer], m.layers()[layer].conv, m.zaps().at(layer), mc, po);
      CHECK(c.eps[g] == doctest::Approx(layer_error(ofm[layer], pred)).epsilon(1e-6));
      CHECK(c.zpr[g] == doctest::Approx(static_cast<double>(oc.skipped) / oc.predicted_set));
      CHECK(c.macs[g] * data.size() == doctest::Approx(static_cast<double>(mc.total())));
      if (g > 0) {
        CHECK(c.eps[g] >= c.eps[g - 1]);
        CHECK(c.macs[g] <= c.macs[g - 1]);
      }
    }
    std::map<std::size_t, float> sig{{layer, 0.25f}};
    const auto measured = measure_errors(m, data, sig, 0.0f, 7);
    CHECK(measured[li] == doctest::Approx(c.eps[2]).epsilon(1e-6));
  }

  // Batching does not change the curves.
  const auto small = collect_curves(m, data, grid, 5);
  for (std::size_t li = 0; li < 3; ++li)
    for (std::size_t g = 0; g < grid.size(); ++g) {
      CHECK(small[li].eps[g] == doctest::Approx(curves[li].eps[g]).epsilon(1e-9));
      CHECK(small[li].zpr[g] == curves[li].zpr[g]);
    }

  const double hs[] = {0.0, 0.25, 0.5};
  const auto prof = misprediction_profile(m, data, hs, 0.1);
  REQUIRE(prof.size() == 3u);
  CHECK(prof[0].total_share() <= prof[1].total_share());
  CHECK(prof[1].total_share() <= prof[2].total_share());
}

TEST_CASE("sweep, fit and estimates") {
  const Model m = zapped_model(PatternId::D);
  const TinyImageSet data = generate_synthetic(20, 4, 8);
  const auto grid = sigma_grid(0.0, 0.5, 0.1);
  const Sweep s = run_sweep(m, data, grid);
  REQUIRE(s.points.size() == grid.size());
  CHECK(s.base_macs == doctest::Approx(static_cast<double>(m.baseline_conv_macs() + 4 * 6 * 6 * 2 * 4)));
  for (const auto& p : s.points) CHECK(p.mac_reduction == doctest::Approx(1.0 - p.macs_per_sample / s.base_macs));

  const Sweep back = Sweep::from_json(s.to_json());
  CHECK(back.points.size() == s.points.size());
  CHECK(back.curves[1].eps == s.curves[1].eps);
  CHECK(back.curves[1].geometry.predicted_elements == s.curves[1].geometry.predicted_elements);
  CHECK(back.curves[0].m_histogram.counts == s.curves[0].m_histogram.counts);
  CHECK_THROWS_AS(Sweep::from_json("[1,2"), std::invalid_argument);
  CHECK(s.curves_csv().rfind("layer,sigma,eps,macs\n", 0) == 0);

  const TradeoffModel t = fit_tradeoff(s);
  REQUIRE(t.fits.size() == 3u);
  const TradeoffModel tb = TradeoffModel::from_json(t.to_json());
  CHECK(tb.fits[2].eps.b == t.fits[2].eps.b);
  CHECK(tb.accuracy.slope == t.accuracy.slope);

  // Minimum grid value everywhere: drop at scale error 1 - sum eps(0).
  const std::vector<double> lo(3, 0.0);
  const auto e0 = estimate_operating_point(t, lo);
  CHECK(e0.accuracy_drop == doctest::Approx(t.accuracy.predict(e0.scale.linear)));
  CHECK_FALSE(e0.extrapolated);
  CHECK(estimate_operating_point(t, std::vector<double>{0.0, 0.6, 0.0}).extrapolated);
  CHECK_THROWS_AS(estimate_operating_point(t, std::vector<double>{0.0}), std::invalid_argument);

  // Sampled estimates reproduce the curves at grid points.
  for (std::size_t g = 0; g < grid.size(); ++g) {
    const auto e = estimate_operating_point(t, std::vector<double>(3, grid[g]), CurveSource::sampled);
    double macs = s.base_macs;
    for (const auto& c : s.curves) macs += c.macs[g] - static_cast<double>(c.geometry.baseline_macs());
    CHECK(e.macs_per_sample == doctest::Approx(macs));
  }
}

TEST_CASE("single-layer MAC estimate and inverse mapping") {
  TradeoffModel t;
  LayerFit f;
  f.layer = 3;
  f.geometry = {3, 16, 8, 10, 10, 3, 8 * 50, 8 * 50};
  f.eps = {20.0, 0.25, 0.3, 0.0, 0.0, 0.0, 0.0, 0.5};
  f.zpr = {15.0, 0.2, 0.9, 0.0, 0.0, 0.0, 0.0, 0.5};
  t.fits = {f};
  t.base_macs = 1e5 + static_cast<double>(f.geometry.baseline_macs());
  t.accuracy.slope = -20.0;
  t.accuracy.intercept = 20.0;

  for (double sigma : {0.0, 0.1, 0.2, 0.35, 0.5}) {
    const auto e = estimate_operating_point(t, std::vector<double>{sigma});
    const double rate = logistic(15.0, 0.2, 0.9, 0.0, sigma);
    // k^2 c_i (|I_s| + |I_t| (1 - rate)) + K^2 (|I_s| + |I_t|)
    const double layer = 144.0 * (400.0 + 400.0 * (1.0 - rate)) + 9.0 * 800.0;
    CHECK(e.macs_per_sample == doctest::Approx(1e5 + layer));
    CHECK(e.mac_reduction == doctest::Approx(1.0 - (1e5 + layer) / t.base_macs));
    CHECK(e.accuracy_drop == doctest::Approx(20.0 * logistic(20.0, 0.25, 0.3, 0.0, sigma)));
  }

  for (double sigma : {0.05, 0.15, 0.3, 0.45}) {
    const double target = f.macs_at(sigma);
    const auto back = f.sigma_for_macs(target, 0.0, 0.5);
    REQUIRE(back.has_value());
    CHECK(*back == doctest::Approx(sigma).epsilon(1e-6));
    CHECK(f.macs_at(*back) == doctest::Approx(target).epsilon(1e-9));
  }
  CHECK_FALSE(f.sigma_for_macs(0.0, 0.0, 0.5).has_value());
}

TEST_CASE("grid helper") {
  CHECK(sigma_grid(0.0, 0.1, 0.05) == std::vector<double>{0.0, 0.05, 0.1});
  CHECK(sigma_grid(0.0, 0.5, 0.02).size() == 26u);
  CHECK_THROWS_AS(sigma_grid(0.0, 0.5, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(sigma_grid(0.5, 0.0, 0.1), std::invalid_argument);
}
