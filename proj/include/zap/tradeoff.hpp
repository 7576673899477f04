#pragma once

// Accuracy / MAC trade-off analytics: per-layer error curves, zero-prediction
// rates, scale error, curve fits, operating-point estimates and the
// per-layer threshold optimizer.

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "zap/io.hpp"
#include "zap/model.hpp"

namespace zap {

/// Thresholds lo, lo+step, ..., hi (hi included when it lies on the grid).
std::vector<double> sigma_grid(double lo = 0.0, double hi = 0.5, double step = 0.02);

/// 1 - sum(predicted) / sum(true), clamped to [0, 1]; 0 for an all-zero
/// true ofm. Throws ShapeError when shapes differ.
double layer_error(const Tensor& true_ofm, const Tensor& predicted_ofm);

struct ScaleError {
  double product = 1.0;  // prod(1 - eps_i)
  double linear = 1.0;   // 1 - sum(eps_i)
};
ScaleError scale_error(std::span<const double> eps);

/// Fixed-width histogram of predictor outputs.
struct ValueHistogram {
  double lo = 0.0;
  double width = 1e-3;
  std::vector<std::uint64_t> counts;
  std::uint64_t total = 0;

  static ValueHistogram build(std::span<const float> values, double width = 1e-3);
  double min() const { return lo; }
  double max() const { return lo + width * static_cast<double>(counts.size()); }
};

/// Fraction of values at or below sigma, linear within a bin. Throws
/// std::invalid_argument on an empty histogram.
double zero_prediction_rate(const ValueHistogram& m, double sigma);

/// Sampled curves of one zapped layer. MACs are per sample and include the
/// predictor.
struct LayerCurves {
  std::size_t layer = 0;
  char pattern = 'B';
  ZapLayerGeometry geometry;
  std::size_t samples = 0;
  std::vector<double> sigma;
  std::vector<double> eps;
  std::vector<double> zpr;
  std::vector<double> macs;
  ValueHistogram m_histogram;  // M over I_t

  /// Per-sample layer MACs for a given zero-prediction rate.
  double macs_for_rate(double zpr) const;
};

/// One measured point of a full-model sweep.
struct SweepPoint {
  double sigma = 0.0;
  double accuracy = 0.0;
  double macs_per_sample = 0.0;
  double mac_reduction = 0.0;
  std::vector<double> eps;  // per zapped layer, teacher forced
  ScaleError scale;
};

struct Sweep {
  double base_accuracy = 0.0;
  double base_macs = 0.0;  // per sample, whole model, no predictors
  std::vector<LayerCurves> curves;
  std::vector<SweepPoint> points;  // empty unless accuracy was measured

  std::string to_json() const;
  static Sweep from_json(const std::string& text);
  /// Columns: layer,sigma,eps,macs
  std::string curves_csv() const;
};

/// Teacher-forced per-layer curves. Each zapped layer sees the input of a
/// predictor-free forward pass; M is computed once per layer and thresholded
/// for every grid value. Layers without a predictor are skipped.
std::vector<LayerCurves> collect_curves(const Model& model, const TinyImageSet& data, std::span<const double> grid,
                                        std::size_t batch = 100);

/// Teacher-forced per-layer error at the given thresholds (ordered like
/// model.zaps()). Layers missing from `sigma` use `fallback`.
std::vector<double> measure_errors(const Model& model, const TinyImageSet& data,
                                   const std::map<std::size_t, float>& sigma, float fallback = 0.0f,
                                   std::size_t batch = 100);

/// Teacher-forced misprediction histograms, one per threshold, summed over
/// all zapped layers.
std::vector<MispredictionHistogram> misprediction_profile(const Model& model, const TinyImageSet& data,
                                                          std::span<const double> sigma, double bin_width,
                                                          std::size_t batch = 100);

struct SweepOptions {
  bool measure_accuracy = true;
  std::size_t batch = 100;
};

/// Curves plus, per grid value, an end-to-end evaluation at uniform sigma.
Sweep run_sweep(const Model& model, const TinyImageSet& data, std::span<const double> grid,
                const SweepOptions& options = {});

/// d + c / (1 + exp(-a (sigma - b))), normalized to a >= 0.
struct SigmoidFit {
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;
  double d = 0.0;
  double rms = 0.0;           // root-mean-square residual
  double max_residual = 0.0;  // largest absolute residual
  double x_lo = 0.0;          // sampled range
  double x_hi = 0.0;

  double operator()(double sigma) const;
};

/// Least-squares fit (Levenberg-Marquardt, several starts). Needs at least
/// four samples; constant data gives c = 0.
SigmoidFit fit_sigmoid(std::span<const double> x, std::span<const double> y);

struct LinearAccuracyModel {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  double rms = 0.0;
  double max_residual = 0.0;
  std::size_t points = 0;

  /// Accuracy drop (percentage points) at a linear scale error.
  double predict(double scale_error) const { return intercept + slope * scale_error; }
};

/// Ordinary least squares of accuracy drop on scale error. Needs two
/// measurements with distinct abscissae.
LinearAccuracyModel fit_linear_accuracy(std::span<const double> scale_error, std::span<const double> drop);

struct LayerFit {
  std::size_t layer = 0;
  ZapLayerGeometry geometry;
  SigmoidFit eps;
  SigmoidFit zpr;

  double eps_at(double sigma) const;
  double macs_at(double sigma) const;
  /// Inverse of macs_at on [lo, hi] by bisection; nullopt when the target
  /// lies outside the range the fit spans there.
  std::optional<double> sigma_for_macs(double target, double lo, double hi) const;
};

struct TradeoffModel {
  double base_accuracy = 0.0;
  double base_macs = 0.0;
  std::vector<LayerCurves> curves;
  std::vector<LayerFit> fits;
  LinearAccuracyModel accuracy;

  std::string to_json() const;
  static TradeoffModel from_json(const std::string& text);
};

/// Fits every layer's error and zero-prediction curves and, when the sweep
/// carries at least two measured points, the accuracy model.
TradeoffModel fit_tradeoff(const Sweep& sweep);

struct OperatingPointEstimate {
  std::vector<double> sigma;
  std::vector<double> eps;
  ScaleError scale;
  double accuracy_drop = 0.0;  // percentage points
  double macs_per_sample = 0.0;
  double mac_reduction = 0.0;
  bool extrapolated = false;  // some sigma lies outside the sampled range
};

enum class CurveSource { fitted, sampled };

/// Estimated accuracy drop and MAC reduction for per-layer thresholds
/// (ordered like model.fits). The MAC estimate uses layer geometry, pattern
/// coverage and predictor overhead.
OperatingPointEstimate estimate_operating_point(const TradeoffModel& model, std::span<const double> sigma,
                                                CurveSource source = CurveSource::fitted);

/// One layer of the allocation problem.
struct LayerObjective {
  std::function<double(double)> eps;
  std::function<double(double)> macs;
  double lo = 0.0;
  double hi = 0.5;
};

std::vector<LayerObjective> objectives(const TradeoffModel& model);

enum class BudgetKind {
  error,  // minimize total MACs subject to total error <= budget
  macs,   // minimize total error subject to total MACs <= budget
};

struct ThresholdSolution {
  std::vector<double> sigma;
  double total_eps = 0.0;
  double total_macs = 0.0;
  double lambda = 0.0;
  std::size_t iterations = 0;
};

/// No thresholds meet the budget; minimal() is the smallest achievable
/// constrained total.
class InfeasibleBudget : public std::runtime_error {
 public:
  InfeasibleBudget(const std::string& what, double minimal) : std::runtime_error(what), minimal_(minimal) {}
  double minimal() const noexcept { return minimal_; }

 private:
  double minimal_;
};

/// Dual decomposition: bisection on the multiplier with a per-layer 1-D
/// minimization, then greedy use of the remaining slack. The returned point
/// always satisfies the budget.
ThresholdSolution optimize_thresholds(std::span<const LayerObjective> layers, double budget,
                                      BudgetKind kind = BudgetKind::error);

}  // namespace zap
