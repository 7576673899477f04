// zap: command-line driver for the predictor pipeline.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "zap/io.hpp"
#include "zap/model.hpp"
#include "zap/synthetic.hpp"
#include "zap/tradeoff.hpp"
#include "zap/trainer.hpp"
#include "zap/zap_training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace zap;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitInfeasible = 3;

// Missing inputs, bad flag values or unreadable artifacts.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw ValidationError(std::string(what) + " path is required");
  if (!fs::is_regular_file(path)) throw ValidationError(std::string(what) + " not found: " + path);
}

float parse_real(const std::string& text) {
  std::size_t used = 0;
  float v = 0.0f;
  try {
    v = std::stof(text, &used);
  } catch (const std::exception&) {
    throw ValidationError("not a number: '" + text + "'");
  }
  if (used != text.size()) throw ValidationError("not a number: '" + text + "'");
  return v;
}

std::pair<std::size_t, std::string> split_assignment(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw ValidationError("expected LAYER=VALUE, got '" + text + "'");
  try {
    return {static_cast<std::size_t>(std::stoul(text.substr(0, eq))), text.substr(eq + 1)};
  } catch (const std::exception&) {
    throw ValidationError("bad layer index in '" + text + "'");
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

// ---------------------------------------------------------------------------
// Shared option groups

struct ModelArgs {
  std::string model = "toynet4";
  std::string weights;

  void add(CLI::App* app, bool weights_required = true) {
    app->add_option("--model", model, "Zoo name (toynet4, toynet4-nobn) or model spec JSON")
        ->capture_default_str();
    auto* w = app->add_option("--weights", weights, "Weight container (.zapw)");
    if (weights_required) w->required();
  }

  ModelSpec spec() const {
    if (auto z = zoo_spec(model)) return *z;
    require_file(model, "model spec");
    return ModelSpec::load(model);
  }

  Model load() const {
    Model m = build_model(spec());
    require_file(weights, "weights");
    m.load_container(WeightContainer::load(weights));
    return m;
  }
};

struct SigmaArgs {
  std::string sigma = "0";
  std::vector<std::string> layer_sigma;
  std::string sigma_file;
  bool no_zap = false;

  void add(CLI::App* app) {
    app->add_option("--sigma,--sigma-all", sigma, "Global threshold; -inf computes everything")
        ->capture_default_str();
    app->add_option("--layer-sigma", layer_sigma, "Per-layer threshold LAYER=SIGMA (repeatable)");
    app->add_option("--sigma-file", sigma_file, "JSON thresholds written by `optimize`");
    app->add_flag("--no-zap", no_zap, "Run without predictors");
  }

  ZapSettings settings(const Model& model) const {
    if (no_zap) return ZapSettings::off();
    if (model.zaps().empty()) {
      if (!layer_sigma.empty() || !sigma_file.empty()) throw ValidationError("weights carry no predictors");
      return ZapSettings::off();
    }
    ZapSettings z = ZapSettings::uniform(parse_real(sigma));
    if (!sigma_file.empty()) {
      require_file(sigma_file, "sigma file");
      const json j = json::parse(read_file_text(sigma_file));
      for (const auto& [k, v] : j.at("sigma").items()) z.layer_sigma[std::stoul(k)] = v.get<float>();
    }
    for (const auto& s : layer_sigma) {
      const auto [layer, value] = split_assignment(s);
      z.layer_sigma[layer] = parse_real(value);
    }
    for (const auto& [layer, s] : z.layer_sigma) {
      if (!model.zaps().contains(layer)) throw ValidationError("layer " + std::to_string(layer) + " has no predictor");
    }
    return z;
  }

  static std::string read_file_text(const std::string& path) {
    const auto bytes = read_file(path);
    return std::string(bytes.begin(), bytes.end());
  }
};

TinyImageSet load_data(const std::string& path) {
  require_file(path, "dataset");
  return TinyImageSet::load(path);
}

std::string read_text(const std::string& path, const char* what) {
  require_file(path, what);
  return SigmaArgs::read_file_text(path);
}

double baseline_macs_per_sample(const Model& model, const TinyImageSet& data) {
  MacCounter c;
  model.forward(data.batch(0, 1), c);
  return static_cast<double>(c.total());
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataArgs {
  std::size_t n = 0;
  std::size_t classes = 10;
  std::uint64_t seed = 1;
  std::string out;
  SyntheticOptions opt;
};

int run_gen_data(const GenDataArgs& a) {
  const TinyImageSet set = generate_synthetic(a.n, a.classes, a.seed, a.opt);
  set.save(a.out);
  std::printf("wrote %zu images (%zux%zux%zu, %zu classes) to %s\n", set.size(), set.channels, set.height,
              set.width, set.classes, a.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// train-base

struct TrainBaseArgs {
  ModelArgs model;
  std::string data;
  std::string out;
  TrainConfig cfg;
  std::size_t refresh_batches = 0;
};

int run_train_base(TrainBaseArgs a) {
  const TinyImageSet data = load_data(a.data);
  Model m = build_model(a.model.spec(), a.cfg.seed);
  if (m.spec().classes != data.classes || m.layers().front().in_shape != Shape{data.channels, data.height, data.width}) {
    throw ValidationError("dataset shape or class count does not match the model");
  }
  train_classifier(m, data, a.cfg, {}, [](const EpochStats& s) {
    std::printf("epoch %zu  loss %.4f  train accuracy %.4f\n", s.epoch, s.loss, s.train_accuracy);
    std::fflush(stdout);
  });
  // Running statistics lag the final weights; refresh them with one pass.
  constexpr std::size_t kRefreshBatch = 64;
  const std::size_t batches =
      a.refresh_batches ? a.refresh_batches : (data.size() + kRefreshBatch - 1) / kRefreshBatch;
  recalibrate_bn(m, data, ZapSettings::off(), batches, kRefreshBatch);
  m.zaps().clear();
  m.to_container().save(a.out);
  std::printf("saved %s (%zu parameters)\n", a.out.c_str(), m.parameter_count());
  return 0;
}

// ---------------------------------------------------------------------------
// train-zap

struct TrainZapArgs {
  ModelArgs model;
  std::string data;
  std::string out;
  std::string pattern = "B";
  std::vector<std::string> layer_pattern;
  std::size_t samples = 0;
  std::string spill;
  bool sequential = false;
  ZapTrainConfig cfg;
};

int run_train_zap(TrainZapArgs a) {
  const TinyImageSet data = load_data(a.data);
  Model m = a.model.load();
  const PatternMask global = PatternMask::parse(a.pattern);
  std::map<std::size_t, PatternMask> patterns;
  for (auto i : m.zap_layers()) patterns.emplace(i, global);
  for (const auto& s : a.layer_pattern) {
    const auto [layer, p] = split_assignment(s);
    if (!patterns.contains(layer)) throw ValidationError("layer " + std::to_string(layer) + " hosts no predictor");
    patterns.insert_or_assign(layer, PatternMask::parse(p));
  }

  const std::size_t n = a.samples ? std::min(a.samples, data.size()) : data.size();
  std::map<std::size_t, LayerCapture> captures;
  const auto layers = m.zap_layers();
  constexpr std::size_t kCaptureBatch = 100;
  for (std::size_t first = 0; first < n; first += kCaptureBatch) {
    capture_pairs(m, layers, data.batch(first, std::min(kCaptureBatch, n - first)), captures);
  }
  if (!a.spill.empty()) {
    spill_captures(captures, a.spill);
    captures = load_captures(a.spill);
  }
  m.zaps().clear();
  for (const auto& [layer, p] : patterns) {
    m.zaps().emplace(layer, ZapUnit::create(m.layers()[layer].out_shape[0], p, a.cfg.seed * 7919ULL + layer));
  }
  const auto reports = train_zaps(m, captures, global, a.cfg, !a.sequential);
  for (const auto& r : reports) {
    std::printf("layer %zu pattern %c  loss", r.layer, m.zaps().at(r.layer).pattern.name());
    for (double l : r.epoch_loss) std::printf(" %.4f", l);
    std::printf("\n");
  }
  m.to_container().save(a.out);
  std::printf("saved %s (%zu captures per layer)\n", a.out.c_str(), n);
  return 0;
}

// ---------------------------------------------------------------------------
// recalibrate-bn

struct RecalArgs {
  ModelArgs model;
  SigmaArgs sigma;
  std::string data;
  std::string out;
  std::size_t batches = 0;
  std::size_t batch = 64;
};

int run_recalibrate(const RecalArgs& a) {
  const TinyImageSet data = load_data(a.data);
  Model m = a.model.load();
  const ZapSettings z = a.sigma.settings(m);
  const std::size_t batches = a.batches ? a.batches : (data.size() + a.batch - 1) / a.batch;
  recalibrate_bn(m, data, z, batches, a.batch);
  m.to_container().save(a.out);
  std::printf("recalibrated batch norm over %zu batches of %zu; saved %s\n", batches, a.batch, a.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  ModelArgs model;
  SigmaArgs sigma;
  std::string data;
  std::string json_out;
  std::size_t batch = 100;
  bool baseline = false;
};

int run_eval(const EvalArgs& a) {
  const TinyImageSet data = load_data(a.data);
  const Model m = a.model.load();
  ForwardOptions fo;
  fo.zaps = a.sigma.settings(m);
  const EvalResult r = evaluate(m, data, fo, a.batch);
  const double base_macs = baseline_macs_per_sample(m, data);
  const double per_sample = r.macs_per_sample();
  const double reduction = 1.0 - per_sample / base_macs;

  std::printf("samples          %zu\n", r.total);
  std::printf("top-1 accuracy   %.4f\n", r.accuracy());
  std::optional<EvalResult> base;
  if (a.baseline) {
    base = evaluate(m, data, {}, a.batch);
    std::printf("baseline acc     %.4f  (degradation %.2f pp)\n", base->accuracy(),
                100.0 * (base->accuracy() - r.accuracy()));
  }
  std::printf("%-16s %16s %14s\n", "tag", "macs", "per sample");
  std::uint64_t sum = 0;
  for (const auto& [tag, n] : r.macs.tags()) {
    std::printf("%-16s %16llu %14.1f\n", tag.c_str(), static_cast<unsigned long long>(n),
                static_cast<double>(n) / static_cast<double>(r.total));
    sum += n;
  }
  std::printf("%-16s %16llu %14.1f\n", "total", static_cast<unsigned long long>(sum), per_sample);
  std::printf("baseline         %31.1f\n", base_macs);
  std::printf("MAC reduction    %.4f%%\n", 100.0 * reduction);

  if (!a.json_out.empty()) {
    json j;
    j["samples"] = r.total;
    j["accuracy"] = r.accuracy();
    if (base) j["baseline_accuracy"] = base->accuracy();
    j["macs_total"] = sum;
    j["macs_per_sample"] = per_sample;
    j["baseline_macs_per_sample"] = base_macs;
    j["mac_reduction"] = reduction;
    j["tags"] = json::object();
    for (const auto& [tag, n] : r.macs.tags()) j["tags"][tag] = n;
    write_text(a.json_out, j.dump(1));
  }
  return 0;
}

// ---------------------------------------------------------------------------
// sweep

struct GridArgs {
  double lo = 0.0, hi = 0.5, step = 0.02;
  void add(CLI::App* app) {
    app->add_option("--sigma-lo", lo, "First grid threshold")->capture_default_str();
    app->add_option("--sigma-hi", hi, "Last grid threshold")->capture_default_str();
    app->add_option("--sigma-step", step, "Grid step")->capture_default_str();
  }
  std::vector<double> grid() const { return sigma_grid(lo, hi, step); }
};

struct SweepArgs {
  ModelArgs model;
  GridArgs grid;
  std::string data;
  std::string out;
  std::string csv;
  bool no_accuracy = false;
  std::size_t batch = 100;
};

void print_sweep(const Sweep& s) {
  std::printf("baseline accuracy %.4f, %.1f MACs/sample\n", s.base_accuracy, s.base_macs);
  if (s.points.empty()) return;
  std::printf("%6s %9s %10s %10s %10s\n", "sigma", "accuracy", "reduction", "sum eps", "1-sum eps");
  for (const auto& p : s.points) {
    std::printf("%6.3f %9.4f %9.3f%% %10.5f %10.5f\n", p.sigma, p.accuracy, 100.0 * p.mac_reduction,
                1.0 - p.scale.linear, p.scale.linear);
  }
}

int run_sweep_cmd(const SweepArgs& a) {
  const TinyImageSet data = load_data(a.data);
  const Model m = a.model.load();
  if (!m.has_all_zaps()) throw ValidationError("weights carry no trained predictors; run train-zap first");
  SweepOptions so;
  so.measure_accuracy = !a.no_accuracy;
  so.batch = a.batch;
  const auto grid = a.grid.grid();
  const Sweep s = run_sweep(m, data, grid, so);
  print_sweep(s);
  write_text(a.out, s.to_json());
  if (!a.csv.empty()) write_text(a.csv, s.curves_csv());
  std::printf("wrote %s\n", a.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// fit

struct FitArgs {
  std::string sweep;
  std::string out;
};

void print_fits(const TradeoffModel& t) {
  for (const auto& f : t.fits) {
    std::printf("layer %zu eps: a=%.4g b=%.4g c=%.4g d=%.4g rms=%.2e | zpr: a=%.4g b=%.4g c=%.4g d=%.4g rms=%.2e\n",
                f.layer, f.eps.a, f.eps.b, f.eps.c, f.eps.d, f.eps.rms, f.zpr.a, f.zpr.b, f.zpr.c, f.zpr.d,
                f.zpr.rms);
  }
  if (t.accuracy.points) {
    std::printf("accuracy drop [pp] = %.4f + %.4f * (1 - sum eps)   R^2 = %.4f over %zu points\n",
                t.accuracy.intercept, t.accuracy.slope, t.accuracy.r2, t.accuracy.points);
  }
}

int run_fit(const FitArgs& a) {
  const Sweep s = Sweep::from_json(read_text(a.sweep, "sweep"));
  if (s.points.size() < 2) throw ValidationError("sweep needs at least two accuracy measurements");
  const TradeoffModel t = fit_tradeoff(s);
  print_fits(t);
  write_text(a.out, t.to_json());
  std::printf("wrote %s\n", a.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// optimize

struct OptimizeArgs {
  std::string tradeoff;
  std::optional<double> error_budget;
  std::optional<double> mac_budget;
  std::string out;
  ModelArgs model;
  std::string data;
  std::size_t rounds = 5;
};

int run_optimize(const OptimizeArgs& a) {
  if (a.error_budget.has_value() == a.mac_budget.has_value()) {
    throw ValidationError("give exactly one of --error-budget and --mac-budget");
  }
  const TradeoffModel t = TradeoffModel::from_json(read_text(a.tradeoff, "trade-off model"));
  const auto obj = objectives(t);
  const BudgetKind kind = a.error_budget ? BudgetKind::error : BudgetKind::macs;
  const double budget = a.error_budget ? *a.error_budget : *a.mac_budget;

  ThresholdSolution sol = optimize_thresholds(obj, budget, kind);
  std::vector<double> measured;
  if (!a.data.empty()) {
    // Fitted curves only approximate the layers; tighten an error budget
    // until the measured total meets it.
    const TinyImageSet data = load_data(a.data);
    const Model m = a.model.load();
    if (m.zaps().size() != t.fits.size()) throw ValidationError("weights and trade-off model disagree on layers");
    double target = budget;
    for (std::size_t round = 0;; ++round) {
      std::map<std::size_t, float> sig;
      for (std::size_t i = 0; i < t.fits.size(); ++i) sig[t.fits[i].layer] = static_cast<float>(sol.sigma[i]);
      measured = measure_errors(m, data, sig);
      double total = 0.0;
      for (double e : measured) total += e;
      std::printf("round %zu: fitted sum eps %.5f, measured %.5f\n", round, sol.total_eps, total);
      if (kind != BudgetKind::error || total <= budget || round + 1 >= a.rounds) break;
      target -= total - budget;
      try {
        sol = optimize_thresholds(obj, target, kind);
      } catch (const InfeasibleBudget&) {
        break;
      }
    }
    double total = 0.0;
    for (double e : measured) total += e;
    if (kind == BudgetKind::error && total > budget) {
      std::fprintf(stderr, "warning: measured sum eps %.5f exceeds the budget %.5f by %.1e\n", total, budget,
                   total - budget);
    }
  }

  std::printf("%6s %10s %10s %12s\n", "layer", "sigma", "eps", "macs");
  for (std::size_t i = 0; i < t.fits.size(); ++i) {
    std::printf("%6zu %10.5f %10.5f %12.1f\n", t.fits[i].layer, sol.sigma[i], obj[i].eps(sol.sigma[i]),
                obj[i].macs(sol.sigma[i]));
  }
  const OperatingPointEstimate e = estimate_operating_point(t, sol.sigma);
  std::printf("sum eps %.5f, zapped-layer MACs %.1f, estimated drop %.3f pp, estimated MAC reduction %.3f%%\n",
              sol.total_eps, sol.total_macs, e.accuracy_drop, 100.0 * e.mac_reduction);

  if (!a.out.empty()) {
    json j;
    j["budget_kind"] = kind == BudgetKind::error ? "error" : "macs";
    j["budget"] = budget;
    j["sigma"] = json::object();
    for (std::size_t i = 0; i < t.fits.size(); ++i) j["sigma"][std::to_string(t.fits[i].layer)] = sol.sigma[i];
    j["total_eps"] = sol.total_eps;
    j["total_macs"] = sol.total_macs;
    j["estimated_accuracy_drop"] = e.accuracy_drop;
    j["estimated_mac_reduction"] = e.mac_reduction;
    if (!measured.empty()) j["measured_eps"] = measured;
    write_text(a.out, j.dump(1));
  }
  return 0;
}

// ---------------------------------------------------------------------------
// report

struct ReportArgs {
  ModelArgs model;
  GridArgs grid;
  std::string data;
  std::string out_dir;
  std::string sweep;
  std::string tradeoff;
  std::vector<std::string> mask_weights;
  std::vector<double> op_sigma{0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
  std::vector<double> hist_sigma{0.0, 0.1, 0.3, 0.5};
  double hist_bin = 0.1;
  std::size_t batch = 100;
};

int run_report(const ReportArgs& a) {
  const TinyImageSet data = load_data(a.data);
  const Model m = a.model.load();
  if (!m.has_all_zaps()) throw ValidationError("weights carry no trained predictors; run train-zap first");
  fs::create_directories(a.out_dir);
  const fs::path dir(a.out_dir);

  Sweep s;
  if (!a.sweep.empty()) {
    s = Sweep::from_json(read_text(a.sweep, "sweep"));
  } else {
    SweepOptions so;
    so.batch = a.batch;
    s = run_sweep(m, data, a.grid.grid(), so);
  }
  if (s.points.size() < 2) throw ValidationError("sweep needs at least two accuracy measurements");
  const TradeoffModel t = a.tradeoff.empty() ? fit_tradeoff(s)
                                             : TradeoffModel::from_json(read_text(a.tradeoff, "trade-off model"));
  json rep;
  rep["base_accuracy"] = s.base_accuracy;
  rep["base_macs"] = s.base_macs;
  rep["accuracy_model"] = {{"slope", t.accuracy.slope}, {"intercept", t.accuracy.intercept},
                           {"r2", t.accuracy.r2}, {"max_residual", t.accuracy.max_residual}};

  write_text(dir / "curves.csv", s.curves_csv());

  {  // accuracy drop vs 1 - sum eps
    std::ostringstream os;
    os.precision(8);
    os << "sigma,scale_linear,scale_product,accuracy,accuracy_drop,fitted_drop\n";
    json arr = json::array();
    for (const auto& p : s.points) {
      const double drop = 100.0 * (s.base_accuracy - p.accuracy);
      os << p.sigma << ',' << p.scale.linear << ',' << p.scale.product << ',' << p.accuracy << ',' << drop << ','
         << t.accuracy.predict(p.scale.linear) << '\n';
      arr.push_back({{"sigma", p.sigma}, {"scale_linear", p.scale.linear}, {"accuracy_drop", drop}});
    }
    write_text(dir / "accuracy_vs_scale.csv", os.str());
    rep["accuracy_vs_scale"] = arr;
  }

  {  // estimated vs measured trade-off
    double eps_resid = 0.0, zpr_macs_resid = 0.0;
    for (const auto& f : t.fits) {
      eps_resid += f.eps.max_residual;
      zpr_macs_resid += static_cast<double>(f.geometry.conv_macs_per_element()) *
                        static_cast<double>(f.geometry.predicted_elements) * f.zpr.max_residual;
    }
    // Gap between teacher-forced MAC curves and the end-to-end measurement.
    double forcing_gap = 0.0;
    for (const auto& p : s.points) {
      const std::vector<double> sig(t.fits.size(), p.sigma);
      const auto e = estimate_operating_point(t, sig, CurveSource::sampled);
      forcing_gap = std::max(forcing_gap, std::abs(e.mac_reduction - p.mac_reduction));
    }
    const double drop_band = t.accuracy.max_residual + std::abs(t.accuracy.slope) * eps_resid;
    const double mac_band = zpr_macs_resid / s.base_macs + forcing_gap;
    std::ostringstream os;
    os.precision(8);
    os << "sigma,measured_accuracy_drop,estimated_accuracy_drop,measured_mac_reduction,estimated_mac_reduction,"
          "drop_band,mac_band,within_band\n";
    json arr = json::array();
    bool all = true;
    for (const auto& p : s.points) {
      const std::vector<double> sig(t.fits.size(), p.sigma);
      const auto e = estimate_operating_point(t, sig);
      const double drop = 100.0 * (s.base_accuracy - p.accuracy);
      const bool ok = std::abs(e.accuracy_drop - drop) <= drop_band + 1e-9 &&
                      std::abs(e.mac_reduction - p.mac_reduction) <= mac_band + 1e-9;
      all = all && ok;
      os << p.sigma << ',' << drop << ',' << e.accuracy_drop << ',' << p.mac_reduction << ',' << e.mac_reduction
         << ',' << drop_band << ',' << mac_band << ',' << (ok ? 1 : 0) << '\n';
      arr.push_back({{"sigma", p.sigma},
                     {"measured_accuracy_drop", drop},
                     {"estimated_accuracy_drop", e.accuracy_drop},
                     {"measured_mac_reduction", p.mac_reduction},
                     {"estimated_mac_reduction", e.mac_reduction},
                     {"within_band", ok}});
    }
    write_text(dir / "tradeoff.csv", os.str());
    rep["tradeoff"] = arr;
    rep["drop_band"] = drop_band;
    rep["mac_band"] = mac_band;
    rep["estimate_within_band"] = all;
    std::printf("estimated curve within band at every sampled sigma: %s (drop band %.3f pp, MAC band %.4f)\n",
                all ? "yes" : "no", drop_band, mac_band);
  }

  {  // operating points per mask
    std::ostringstream os;
    os.precision(8);
    os << "pattern,sigma,accuracy,accuracy_drop,mac_reduction\n";
    json arr = json::array();
    std::vector<std::string> files = a.mask_weights;
    if (files.empty()) files.push_back(a.model.weights);
    for (const auto& f : files) {
      ModelArgs ma = a.model;
      ma.weights = f;
      const Model mm = ma.load();
      if (!mm.has_all_zaps()) throw ValidationError(f + " carries no trained predictors");
      const char pattern = mm.zaps().begin()->second.pattern.name();
      const EvalResult base = evaluate(mm, data, {}, a.batch);
      for (double sg : a.op_sigma) {
        ForwardOptions fo;
        fo.zaps = ZapSettings::uniform(static_cast<float>(sg));
        const EvalResult r = evaluate(mm, data, fo, a.batch);
        const double drop = 100.0 * (base.accuracy() - r.accuracy());
        const double red = 1.0 - r.macs_per_sample() / base.macs_per_sample();
        os << pattern << ',' << sg << ',' << r.accuracy() << ',' << drop << ',' << red << '\n';
        arr.push_back({{"pattern", std::string(1, pattern)},
                       {"sigma", sg},
                       {"accuracy", r.accuracy()},
                       {"accuracy_drop", drop},
                       {"mac_reduction", red}});
      }
    }
    write_text(dir / "operating_points.csv", os.str());
    rep["operating_points"] = arr;
  }

  {  // misprediction histograms
    const auto hist = misprediction_profile(m, data, a.hist_sigma, a.hist_bin, a.batch);
    std::ostringstream os;
    os.precision(8);
    os << "sigma,bin_lo,bin_hi,share,total_share\n";
    json arr = json::array();
    for (std::size_t k = 0; k < hist.size(); ++k) {
      const auto& h = hist[k];
      for (std::size_t b = 0; b < h.share.size(); ++b) {
        os << a.hist_sigma[k] << ',' << static_cast<double>(b) * h.bin_width << ','
           << static_cast<double>(b + 1) * h.bin_width << ',' << h.share[b] << ',' << h.total_share() << '\n';
      }
      arr.push_back({{"sigma", a.hist_sigma[k]},
                     {"bin_width", h.bin_width},
                     {"share", h.share},
                     {"total_share", h.total_share()},
                     {"mispredicted", h.mispredicted}});
    }
    write_text(dir / "mispredictions.csv", os.str());
    rep["mispredictions"] = arr;
  }

  write_text(dir / "report.json", rep.dump(1));
  std::printf("wrote curves.csv accuracy_vs_scale.csv tradeoff.csv operating_points.csv mispredictions.csv "
              "report.json to %s\n",
              a.out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Zero-activation predictor pipeline: data, training, sweeps, trade-off fits, reports"};
  app.set_config("--config", "", "Key-value config file (TOML/INI); flags override it");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);
  app.fallthrough();
  std::uint64_t seed = 1;
  app.add_option("--seed", seed, "Seed for every random choice")->capture_default_str();

  std::function<int()> action;

  GenDataArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "Write a synthetic shape dataset (.tis)");
  c_gen->add_option("--n", gen.n, "Number of images")->required()->check(CLI::PositiveNumber);
  c_gen->add_option("--classes", gen.classes, "Number of classes (2..10)")->capture_default_str();
  c_gen->add_option("--out", gen.out, "Output path")->required();
  c_gen->add_option("--height", gen.opt.height)->capture_default_str();
  c_gen->add_option("--width", gen.opt.width)->capture_default_str();
  c_gen->add_option("--texture", gen.opt.texture)->capture_default_str();
  c_gen->add_option("--noise", gen.opt.noise)->capture_default_str();
  c_gen->add_option("--contrast-lo", gen.opt.contrast_lo)->capture_default_str();
  c_gen->add_option("--contrast-hi", gen.opt.contrast_hi)->capture_default_str();
  c_gen->add_option("--size-lo", gen.opt.size_lo)->capture_default_str();
  c_gen->add_option("--size-hi", gen.opt.size_hi)->capture_default_str();
  c_gen->callback([&] {
    gen.seed = seed;
    action = [&] { return run_gen_data(gen); };
  });

  TrainBaseArgs tb;
  auto* c_tb = app.add_subcommand("train-base", "Train the host network");
  tb.model.add(c_tb, false);
  c_tb->add_option("--data", tb.data, "Training set (.tis)")->required();
  c_tb->add_option("--out", tb.out, "Output weights (.zapw)")->required();
  c_tb->add_option("--epochs", tb.cfg.epochs)->capture_default_str();
  c_tb->add_option("--batch", tb.cfg.batch)->capture_default_str();
  c_tb->add_option("--lr", tb.cfg.lr)->capture_default_str();
  c_tb->add_option("--momentum", tb.cfg.momentum)->capture_default_str();
  c_tb->add_option("--weight-decay", tb.cfg.weight_decay)->capture_default_str();
  c_tb->add_option("--bn-refresh-batches", tb.refresh_batches, "Batch-norm refresh batches (0: one epoch)");
  c_tb->callback([&] {
    tb.cfg.seed = seed;
    action = [&] { return run_train_base(tb); };
  });

  TrainZapArgs tz;
  auto* c_tz = app.add_subcommand("train-zap", "Capture ofms and train one predictor per zapped layer");
  tz.model.add(c_tz);
  c_tz->add_option("--data", tz.data, "Capture set (.tis)")->required();
  c_tz->add_option("--out", tz.out, "Output weights with predictors")->required();
  c_tz->add_option("--pattern", tz.pattern, "Computation pattern A-D for every layer")->capture_default_str();
  c_tz->add_option("--layer-pattern", tz.layer_pattern, "Per-layer pattern LAYER=P (repeatable)");
  c_tz->add_option("--samples", tz.samples, "Capture at most this many images (0: all)");
  c_tz->add_option("--spill", tz.spill, "Spill captures to this container and train from it");
  c_tz->add_option("--epochs", tz.cfg.epochs)->capture_default_str();
  c_tz->add_option("--batch", tz.cfg.batch)->capture_default_str();
  c_tz->add_option("--lr", tz.cfg.adam.lr)->capture_default_str();
  c_tz->add_flag("--sequential", tz.sequential, "Train layers one after another");
  c_tz->callback([&] {
    tz.cfg.seed = seed;
    action = [&] { return run_train_zap(tz); };
  });

  RecalArgs rc;
  auto* c_rc = app.add_subcommand("recalibrate-bn", "Refresh host batch-norm statistics with predictors active");
  rc.model.add(c_rc);
  rc.sigma.add(c_rc);
  c_rc->add_option("--data", rc.data, "Calibration set (.tis)")->required();
  c_rc->add_option("--out", rc.out, "Output weights")->required();
  c_rc->add_option("--batches", rc.batches, "Number of batches (0: one epoch)");
  c_rc->add_option("--batch", rc.batch)->capture_default_str()->check(CLI::PositiveNumber);
  c_rc->callback([&] { action = [&] { return run_recalibrate(rc); }; });

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "Accuracy and MAC counts");
  ev.model.add(c_ev);
  ev.sigma.add(c_ev);
  c_ev->add_option("--data", ev.data, "Evaluation set (.tis)")->required();
  c_ev->add_option("--json", ev.json_out, "Also write the results as JSON");
  c_ev->add_option("--batch", ev.batch)->capture_default_str()->check(CLI::PositiveNumber);
  c_ev->add_flag("--baseline", ev.baseline, "Also evaluate without predictors");
  c_ev->callback([&] { action = [&] { return run_eval(ev); }; });

  SweepArgs sw;
  auto* c_sw = app.add_subcommand("sweep", "Per-layer curves and accuracy over a threshold grid");
  sw.model.add(c_sw);
  sw.grid.add(c_sw);
  c_sw->add_option("--data", sw.data, "Evaluation set (.tis)")->required();
  c_sw->add_option("--out", sw.out, "Sweep JSON")->required();
  c_sw->add_option("--csv", sw.csv, "Curves CSV (layer,sigma,eps,macs)");
  c_sw->add_flag("--no-accuracy", sw.no_accuracy, "Collect curves only");
  c_sw->add_option("--batch", sw.batch)->capture_default_str()->check(CLI::PositiveNumber);
  c_sw->callback([&] { action = [&] { return run_sweep_cmd(sw); }; });

  FitArgs ft;
  auto* c_ft = app.add_subcommand("fit", "Fit sigmoid curves and the accuracy model to a sweep");
  c_ft->add_option("--sweep", ft.sweep, "Sweep JSON")->required();
  c_ft->add_option("--out", ft.out, "Trade-off model JSON")->required();
  c_ft->callback([&] { action = [&] { return run_fit(ft); }; });

  OptimizeArgs op;
  auto* c_op = app.add_subcommand("optimize", "Per-layer thresholds under an error or MAC budget");
  c_op->add_option("--tradeoff", op.tradeoff, "Trade-off model JSON")->required();
  c_op->add_option("--error-budget", op.error_budget, "Bound on the summed layer error");
  c_op->add_option("--mac-budget", op.mac_budget, "Bound on zapped-layer MACs per sample");
  c_op->add_option("--out", op.out, "Thresholds JSON (usable as --sigma-file)");
  op.model.add(c_op, false);
  c_op->add_option("--data", op.data, "Measure the layer errors on this set (needs --weights)");
  c_op->add_option("--rounds", op.rounds, "Measure-and-tighten rounds")->capture_default_str();
  c_op->callback([&] { action = [&] { return run_optimize(op); }; });

  ReportArgs rp;
  auto* c_rp = app.add_subcommand("report", "Write CSV/JSON trade-off series");
  rp.model.add(c_rp);
  rp.grid.add(c_rp);
  c_rp->add_option("--data", rp.data, "Evaluation set (.tis)")->required();
  c_rp->add_option("--out-dir", rp.out_dir, "Output directory")->required();
  c_rp->add_option("--sweep", rp.sweep, "Reuse a sweep JSON instead of sweeping");
  c_rp->add_option("--tradeoff", rp.tradeoff, "Reuse a trade-off model JSON instead of fitting");
  c_rp->add_option("--mask-weights", rp.mask_weights, "Predictor weights per pattern for operating points");
  c_rp->add_option("--op-sigma", rp.op_sigma, "Thresholds for the operating points")->capture_default_str();
  c_rp->add_option("--hist-sigma", rp.hist_sigma, "Thresholds for misprediction histograms")
      ->capture_default_str();
  c_rp->add_option("--hist-bin", rp.hist_bin, "Histogram bin width")->capture_default_str()->check(
      CLI::PositiveNumber);
  c_rp->add_option("--batch", rp.batch)->capture_default_str()->check(CLI::PositiveNumber);
  c_rp->callback([&] { action = [&] { return run_report(rp); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    return action();
  } catch (const InfeasibleBudget& e) {
    std::fprintf(stderr, "infeasible: %s\n", e.what());
    return kExitInfeasible;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  } catch (const json::exception& e) {
    std::fprintf(stderr, "error: malformed JSON: %s\n", e.what());
    return kExitValidation;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
