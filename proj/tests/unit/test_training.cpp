#include <doctest.h>

#include <filesystem>
#include <random>

#include "test_util.hpp"
#include "zap/synthetic.hpp"
#include "zap/trainer.hpp"
#include "zap/zap_training.hpp"

using namespace zap;
using zap::test::bit_equal;
using zap::test::random_tensor;

namespace {

ModelSpec small_net() { return toynet4(4, true, 3, 24, 24, 4); }

}  // namespace

TEST_CASE("classifier training lowers the loss") {
  const TinyImageSet data = generate_synthetic(256, 4, 3);
  Model m = build_model(small_net(), 2);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch = 32;
  cfg.lr = 0.02f;
  std::size_t calls = 0;
  const auto stats = train_classifier(m, data, cfg, {}, [&](const EpochStats&) { ++calls; });
  REQUIRE(stats.size() == 4u);
  CHECK(calls == 4u);
  CHECK(stats.back().loss < stats.front().loss);
  CHECK(stats.front().loss < 2.0);  // ln 4 = 1.386 for an uninformed model
  const EvalResult r = evaluate(m, data);
  CHECK(r.total == 256u);
  CHECK(r.accuracy() > 0.25);
  CHECK(r.macs_per_sample() == doctest::Approx(static_cast<double>(m.baseline_conv_macs() + 4 * 6 * 6 * 2 * 4)));

  // Same seed, same result.
  Model m2 = build_model(small_net(), 2);
  const auto stats2 = train_classifier(m2, data, cfg);
  CHECK(stats2.back().loss == stats.back().loss);
}

TEST_CASE("argmax rows") {
  const Tensor logits({2, 3}, std::vector<float>{0.1f, 0.5f, 0.2f, 3.0f, -1.0f, 2.0f});
  CHECK(argmax_rows(logits) == std::vector<std::size_t>{1, 0});
}

TEST_CASE("a predictor learns an all-zero and an all-positive layer") {
  ZapTrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch = 8;
  cfg.adam.lr = 0.02f;

  ZapUnit zero = ZapUnit::create(3, PatternMask::make(PatternId::B), 1);
  zero.bn2.beta.fill(0.8f);
  const Tensor zeros({16, 3, 6, 6}, 0.0f);
  const ZapTrainReport rz = train_zap(zero, zeros, cfg);
  CHECK(rz.epoch_loss.size() == 30u);
  CHECK(rz.epoch_loss.back() < rz.epoch_loss.front());
  CHECK(rz.epoch_loss.back() < 1e-3);
  const ZapQuality qz = zap_quality(zero, zeros, 0.5f);
  CHECK(qz.true_zero == qz.total());

  std::mt19937 rng(2);
  const Tensor positive = random_tensor({16, 3, 6, 6}, rng, 0.2f, 1.5f);
  ZapUnit one = ZapUnit::create(3, PatternMask::make(PatternId::B), 1);
  const ZapTrainReport ro = train_zap(one, positive, cfg);
  CHECK(ro.epoch_loss.back() < ro.epoch_loss.front());
  CHECK(ro.epoch_loss.back() < 0.02);
  const ZapQuality qo = zap_quality(one, positive, 0.5f);
  CHECK(qo.true_nonzero == qo.total());
  CHECK(qo.total() == 16u * 3 * 18);

  CHECK_THROWS_AS(train_zap(one, Tensor(), cfg), std::invalid_argument);
}

TEST_CASE("training sees I_t teacher values only through their sign") {
  std::mt19937 rng(3);
  const Tensor a = relu(random_tensor({8, 2, 6, 6}, rng));
  Tensor b = a;
  const IndexSets s = index_sets(PatternMask::make(PatternId::A), 6, 6);
  for (std::size_t nc = 0; nc < 16; ++nc)
    for (auto p : s.predicted) b[nc * 36 + p] *= 3.0f;
  ZapTrainConfig cfg;
  cfg.epochs = 3;
  ZapUnit ua = ZapUnit::create(2, PatternMask::make(PatternId::A), 4);
  ZapUnit ub = ua;
  const auto ra = train_zap(ua, a, cfg);
  const auto rb = train_zap(ub, b, cfg);
  CHECK(ra.epoch_loss == rb.epoch_loss);
  CHECK(bit_equal(ua.dw1, ub.dw1));
  CHECK(bit_equal(ua.bn2.running_mean, ub.bn2.running_mean));

  CHECK(bit_equal(partial_ofm(a, ua.pattern), partial_ofm(b, ua.pattern)));
}

TEST_CASE("zap quality bookkeeping") {
  Tensor ofm({1, 1, 2, 2}, std::vector<float>{0.0f, 1.0f, 0.0f, 2.0f});
  ZapUnit u = ZapUnit::create(1, PatternMask::make(PatternId::B), 1);
  u.dw1.fill(0.0f);
  u.dw2.fill(0.0f);
  u.bn2.beta.fill(1.0f);  // M = 1 everywhere: always "compute"
  // B on 2x2: I_t = {(0,1), (1,0)} holding 1 and 0.
  ZapQuality q = zap_quality(u, ofm, 0.5f);
  CHECK(q.true_nonzero == 1u);
  CHECK(q.false_nonzero == 1u);
  CHECK(q.total() == 2u);
  CHECK(q.balanced_accuracy() == doctest::Approx(0.5));
  CHECK(q.majority_baseline() == doctest::Approx(0.5));
  q = zap_quality(u, ofm, 1.0f);  // strict: M == sigma is skipped
  CHECK(q.true_zero == 1u);
  CHECK(q.false_zero == 1u);

  ZapQuality m;
  m.true_zero = 6;
  m.false_nonzero = 2;
  m.true_nonzero = 1;
  m.false_zero = 1;
  CHECK(m.accuracy() == doctest::Approx(0.7));
  CHECK(m.balanced_accuracy() == doctest::Approx((0.75 + 0.5) / 2));
  CHECK(m.majority_baseline() == doctest::Approx(0.8));
}

TEST_CASE("captures match a predictor-free forward and survive a spill") {
  Model m = build_model(small_net(), 5);
  std::mt19937 rng(6);
  const Tensor x = random_tensor({3, 3, 24, 24}, rng);
  auto caps = capture_pairs(m, x, true);
  REQUIRE(caps.size() == 3u);

  std::map<std::size_t, Tensor> seen;
  ForwardOptions o;
  o.observer = [&](const ZapLayerEvent& ev) { seen[ev.layer] = *ev.ofm; };
  MacCounter mc;
  m.forward(x, mc, o);
  for (auto& [layer, cap] : caps) {
    CHECK(bit_equal(cap.ofm, seen.at(layer)));
    CHECK(cap.ifm.dim(0) == 3u);
  }

  const std::size_t layers[] = {7};
  capture_pairs(m, layers, x, caps);
  CHECK(caps.at(7).ofm.dim(0) == 6u);
  CHECK(caps.at(3).ofm.dim(0) == 3u);

  const auto path = (std::filesystem::temp_directory_path() / "zap_test_caps.zapw").string();
  spill_captures(caps, path);
  const auto back = load_captures(path);
  std::filesystem::remove(path);
  REQUIRE(back.size() == 3u);
  CHECK(bit_equal(back.at(10).ofm, caps.at(10).ofm));
  CHECK(bit_equal(back.at(3).ifm, caps.at(3).ifm));
}

TEST_CASE("train_zaps fills every zapped layer") {
  Model m = build_model(small_net(), 5);
  std::mt19937 rng(7);
  const auto caps = capture_pairs(m, random_tensor({4, 3, 24, 24}, rng));
  ZapTrainConfig cfg;
  cfg.epochs = 1;
  const auto seq = train_zaps(m, caps, PatternMask::make(PatternId::C), cfg, false);
  CHECK(seq.size() == 3u);
  CHECK(m.has_all_zaps());
  CHECK(m.zaps().at(3).pattern.id() == PatternId::C);

  Model p = build_model(small_net(), 5);
  train_zaps(p, caps, PatternMask::make(PatternId::C), cfg, true);
  for (const auto& [layer, u] : m.zaps()) CHECK(bit_equal(u.dw2, p.zaps().at(layer).dw2));
}

TEST_CASE("batch-norm recalibration follows the momentum recurrence") {
  ModelSpec s;
  s.in_channels = 1;
  s.in_height = 4;
  s.in_width = 4;
  s.classes = 2;
  LayerSpec conv;
  conv.kind = LayerKind::conv;
  conv.out = 2;
  LayerSpec bn;
  bn.kind = LayerKind::batch_norm;
  LayerSpec r;
  r.kind = LayerKind::relu;
  LayerSpec fc;
  fc.kind = LayerKind::linear;
  fc.out = 2;
  s.layers = {conv, bn, r, fc};
  Model m = build_model(s, 1);

  TinyImageSet data;
  data.channels = 1;
  data.height = 4;
  data.width = 4;
  data.classes = 2;
  std::mt19937 rng(3);
  std::uniform_int_distribution<int> px(0, 255);
  for (int i = 0; i < 10 * 16; ++i) data.images.push_back(static_cast<std::uint8_t>(px(rng)));
  data.labels.assign(10, 0);

  // Batches of 4 from a set of 10 wrap after the second batch.
  std::vector<double> mean(2, 0.0), var(2, 1.0);
  const std::size_t firsts[] = {0, 4, 0};
  for (std::size_t first : firsts) {
    MacCounter mc;
    const Tensor y = conv2d(data.batch(first, 4), m.layers()[0].conv, mc);
    for (std::size_t c = 0; c < 2; ++c) {
      double sum = 0.0;
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t k = 0; k < 16; ++k) sum += y[(n * 2 + c) * 16 + k];
      const double mu = sum / 64.0;
      double sq = 0.0;
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t k = 0; k < 16; ++k) sq += (y[(n * 2 + c) * 16 + k] - mu) * (y[(n * 2 + c) * 16 + k] - mu);
      mean[c] = 0.9 * mean[c] + 0.1 * mu;
      var[c] = 0.9 * var[c] + 0.1 * sq / 63.0;
    }
  }
  recalibrate_bn(m, data, ZapSettings::off(), 3, 4);
  for (std::size_t c = 0; c < 2; ++c) {
    CHECK(m.layers()[1].bn.running_mean[c] == doctest::Approx(mean[c]).epsilon(1e-5));
    CHECK(m.layers()[1].bn.running_var[c] == doctest::Approx(var[c]).epsilon(1e-5));
  }
  CHECK_THROWS_AS(recalibrate_bn(m, data, ZapSettings::off(), 1, 1), std::invalid_argument);

  // Without batch norm nothing changes.
  ModelSpec plain = s;
  plain.layers = {conv, r, fc};
  Model p = build_model(plain, 1);
  const WeightContainer before = p.to_container();
  recalibrate_bn(p, data, ZapSettings::off(), 3, 4);
  CHECK(bit_equal(p.to_container().entries()[0].tensor, before.entries()[0].tensor));
}

TEST_CASE("fine-tuning leaves predictors untouched") {
  const TinyImageSet data = generate_synthetic(64, 4, 9);
  Model m = build_model(small_net(), 3);
  m.attach_zaps(PatternMask::make(PatternId::B), 1);
  const auto zaps_before = m.zaps();
  const Tensor w_before = m.layers()[3].conv.weights;
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch = 16;
  fine_tune(m, data, ZapSettings::uniform(0.2f), cfg);
  for (const auto& [layer, u] : zaps_before) {
    CHECK(bit_equal(u.dw1, m.zaps().at(layer).dw1));
    CHECK(bit_equal(u.bn2.running_var, m.zaps().at(layer).bn2.running_var));
  }
  CHECK_FALSE(bit_equal(w_before, m.layers()[3].conv.weights));
}
