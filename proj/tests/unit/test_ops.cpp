#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "test_util.hpp"
#include "zap/ops.hpp"
#include "zap/simd/kernels.hpp"

using namespace zap;
using zap::test::pick;
using zap::test::random_tensor;
using zap::test::conv_oracle;
using zap::test::dw_oracle;

namespace {

ConvParams random_conv(std::mt19937& rng, std::size_t k, std::size_t ci, std::size_t co, std::size_t s,
                       std::size_t p) {
  return {random_tensor({k, k, ci, co}, rng), random_tensor({co}, rng), s, p};
}

}  // namespace

TEST_CASE("conv2d closed-form examples") {
  MacCounter mc;
  ConvParams p{Tensor({1, 1, 1, 1}, 3.0f), Tensor({1}, 0.0f), 1, 0};
  const Tensor out = conv2d(Tensor({1, 1, 1}, 2.0f), p, mc);
  CHECK(out.shape() == Shape{1, 1, 1});
  CHECK(out[0] == 6.0f);

  std::mt19937 rng(3);
  const Tensor in = random_tensor({1, 3, 3}, rng);
  Tensor w({3, 3, 1, 1}, 0.0f);
  w[(1 * 3 + 1)] = 1.0f;
  const Tensor id = conv2d(in, {w, Tensor({1}, 0.0f), 1, 1}, mc);
  CHECK(id == in);
}

TEST_CASE("conv2d matches the brute-force oracle and counts k*k*c_in per output") {
  std::mt19937 rng(11);
  {
    const Tensor in = random_tensor({2, 5, 5}, rng);
    const ConvParams p = random_conv(rng, 3, 2, 2, 1, 1);
    MacCounter mc;
    const Tensor out = conv2d(in, p, mc, "t");
    CHECK(zap::test::scaled_error(out, conv_oracle(in, p)) <= 1e-5);
    CHECK(mc.get("t") == 5u * 5 * 2 * 9 * 2);
  }
  for (int trial = 0; trial < 120; ++trial) {
    const std::size_t k = 2 * pick(rng, 0, 2) + 1, s = pick(rng, 1, 2), pad = pick(rng, 0, k / 2);
    const std::size_t ci = pick(rng, 1, 6), co = pick(rng, 1, 11), h = pick(rng, k, 9), w = pick(rng, k, 9);
    const std::size_t n = pick(rng, 1, 3);
    const Tensor in = random_tensor({n, ci, h, w}, rng);
    const ConvParams p = random_conv(rng, k, ci, co, s, pad);
    MacCounter mc;
    const Tensor out = conv2d(in, p, mc, "t");
    REQUIRE(out.shape() == conv2d_output_shape(in, p));
    CHECK(zap::test::scaled_error(out, conv_oracle(in, p)) <= 1e-5);
    CHECK(mc.get("t") == n * out.dim(1) * out.dim(2) * out.dim(3) * k * k * ci);
  }
}

TEST_CASE("conv2d rejects mismatched shapes naming both") {
  MacCounter mc;
  std::mt19937 rng(1);
  const ConvParams p = random_conv(rng, 3, 2, 4, 1, 1);
  try {
    conv2d(Tensor({3, 5, 5}), p, mc);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[3x5x5]") != std::string::npos);
    CHECK(msg.find("[3x3x2x4]") != std::string::npos);
  }
}

TEST_CASE("conv2d_pixel and conv2d_element reproduce conv2d bit for bit") {
  std::mt19937 rng(5);
  const Tensor in = random_tensor({4, 7, 6}, rng);
  const ConvParams p = random_conv(rng, 3, 4, 5, 1, 1);
  MacCounter mc;
  const Tensor full = conv2d(in, p, mc);
  const auto g = conv_geometry(feature_dims(in), p);
  std::vector<float> px(5);
  for (std::size_t y = 0; y < 7; ++y)
    for (std::size_t x = 0; x < 6; ++x) {
      conv2d_pixel(in.raw(), g, p, y, x, px.data());
      for (std::size_t z = 0; z < 5; ++z) {
        CHECK(px[z] == full[(z * 7 + y) * 6 + x]);
        CHECK(conv2d_element(in.raw(), g, p, y, x, z) == full[(z * 7 + y) * 6 + x]);
      }
    }
}

TEST_CASE("dwconv2d examples and oracle") {
  MacCounter mc;
  Tensor ones({2, 2, 2}, 1.0f);
  const Tensor out = dwconv2d(ones, Tensor({3, 3, 1, 2}, 1.0f), mc, std::nullopt, "dw");
  for (float v : out.data()) CHECK(v == 4.0f);
  CHECK(mc.get("dw") == 9u * 8);

  std::mt19937 rng(8);
  Tensor id({3, 3, 1, 3}, 0.0f);
  for (std::size_t c = 0; c < 3; ++c) id[4 * 3 + c] = 1.0f;
  const Tensor in = random_tensor({3, 4, 4}, rng);
  CHECK(dwconv2d(in, id, mc) == in);

  for (int trial = 0; trial < 120; ++trial) {
    const std::size_t k = 2 * pick(rng, 0, 2) + 1;
    const Tensor x = random_tensor({pick(rng, 1, 2), pick(rng, 1, 6), pick(rng, 1, 9), pick(rng, 1, 9)}, rng);
    const Tensor f = random_tensor({k, k, 1, x.dim(1)}, rng);
    CHECK(zap::test::scaled_error(dwconv2d(x, f, mc), dw_oracle(x, f)) <= 1e-5);
  }
  CHECK_THROWS_AS(dwconv2d(in, Tensor({3, 3, 1, 2}), mc), ShapeError);

  MacCounter sparse;
  dwconv2d(in, id, sparse, 10, "s");
  CHECK(sparse.get("s") == 90u);
}

TEST_CASE("batch norm closed forms, statistics and running updates") {
  BatchNormParams id = BatchNormParams::identity(1);
  id.eps = 0.0f;
  const Tensor x({1, 1, 3}, std::vector<float>{-1.0f, 0.5f, 4.0f});
  CHECK(batch_norm(x, id) == x);

  BatchNormParams p{Tensor({1}, 2.0f), Tensor({1}, 1.0f), Tensor({1}, 3.0f), Tensor({1}, 4.0f)};
  p.eps = 0.0f;
  CHECK(batch_norm(Tensor({1, 1, 1}, 5.0f), p)[0] == doctest::Approx(3.0f));

  std::mt19937 rng(2);
  const Tensor b = random_tensor({6, 3, 4, 5}, rng, -2.0f, 3.0f);
  const ChannelStats st = channel_statistics(b);
  BatchNormParams q = BatchNormParams::identity(3);
  const Tensor y = batch_norm(b, q, true);
  for (std::size_t c = 0; c < 3; ++c) {
    // Two-pass oracle.
    double mean = 0.0, m = 0.0;
    for (std::size_t n = 0; n < 6; ++n)
      for (std::size_t i = 0; i < 20; ++i) mean += b[(n * 3 + c) * 20 + i];
    mean /= 120.0;
    for (std::size_t n = 0; n < 6; ++n)
      for (std::size_t i = 0; i < 20; ++i) m += std::pow(b[(n * 3 + c) * 20 + i] - mean, 2);
    CHECK(st.mean[c] == doctest::Approx(mean).epsilon(1e-12));
    CHECK(st.var[c] == doctest::Approx(m / 120.0).epsilon(1e-12));
    CHECK(q.running_mean[c] == doctest::Approx(0.1 * mean).epsilon(1e-6));
    CHECK(q.running_var[c] == doctest::Approx(0.9 + 0.1 * m / 119.0).epsilon(1e-6));
    double ym = 0.0, yv = 0.0;
    for (std::size_t n = 0; n < 6; ++n)
      for (std::size_t i = 0; i < 20; ++i) ym += y[(n * 3 + c) * 20 + i];
    ym /= 120.0;
    for (std::size_t n = 0; n < 6; ++n)
      for (std::size_t i = 0; i < 20; ++i) yv += std::pow(y[(n * 3 + c) * 20 + i] - ym, 2);
    CHECK(std::abs(ym) < 1e-5);
    CHECK(yv / 120.0 == doctest::Approx(1.0).epsilon(1e-3));
  }

  BatchNormParams bad = BatchNormParams::identity(1);
  bad.running_var[0] = 0.0f;
  CHECK_THROWS_AS(batch_norm(Tensor({1, 1, 1}), bad), std::invalid_argument);
}

TEST_CASE("relu, capped relu, maxpool, linear") {
  CHECK(relu(Tensor({4}, std::vector<float>{-1, 0, 0.5f, 2})) == Tensor({4}, std::vector<float>{0, 0, 0.5f, 2}));
  CHECK(relu(Tensor({3}, std::vector<float>{-1, 0.5f, 2}), 1.0f) == Tensor({3}, std::vector<float>{0, 0.5f, 1}));
  CHECK(relu(Tensor({5}, -3.0f)) == Tensor({5}, 0.0f));

  const Tensor mp = maxpool2x2(Tensor({1, 2, 2}, std::vector<float>{1, 2, 3, 4}));
  CHECK(mp.shape() == Shape{1, 1, 1});
  CHECK(mp[0] == 4.0f);
  CHECK(maxpool2x2(Tensor({2, 5, 3})).shape() == Shape{2, 2, 1});

  MacCounter mc;
  Tensor eye({3, 3}, 0.0f);
  for (std::size_t i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0f;
  const Tensor v({3}, std::vector<float>{1.5f, -2, 7});
  CHECK(linear(v, eye, Tensor({3}, 0.0f), mc, "lin") == v);
  CHECK(mc.get("lin") == 9u);

  std::mt19937 rng(4);
  for (int trial = 0; trial < 120; ++trial) {
    const std::size_t n = pick(rng, 1, 4), in = pick(rng, 1, 40), out = pick(rng, 1, 17);
    const Tensor x = random_tensor({n, in}, rng), w = random_tensor({in, out}, rng), b = random_tensor({out}, rng);
    const Tensor y = linear(x, w, b, mc);
    Tensor ref({n, out});
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t o = 0; o < out; ++o) {
        double acc = b[o];
        for (std::size_t i = 0; i < in; ++i) acc += static_cast<double>(x[s * in + i]) * w[i * out + o];
        ref[s * out + o] = static_cast<float>(acc);
      }
    CHECK(zap::test::scaled_error(y, ref) <= 1e-5);

    const Tensor m = random_tensor({n, 2, 2 * pick(rng, 1, 4), 2 * pick(rng, 1, 4)}, rng);
    const Tensor pooled = maxpool2x2(m);
    const FeatureDims d = feature_dims(m);
    for (std::size_t q = 0; q < pooled.size(); ++q) {
      const std::size_t ox = q % (d.w / 2), oy = q / (d.w / 2) % (d.h / 2), nc = q / (d.plane() / 4);
      const float* src = m.raw() + nc * d.plane();
      const float ref_max = std::max(std::max(src[2 * oy * d.w + 2 * ox], src[2 * oy * d.w + 2 * ox + 1]),
                                     std::max(src[(2 * oy + 1) * d.w + 2 * ox], src[(2 * oy + 1) * d.w + 2 * ox + 1]));
      CHECK(pooled[q] == ref_max);
    }
  }
  CHECK_THROWS_AS(linear(Tensor({4}), eye, Tensor({3}), mc), ShapeError);
}

TEST_CASE("forward kernels are deterministic") {
  std::mt19937 rng(9);
  const Tensor in = random_tensor({2, 3, 8, 8}, rng);
  const ConvParams p = random_conv(rng, 3, 3, 6, 1, 1);
  MacCounter mc;
  CHECK(zap::test::bit_equal(conv2d(in, p, mc), conv2d(in, p, mc)));
}

TEST_CASE("AVX2 kernels agree with the scalar reference") {
  const simd::KernelTable* v = simd::avx2_kernels();
  if (!v) {
    MESSAGE("AVX2 variant unavailable on this machine; skipping");
    return;
  }
  const simd::KernelTable& s = simd::scalar_kernels();
  std::mt19937 rng(21);
  for (int trial = 0; trial < 150; ++trial) {
    simd::ConvGeometry g;
    g.k = 2 * pick(rng, 0, 2) + 1;
    g.stride = pick(rng, 1, 2);
    g.pad = pick(rng, 0, g.k / 2);
    g.c_in = pick(rng, 1, 20);
    g.c_out = pick(rng, 1, 40);
    g.h_in = pick(rng, g.k, 9);
    g.w_in = pick(rng, g.k, 9);
    const Tensor in = random_tensor({g.c_in, g.h_in, g.w_in}, rng);
    const Tensor w = random_tensor({g.k, g.k, g.c_in, g.c_out}, rng);
    std::vector<float> a(g.c_out), b(g.c_out);
    const std::size_t oy = pick(rng, 0, g.h_out() - 1), ox = pick(rng, 0, g.w_out() - 1);
    s.conv_pixel(g, in.raw(), w.raw(), oy, ox, a.data());
    v->conv_pixel(g, in.raw(), w.raw(), oy, ox, b.data());
    CHECK(a == b);

    const Tensor gout = random_tensor({g.c_out}, rng);
    Tensor gin_s = Tensor::like(in), gin_v = Tensor::like(in), gw_s = Tensor::like(w), gw_v = Tensor::like(w);
    s.conv_pixel_backward(g, in.raw(), w.raw(), oy, ox, gout.raw(), gin_s.raw(), gw_s.raw());
    v->conv_pixel_backward(g, in.raw(), w.raw(), oy, ox, gout.raw(), gin_v.raw(), gw_v.raw());
    CHECK(gw_s == gw_v);
    CHECK(zap::test::scaled_error(gin_v, gin_s) <= 1e-5);

    const std::size_t h = pick(rng, 1, 12), wd = pick(rng, 1, 21), k = 2 * pick(rng, 0, 2) + 1;
    const Tensor plane = random_tensor({h, wd}, rng), taps = random_tensor({k * k}, rng);
    Tensor o1({h, wd}), o2({h, wd});
    s.dw_plane(plane.raw(), h, wd, taps.raw(), k, o1.raw());
    v->dw_plane(plane.raw(), h, wd, taps.raw(), k, o2.raw());
    CHECK(zap::test::bit_equal(o1, o2));

    const std::size_t n = pick(rng, 0, 77);
    const Tensor x = random_tensor({n + 1}, rng), y0 = random_tensor({n + 1}, rng);
    Tensor y1 = y0, y2 = y0;
    s.axpy(0.37f, x.raw(), y1.raw(), n);
    v->axpy(0.37f, x.raw(), y2.raw(), n);
    CHECK(zap::test::bit_equal(y1, y2));
    const double ds = s.dot(x.raw(), y0.raw(), n), dv = v->dot(x.raw(), y0.raw(), n);
    CHECK(std::abs(ds - dv) <= 1e-5 * std::max(1.0, std::abs(ds)));
  }
}

TEST_CASE("whole-op outputs are identical under either kernel table") {
  if (!simd::avx2_kernels()) return;
  std::mt19937 rng(33);
  const Tensor in = random_tensor({2, 5, 9, 7}, rng);
  const ConvParams p = random_conv(rng, 3, 5, 12, 1, 1);
  const Tensor f = random_tensor({3, 3, 1, 5}, rng);
  const Tensor w = random_tensor({5 * 9 * 7, 10}, rng), b = random_tensor({10}, rng);
  MacCounter mc;
  const simd::Isa before = simd::active().isa;
  REQUIRE(simd::set_active(simd::Isa::scalar));
  const Tensor c1 = conv2d(in, p, mc), d1 = dwconv2d(in, f, mc), l1 = linear(in, w, b, mc);
  REQUIRE(simd::set_active(simd::Isa::avx2));
  const Tensor c2 = conv2d(in, p, mc), d2 = dwconv2d(in, f, mc), l2 = linear(in, w, b, mc);
  simd::set_active(before);
  CHECK(zap::test::bit_equal(c1, c2));
  CHECK(zap::test::bit_equal(d1, d2));
  CHECK(zap::test::bit_equal(l1, l2));
}
