#include "zap/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <stdexcept>

namespace zap {
namespace {

// mt19937_64 output is fully specified; the standard distributions are not,
// so values are derived from raw draws to keep files identical everywhere.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : g_(seed) {}
  double uniform() { return static_cast<double>(g_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

 private:
  std::mt19937_64 g_;
};

bool inside(std::size_t cls, double dx, double dy, double r) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  const double bar = 0.3 * r;
  switch (cls) {
    case 0: return dx * dx + dy * dy <= r * r;                          // disc
    case 1: return ax <= 0.8 * r && ay <= 0.8 * r;                      // square
    case 2: return dy <= 0.8 * r && dy >= -0.9 * r && ax <= 0.5 * (dy + 0.9 * r);  // triangle
    case 3: return (ax <= bar && ay <= r) || (ay <= bar && ax <= r);    // plus
    case 4: return ax <= r && ay <= bar;                                // horizontal bar
    case 5: return ay <= r && ax <= bar;                                // vertical bar
    case 6: {                                                            // ring
      const double d = std::sqrt(dx * dx + dy * dy);
      return d <= r && d >= 0.55 * r;
    }
    case 7: return ax + ay <= r;  // diamond
    case 8: return (std::abs(dx - dy) <= 1.2 * bar || std::abs(dx + dy) <= 1.2 * bar) && ax <= 0.8 * r && ay <= 0.8 * r;
    case 9: {  // two dots on a diagonal
      const double o = 0.5 * r, q = 0.38 * r;
      return (dx - o) * (dx - o) + (dy - o) * (dy - o) <= q * q || (dx + o) * (dx + o) + (dy + o) * (dy + o) <= q * q;
    }
    default: return false;
  }
}

}  // namespace

TinyImageSet generate_synthetic(std::size_t n, std::size_t classes, std::uint64_t seed,
                                const SyntheticOptions& opt) {
  if (n == 0) throw std::invalid_argument("synthetic set needs at least one sample");
  if (classes < 2 || classes > kSyntheticClasses) {
    throw std::invalid_argument("synthetic classes must be in 2.." + std::to_string(kSyntheticClasses));
  }
  if (opt.height < 8 || opt.width < 8) throw std::invalid_argument("synthetic images must be at least 8x8");

  Rng rng(seed);
  TinyImageSet set;
  set.channels = 3;
  set.height = opt.height;
  set.width = opt.width;
  set.classes = classes;
  set.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) set.labels[i] = static_cast<std::uint8_t>(i % classes);
  for (std::size_t i = n; i > 1; --i) std::swap(set.labels[i - 1], set.labels[rng.below(i)]);

  const std::size_t h = opt.height, w = opt.width, plane = h * w;
  const double extent = static_cast<double>(std::min(h, w));
  set.images.resize(n * 3 * plane);
  std::vector<double> img(3 * plane);

  for (std::size_t s = 0; s < n; ++s) {
    // Background: base color, a linear gradient and a sinusoidal texture.
    std::array<double, 3> base{}, shape{};
    for (auto& v : base) v = rng.uniform(0.15, 0.85);
    // Shape color keeps a minimum luminance contrast to the background.
    const double base_lum = (base[0] + base[1] + base[2]) / 3.0;
    const double contrast = rng.uniform(opt.contrast_lo, opt.contrast_hi);
    const double shift = base_lum > 0.5 ? -contrast : contrast;
    for (std::size_t c = 0; c < 3; ++c) shape[c] = std::clamp(base[c] + shift + rng.uniform(-0.2, 0.2), 0.0, 1.0);
    const double gx = rng.uniform(-0.15, 0.15), gy = rng.uniform(-0.15, 0.15);
    const double fx = rng.uniform(0.3, 1.2), fy = rng.uniform(0.3, 1.2), ph = rng.uniform(0.0, 6.283185307179586);
    const double amp = opt.texture * rng.uniform(0.2, 0.5);

    const std::size_t cls = set.labels[s];
    const double r = extent * rng.uniform(opt.size_lo, opt.size_hi);
    const double cx = rng.uniform(r, static_cast<double>(w) - r);
    const double cy = rng.uniform(r, static_cast<double>(h) - r);

    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double u = static_cast<double>(x) / static_cast<double>(w) - 0.5;
        const double v = static_cast<double>(y) / static_cast<double>(h) - 0.5;
        const double tex = amp * std::sin(fx * static_cast<double>(x) + ph) * std::sin(fy * static_cast<double>(y));
        const double noise = opt.noise * rng.uniform(-1.0, 1.0);
        const bool on = inside(cls, static_cast<double>(x) + 0.5 - cx, static_cast<double>(y) + 0.5 - cy, r);
        for (std::size_t c = 0; c < 3; ++c) {
          const double bg = base[c] + gx * u + gy * v + tex + noise;
          img[c * plane + y * w + x] = on ? shape[c] + 0.5 * noise : bg;
        }
      }
    }
    std::uint8_t* dst = set.images.data() + s * 3 * plane;
    for (std::size_t k = 0; k < 3 * plane; ++k) {
      dst[k] = static_cast<std::uint8_t>(std::lround(std::clamp(img[k], 0.0, 1.0) * 255.0));
    }
  }
  return set;
}

}  // namespace zap
