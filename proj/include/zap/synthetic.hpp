#pragma once

#include <cstddef>
#include <cstdint>

#include "zap/io.hpp"

namespace zap {

/// Up to this many distinct shape classes.
inline constexpr std::size_t kSyntheticClasses = 10;

struct SyntheticOptions {
  std::size_t height = 24;
  std::size_t width = 24;
  /// Background texture amplitude in [0, 1].
  float texture = 0.25f;
  /// Per-pixel noise amplitude.
  float noise = 0.05f;
  /// Minimum and maximum luminance offset of the shape from the background.
  float contrast_lo = 0.12f;
  float contrast_hi = 0.4f;
  /// Shape radius range as a fraction of the shorter image side.
  float size_lo = 0.2f;
  float size_hi = 0.38f;
};

/// Procedural colored shapes on textured backgrounds. The shape is fixed by
/// the class (disc, square, triangle, plus, horizontal bar, vertical bar,
/// ring, diamond, X, dot pair); colors, size, position and background vary.
/// Labels are balanced (counts differ by at most one) and shuffled.
/// Deterministic under `seed`. Throws std::invalid_argument for n == 0 or
/// classes outside 2..10.
TinyImageSet generate_synthetic(std::size_t n, std::size_t classes, std::uint64_t seed,
                                const SyntheticOptions& options = {});

}  // namespace zap
