#include "zap/pattern.hpp"

#include <cctype>
#include <stdexcept>
#include <string>

namespace zap {

PatternMask PatternMask::make(PatternId id) {
  switch (id) {
    case PatternId::A:
    case PatternId::C: {
      // Anti-diagonal stripes: cell (y, x) lies on stripe (x + y) mod 5.
      const bool a = id == PatternId::A;
      std::vector<bool> tile(25);
      for (std::size_t y = 0; y < 5; ++y) {
        for (std::size_t x = 0; x < 5; ++x) {
          const bool in_a = (x + y) % 5 < 3;
          tile[y * 5 + x] = a ? in_a : !in_a;
        }
      }
      return {id, 5, 5, std::move(tile)};
    }
    case PatternId::B:
      return {id, 2, 2, {true, false, false, true}};
    case PatternId::D:
      return {id, 2, 2, {true, false, false, false}};
  }
  throw std::invalid_argument("unknown pattern id");
}

PatternMask PatternMask::parse(std::string_view name) {
  if (name.size() == 1) {
    const char c = static_cast<char>(std::toupper(static_cast<unsigned char>(name[0])));
    if (c >= 'A' && c <= 'D') return make(static_cast<PatternId>(c - 'A'));
  }
  throw std::invalid_argument("pattern must be one of A, B, C, D; got '" + std::string(name) + "'");
}

double PatternMask::alpha() const noexcept {
  std::size_t on = 0;
  for (bool b : tile_) on += b;
  return static_cast<double>(on) / static_cast<double>(tile_.size());
}

std::vector<bool> IndexSets::computed_map() const {
  std::vector<bool> m(height * width, false);
  for (auto i : computed) m[i] = true;
  return m;
}

IndexSets index_sets(const PatternMask& mask, std::size_t w_o, std::size_t h_o) {
  IndexSets s;
  s.height = h_o;
  s.width = w_o;
  for (std::size_t y = 0; y < h_o; ++y) {
    for (std::size_t x = 0; x < w_o; ++x) {
      (mask.computed(y, x) ? s.computed : s.predicted).push_back(y * w_o + x);
    }
  }
  return s;
}

Tensor apply_mask(const Tensor& ofm, std::span<const std::size_t> spatial) {
  const FeatureDims d = feature_dims(ofm, "masked ofm");
  std::vector<bool> keep(d.plane(), false);
  for (auto i : spatial) {
    if (i >= d.plane()) {
      throw std::out_of_range("spatial index " + std::to_string(i) + " outside " + std::to_string(d.h) + "x" +
                              std::to_string(d.w) + " plane");
    }
    keep[i] = true;
  }
  Tensor out = Tensor::like(ofm);
  for (std::size_t p = 0; p < d.n * d.c; ++p) {
    const std::size_t off = p * d.plane();
    for (std::size_t i = 0; i < d.plane(); ++i) {
      if (keep[i]) out[off + i] = ofm[off + i];
    }
  }
  return out;
}

}  // namespace zap
