#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "zap/tensor.hpp"

namespace zap {

enum class PatternId { A, B, C, D };

/// Periodic spatial stencil choosing which ofm positions are computed before
/// prediction. The same split applies to every channel.
///
///   A: diagonal stripes of period 5, 3 of 5 computed   (alpha 0.6)
///   B: 2x2 checkerboard                                (alpha 0.5)
///   C: complement of A                                 (alpha 0.4)
///   D: one computed cell per 2x2 tile                  (alpha 0.25)
class PatternMask {
 public:
  static PatternMask make(PatternId id);

  /// Accepts "A".."D" (case-insensitive); throws std::invalid_argument otherwise.
  static PatternMask parse(std::string_view name);

  PatternId id() const noexcept { return id_; }
  char name() const noexcept { return static_cast<char>('A' + static_cast<int>(id_)); }

  std::size_t tile_rows() const noexcept { return rows_; }
  std::size_t tile_cols() const noexcept { return cols_; }

  /// True when position (y, x) belongs to the computed set. Tiles wrap.
  bool computed(std::size_t y, std::size_t x) const noexcept { return tile_[(y % rows_) * cols_ + x % cols_]; }

  /// Fraction of computed cells in one tile.
  double alpha() const noexcept;

 private:
  PatternMask(PatternId id, std::size_t rows, std::size_t cols, std::vector<bool> tile)
      : id_(id), rows_(rows), cols_(cols), tile_(std::move(tile)) {}

  PatternId id_;
  std::size_t rows_;
  std::size_t cols_;
  std::vector<bool> tile_;
};

/// Spatial partition of an h x w plane into computed (I_s) and predicted
/// (I_t) flat indices y*w + x, both ascending.
struct IndexSets {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::size_t> computed;
  std::vector<std::size_t> predicted;

  /// Membership map over the plane, true for I_s.
  std::vector<bool> computed_map() const;
};

IndexSets index_sets(const PatternMask& mask, std::size_t w_o, std::size_t h_o);

/// Copy of a feature map with every spatial position outside `spatial`
/// zeroed in all channels and samples. Throws std::out_of_range on an index
/// beyond the plane.
Tensor apply_mask(const Tensor& ofm, std::span<const std::size_t> spatial);

}  // namespace zap
