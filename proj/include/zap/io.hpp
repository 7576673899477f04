#pragma once

// On-disk formats. Everything is little-endian; reals are IEEE-754 binary32.
//
// Weight container (.zapw):
//   "ZAPW"  u32 version(=1)  u32 entry_count
//   per entry: u32 name_len, name bytes (UTF-8), u32 dtype (0 = f32),
//              u32 rank, u32 extents[rank], f32 payload[product(extents)]
//
// Image set (.tis):
//   "ZTIS"  u32 version(=1)  u32 n  u32 c  u32 h  u32 w  u32 classes
//   u8 images[n*c*h*w] (sample-major, CxHxW)  u8 labels[n]

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "zap/tensor.hpp"

namespace zap {

/// Malformed or truncated file. offset() is the byte position of the fault.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

inline constexpr std::uint32_t kWeightFormatVersion = 1;
inline constexpr std::uint32_t kImageSetFormatVersion = 1;

struct WeightEntry {
  std::string name;
  Tensor tensor;
};

/// Named tensors in insertion order; names are unique.
class WeightContainer {
 public:
  /// Throws std::invalid_argument on a duplicate name.
  void add(std::string name, Tensor tensor);
  /// Replaces an existing entry or appends a new one.
  void set(std::string name, Tensor tensor);
  const Tensor* find(std::string_view name) const;
  const std::vector<WeightEntry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  std::vector<std::uint8_t> serialize() const;
  static WeightContainer deserialize(std::span<const std::uint8_t> bytes);

  void save(const std::string& path) const;
  static WeightContainer load(const std::string& path);

 private:
  std::vector<WeightEntry> entries_;
};

/// Small labeled image set. Pixels are u8, sample-major CxHxW.
struct TinyImageSet {
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t classes = 0;
  std::vector<std::uint8_t> images;
  std::vector<std::uint8_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t sample_size() const noexcept { return channels * height * width; }

  /// Throws std::invalid_argument when labels or pixel counts are inconsistent.
  void validate() const;

  /// Samples [first, first+count) as a float batch [count, C, H, W], scaled
  /// to [-1, 1].
  Tensor batch(std::size_t first, std::size_t count) const;
  /// Samples at the given indices.
  Tensor gather(std::span<const std::size_t> indices) const;

  TinyImageSet slice(std::size_t first, std::size_t count) const;

  std::vector<std::uint8_t> serialize() const;
  static TinyImageSet deserialize(std::span<const std::uint8_t> bytes);
  void save(const std::string& path) const;
  static TinyImageSet load(const std::string& path);
};

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);

}  // namespace zap
