#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace zap {

/// Raised when operand shapes do not fit an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

/// Dense row-major float tensor of rank 1..4.
///
/// Feature maps are stored channels x height x width, with an optional
/// leading batch extent. A default-constructed tensor is empty (rank 0) and
/// only valid as a placeholder.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor scalar(float value) { return Tensor({1}, value); }
  static Tensor like(const Tensor& other, float fill = 0.0f) { return Tensor(other.shape_, fill); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  float* raw() noexcept { return data_.data(); }
  const float* raw() const noexcept { return data_.data(); }
  std::vector<float>& vec() noexcept { return data_; }
  const std::vector<float>& vec() const noexcept { return data_; }

  float& operator[](std::size_t i) noexcept { return data_[i]; }
  float operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Element of a rank-3 (C,H,W) tensor.
  float& at(std::size_t c, std::size_t y, std::size_t x);
  float at(std::size_t c, std::size_t y, std::size_t x) const;

  /// Same data viewed under a new shape with the same element count.
  Tensor reshaped(Shape shape) const;

  void fill(float value);

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  void validate() const;

  Shape shape_;
  std::vector<float> data_;
};

/// Batch/channel/spatial extents of a rank-3 or rank-4 feature map.
struct FeatureDims {
  std::size_t n = 1;
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  std::size_t plane() const noexcept { return h * w; }
  std::size_t sample() const noexcept { return c * h * w; }
};

/// Throws ShapeError unless the tensor is a rank-3 or rank-4 feature map.
FeatureDims feature_dims(const Tensor& t, const char* what = "feature map");

/// Shape with the same batch layout as `like` but new c/h/w.
Shape feature_shape(const Tensor& like, std::size_t c, std::size_t h, std::size_t w);

/// Largest |a-b| / max(|a|,|b|,floor) over all elements.
double max_relative_error(const Tensor& a, const Tensor& b, double floor = 1e-6);

}  // namespace zap
