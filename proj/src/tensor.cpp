#include "zap/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace zap {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return shape.empty() ? 0 : n;
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
  validate();
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  validate();
  if (data_.size() != shape_size(shape_)) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     to_string(shape_));
  }
}

void Tensor::validate() const {
  if (shape_.empty() || shape_.size() > 4) {
    throw ShapeError("tensor rank must be 1..4, got shape " + to_string(shape_));
  }
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor extents must be >= 1, got " + to_string(shape_));
  }
}

float& Tensor::at(std::size_t c, std::size_t y, std::size_t x) {
  return data_[(c * shape_[1] + y) * shape_[2] + x];
}

float Tensor::at(std::size_t c, std::size_t y, std::size_t x) const {
  return data_[(c * shape_[1] + y) * shape_[2] + x];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

FeatureDims feature_dims(const Tensor& t, const char* what) {
  const auto& s = t.shape();
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
  throw ShapeError(std::string(what) + " must be rank 3 (CxHxW) or rank 4 (NxCxHxW), got " + to_string(s));
}

Shape feature_shape(const Tensor& like, std::size_t c, std::size_t h, std::size_t w) {
  if (like.rank() == 4) return {like.dim(0), c, h, w};
  return {c, h, w};
}

double max_relative_error(const Tensor& a, const Tensor& b, double floor) {
  if (a.shape() != b.shape()) {
    throw ShapeError("cannot compare " + to_string(a.shape()) + " with " + to_string(b.shape()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i], y = b[i];
    const double scale = std::max({std::abs(x), std::abs(y), floor});
    worst = std::max(worst, std::abs(x - y) / scale);
  }
  return worst;
}

}  // namespace zap
