#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flareon/error.hpp"

namespace flareon {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_volume(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major float tensor. Owns its storage; copies are deep.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, float fill = 0.0f)
      : shape_(std::move(shape)), data_(shape_volume(shape_), fill) {}

  Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    expect(data_.size() == shape_volume(shape_), "Tensor: data length ", data_.size(),
           " does not match shape ", shape_string(shape_));
  }

  Tensor(std::initializer_list<std::size_t> shape, float fill = 0.0f) : Tensor(Shape(shape), fill) {}

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const {
    expect(axis < shape_.size(), "Tensor::dim: axis ", axis, " out of range for rank ", shape_.size());
    return shape_[axis];
  }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }
  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }
  std::vector<float>& storage() noexcept { return data_; }
  const std::vector<float>& storage() const noexcept { return data_; }

  float& operator[](std::size_t i) noexcept { return data_[i]; }
  float operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Element access for rank-4 N x C x H x W tensors.
  float& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  float at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  /// View of the i-th slice along axis 0.
  std::span<float> slice(std::size_t i) {
    const std::size_t stride = size() / shape_.at(0);
    return std::span<float>(data_).subspan(i * stride, stride);
  }
  std::span<const float> slice(std::size_t i) const {
    const std::size_t stride = size() / shape_.at(0);
    return std::span<const float>(data_).subspan(i * stride, stride);
  }

  void reshape(Shape shape) {
    expect(shape_volume(shape) == data_.size(), "Tensor::reshape: ", shape_string(shape_), " -> ",
           shape_string(shape), " changes volume");
    shape_ = std::move(shape);
  }

  void fill(float v) noexcept { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<float> data_;
};

inline void expect_shape(const Tensor& t, const Shape& shape, const char* what) {
  expect(t.shape() == shape, what, ": expected shape ", shape_string(shape), ", got ", shape_string(t.shape()));
}

inline void expect_rank(const Tensor& t, std::size_t rank, const char* what) {
  expect(t.rank() == rank, what, ": expected rank ", rank, ", got shape ", shape_string(t.shape()));
}

/// Sum of squares accumulated in double.
inline double squared_norm(std::span<const float> v) noexcept {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * x;
  return s;
}

}  // namespace flareon
