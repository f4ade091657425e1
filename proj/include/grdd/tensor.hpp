#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "grdd/errors.hpp"

namespace grdd {

// Dense row-major array of doubles. Image batches are laid out
// [batch, height, width, channels]; matrices are [rows, cols].
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> values)
      : shape_(std::move(shape)), data_(std::move(values)) {
    if (data_.size() != element_count(shape_)) {
      throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  // Contiguous view of slice `i` along the leading axis.
  std::span<double> row(std::size_t i) {
    const std::size_t stride = data_.size() / shape_[0];
    return {data_.data() + i * stride, stride};
  }
  std::span<const double> row(std::size_t i) const {
    const std::size_t stride = data_.size() / shape_[0];
    return {data_.data() + i * stride, stride};
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(std::vector<std::size_t> shape) const {
    if (element_count(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

  static std::size_t element_count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

  static std::string shape_string(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

// Concatenates along the leading axis; trailing shapes must match.
inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.rank() == 0) return b;
  if (b.rank() == 0) return a;
  std::vector<std::size_t> tail_a(a.shape().begin() + 1, a.shape().end());
  std::vector<std::size_t> tail_b(b.shape().begin() + 1, b.shape().end());
  if (tail_a != tail_b) {
    throw ShapeError("cannot concatenate " + Tensor::shape_string(a.shape()) + " and " +
                     Tensor::shape_string(b.shape()));
  }
  std::vector<std::size_t> shape = a.shape();
  shape[0] += b.dim(0);
  std::vector<double> values(a.values().begin(), a.values().end());
  values.insert(values.end(), b.values().begin(), b.values().end());
  return Tensor(std::move(shape), std::move(values));
}

// Rows [begin, end) along the leading axis.
inline Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> shape = t.shape();
  const std::size_t stride = t.size() / shape[0];
  shape[0] = end - begin;
  std::vector<double> values(t.data() + begin * stride, t.data() + end * stride);
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace grdd
