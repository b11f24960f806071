#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "flowdiff/errors.hpp"

namespace flowdiff {

// Dense row-major tensor of doubles. Rank is dynamic (0..8). Image batches
// use the (B, C, H, W) convention throughout the library.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> shape);
  Tensor(std::initializer_list<std::int64_t> shape)
      : Tensor(std::vector<std::int64_t>(shape)) {}

  static Tensor full(std::vector<std::int64_t> shape, double value);
  static Tensor zeros(std::vector<std::int64_t> shape) { return full(std::move(shape), 0.0); }
  static Tensor from_vector(std::vector<std::int64_t> shape, std::vector<double> data);
  static Tensor scalar(double value);

  const std::vector<std::int64_t>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::int64_t numel() const { return numel_; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // (B, C, H, W) accessors; valid only for rank-4 tensors.
  double& at4(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data_[static_cast<std::size_t>(((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  double at4(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data_[static_cast<std::size_t>(((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  Tensor reshaped(std::vector<std::int64_t> shape) const;

  Tensor& operator+=(const Tensor& other);
  Tensor& operator-=(const Tensor& other);
  Tensor& operator*=(double s);

  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
  friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
  friend Tensor operator*(Tensor a, double s) { return a *= s; }
  friend Tensor operator*(double s, Tensor a) { return a *= s; }

  double sum() const;
  double dot(const Tensor& other) const;
  double squared_norm() const { return dot(*this); }

  std::string shape_str() const;

 private:
  std::vector<std::int64_t> shape_;
  std::int64_t numel_ = 0;
  std::vector<double> data_;
};

// Throws ShapeError unless the two shapes match. `what` names the operation.
void require_same_shape(const Tensor& a, const Tensor& b, const std::string& what);
// Throws ShapeError unless t has the given rank.
void require_rank(const Tensor& t, int rank, const std::string& what);

}  // namespace flowdiff
