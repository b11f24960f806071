#include "flowdiff/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace flowdiff {

namespace {

std::int64_t checked_numel(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative dimension in tensor shape");
    n *= d;
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::int64_t> shape)
    : shape_(std::move(shape)), numel_(checked_numel(shape_)) {
  data_.assign(static_cast<std::size_t>(numel_), 0.0);
}

Tensor Tensor::full(std::vector<std::int64_t> shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Tensor Tensor::from_vector(std::vector<std::int64_t> shape, std::vector<double> data) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.numel_ = checked_numel(t.shape_);
  if (static_cast<std::int64_t>(data.size()) != t.numel_) {
    throw ShapeError("from_vector: data size " + std::to_string(data.size()) +
                     " does not match shape product " + std::to_string(t.numel_));
  }
  t.data_ = std::move(data);
  return t;
}

Tensor Tensor::scalar(double value) {
  Tensor t{std::vector<std::int64_t>{}};
  t.data_[0] = value;
  return t;
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::reshaped(std::vector<std::int64_t> shape) const {
  if (checked_numel(shape) != numel_) {
    throw ShapeError("reshape: element count mismatch for " + shape_str());
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.numel_ = numel_;
  t.data_ = data_;
  return t;
}

Tensor& Tensor::operator+=(const Tensor& other) {
  require_same_shape(*this, other, "operator+=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
  require_same_shape(*this, other, "operator-=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

double Tensor::sum() const {
  double acc = 0.0;
  for (double v : data_) acc += v;
  return acc;
}

double Tensor::dot(const Tensor& other) const {
  require_same_shape(*this, other, "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < data_.size(); ++i) acc += data_[i] * other.data_[i];
  return acc;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << ", ";
    os << shape_[i];
  }
  os << ')';
  return os.str();
}

void require_same_shape(const Tensor& a, const Tensor& b, const std::string& what) {
  if (!a.same_shape(b)) {
    throw ShapeError(what + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  }
}

void require_rank(const Tensor& t, int rank, const std::string& what) {
  if (t.rank() != rank) {
    throw ShapeError(what + ": expected rank " + std::to_string(rank) + ", got " +
                     t.shape_str());
  }
}

}  // namespace flowdiff
