#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pcar {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major tensor. Network activations use the N x C x T x H x W
/// layout throughout; 2D inputs are carried with T = 1.
template <typename Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real(0))
      : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {
    for (int d : shape_) {
      if (d < 0) throw std::invalid_argument("negative tensor dimension in " + shape_str(shape_));
    }
  }
  Tensor(Shape shape, std::vector<Real> values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_)) {
      throw std::invalid_argument("tensor data size does not match shape " + shape_str(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }
  std::span<Real> values() { return data_; }
  std::span<const Real> values() const { return data_; }
  Real& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const Real& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  /// Element access for rank-5 tensors.
  Real& at(int n, int c, int t, int h, int w) { return data_[index(n, c, t, h, w)]; }
  const Real& at(int n, int c, int t, int h, int w) const { return data_[index(n, c, t, h, w)]; }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(Real(0)); }

  void reshape(Shape shape) {
    if (shape_numel(shape) != numel()) {
      throw std::invalid_argument("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    shape_ = std::move(shape);
  }

  Tensor reshaped(Shape shape) const {
    Tensor out = *this;
    out.reshape(std::move(shape));
    return out;
  }

  template <typename Other>
  Tensor<Other> cast() const {
    std::vector<Other> v(data_.begin(), data_.end());
    return Tensor<Other>(shape_, std::move(v));
  }

  Tensor& operator+=(const Tensor& other) {
    check_same(other);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  Tensor& operator*=(Real s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  bool operator==(const Tensor& other) const = default;

 private:
  std::size_t index(int n, int c, int t, int h, int w) const {
    return static_cast<std::size_t>(
        (((static_cast<std::int64_t>(n) * shape_[1] + c) * shape_[2] + t) * shape_[3] + h) * shape_[4] + w);
  }

  void check_same(const Tensor& other) const {
    if (other.shape_ != shape_) {
      throw std::invalid_argument("shape mismatch " + shape_str(shape_) + " vs " + shape_str(other.shape_));
    }
  }

  Shape shape_;
  std::vector<Real> data_;
};

}  // namespace pcar
