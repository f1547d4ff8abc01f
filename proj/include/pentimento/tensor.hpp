#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"

namespace pentimento {

/// Extents of a rank-4 (batch, channel, height, width) tensor.
struct Dims {
  std::size_t n = 0, c = 0, h = 0, w = 0;

  constexpr std::size_t count() const noexcept { return n * c * h * w; }
  constexpr std::size_t plane() const noexcept { return h * w; }
  friend constexpr bool operator==(const Dims&, const Dims&) = default;

  std::string str() const {
    return "(" + std::to_string(n) + ", " + std::to_string(c) + ", " + std::to_string(h) + ", " +
           std::to_string(w) + ")";
  }
};

/// Dense rank-4 array, row-major in (n, c, h, w) order.
///
/// The library works in single precision (`Tensor`); the double instantiation
/// exists so gradient checks can evaluate finite differences without float
/// round-off swamping the step.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Dims dims, T fill = T(0)) : dims_(dims), data_(dims.count(), fill) {}
  BasicTensor(Dims dims, std::vector<T> data) : dims_(dims), data_(std::move(data)) {
    if (data_.size() != dims_.count())
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match dims " + dims_.str());
  }

  const Dims& dims() const noexcept { return dims_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  std::size_t index(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const noexcept {
    return ((n * dims_.c + c) * dims_.h + y) * dims_.w + x;
  }
  T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) noexcept {
    return data_[index(n, c, y, x)];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const noexcept {
    return data_[index(n, c, y, x)];
  }

  /// One (h, w) plane.
  std::span<T> plane(std::size_t n, std::size_t c) noexcept {
    return std::span<T>(data_).subspan(index(n, c, 0, 0), dims_.plane());
  }
  std::span<const T> plane(std::size_t n, std::size_t c) const noexcept {
    return std::span<const T>(data_).subspan(index(n, c, 0, 0), dims_.plane());
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  BasicTensor<U> cast() const {
    return BasicTensor<U>(dims_, std::vector<U>(data_.begin(), data_.end()));
  }

  BasicTensor& operator+=(const BasicTensor& other) {
    require_same_dims(other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  BasicTensor& operator*=(T scale) noexcept {
    for (auto& v : data_) v *= scale;
    return *this;
  }

  void require_same_dims(const BasicTensor& other, const char* op) const {
    if (dims_ != other.dims_)
      throw ShapeError(std::string(op) + ": dims " + dims_.str() + " vs " + other.dims_.str());
  }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  Dims dims_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

/// Sum of elementwise products, accumulated in double.
template <typename T>
double dot(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  a.require_same_dims(b, "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += double(a[i]) * double(b[i]);
  return acc;
}

inline void require_finite(const auto& tensor, const char* op) {
  if (!tensor.all_finite()) throw NumericError(std::string(op) + ": non-finite input");
}

}  // namespace pentimento
