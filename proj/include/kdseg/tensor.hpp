#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "kdseg/error.hpp"

namespace kdseg {

/// Dense NCHW array. Every activation, logit map and parameter in the
/// framework is one of these; lower-rank data uses trailing dimensions of 1.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Shape = std::array<std::size_t, 4>;

  Tensor() = default;
  Tensor(std::size_t n, std::size_t c, std::size_t h, std::size_t w, T fill = T{})
      : shape_{n, c, h, w}, data_(n * c * h * w, fill) {}
  explicit Tensor(const Shape& s, T fill = T{}) : Tensor(s[0], s[1], s[2], s[3], fill) {}

  std::size_t n() const noexcept { return shape_[0]; }
  std::size_t c() const noexcept { return shape_[1]; }
  std::size_t h() const noexcept { return shape_[2]; }
  std::size_t w() const noexcept { return shape_[3]; }
  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t plane() const noexcept { return shape_[2] * shape_[3]; }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  std::size_t index(std::size_t b, std::size_t ch, std::size_t y, std::size_t x) const noexcept {
    return ((b * shape_[1] + ch) * shape_[2] + y) * shape_[3] + x;
  }
  T& operator()(std::size_t b, std::size_t ch, std::size_t y, std::size_t x) noexcept {
    return data_[index(b, ch, y, x)];
  }
  const T& operator()(std::size_t b, std::size_t ch, std::size_t y, std::size_t x) const noexcept {
    return data_[index(b, ch, y, x)];
  }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Pointer to the (b, ch) spatial plane.
  T* plane_ptr(std::size_t b, std::size_t ch) noexcept { return data_.data() + index(b, ch, 0, 0); }
  const T* plane_ptr(std::size_t b, std::size_t ch) const noexcept {
    return data_.data() + index(b, ch, 0, 0);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T{}); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_{0, 0, 0, 0};
  std::vector<T> data_;
};

using Tensorf = Tensor<float>;

inline std::string shape_string(const std::array<std::size_t, 4>& s) {
  return "(" + std::to_string(s[0]) + "," + std::to_string(s[1]) + "," + std::to_string(s[2]) +
         "," + std::to_string(s[3]) + ")";
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

}  // namespace kdseg
