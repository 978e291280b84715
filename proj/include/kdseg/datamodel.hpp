#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kdseg/tensor.hpp"

namespace kdseg {

inline constexpr std::int32_t kDefaultIgnoreId = 255;

/// Per-pixel unnormalized class scores, shape (B, C, H, W).
/// Construction validates C >= 2, H, W >= 1 and finiteness; the value is
/// immutable afterwards.
class LogitMap {
 public:
  explicit LogitMap(Tensorf values);

  const Tensorf& values() const noexcept { return values_; }
  std::size_t batch() const noexcept { return values_.n(); }
  std::size_t class_count() const noexcept { return values_.c(); }
  std::size_t height() const noexcept { return values_.h(); }
  std::size_t width() const noexcept { return values_.w(); }

 private:
  Tensorf values_;
};

/// Per-pixel class distributions, shape (B, C, H, W). Entries lie in [0, 1]
/// and each pixel's channel sum is 1 within 1e-6.
class ProbabilityMap {
 public:
  explicit ProbabilityMap(Tensorf values);

  const Tensorf& values() const noexcept { return values_; }
  std::size_t batch() const noexcept { return values_.n(); }
  std::size_t class_count() const noexcept { return values_.c(); }
  std::size_t height() const noexcept { return values_.h(); }
  std::size_t width() const noexcept { return values_.w(); }

 private:
  Tensorf values_;
};

/// Ground-truth class ids, shape (B, H, W). Pixels equal to ignore_id are
/// unlabeled; the valid range [0, C) is checked against a LogitMap by
/// validate_batch.
class LabelMap {
 public:
  LabelMap(std::size_t batch, std::size_t height, std::size_t width,
           std::vector<std::int32_t> values, std::int32_t ignore_id = kDefaultIgnoreId);
  LabelMap(std::size_t batch, std::size_t height, std::size_t width,
           std::int32_t fill = 0, std::int32_t ignore_id = kDefaultIgnoreId);

  std::size_t batch() const noexcept { return batch_; }
  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t size() const noexcept { return values_.size(); }
  std::int32_t ignore_id() const noexcept { return ignore_id_; }
  const std::vector<std::int32_t>& values() const noexcept { return values_; }
  std::int32_t at(std::size_t b, std::size_t y, std::size_t x) const noexcept {
    return values_[(b * height_ + y) * width_ + x];
  }
  bool ignored(std::size_t i) const noexcept { return values_[i] == ignore_id_; }

  /// Nearest-neighbour resample to (height, width); src = floor(dst * in / out).
  LabelMap resized_nearest(std::size_t height, std::size_t width) const;

 private:
  std::size_t batch_;
  std::size_t height_;
  std::size_t width_;
  std::vector<std::int32_t> values_;
  std::int32_t ignore_id_;
};

/// Intermediate dense features, shape (B, D, h, w), tagged with the tap
/// point that produced them.
class FeatureMap {
 public:
  FeatureMap(Tensorf values, std::string source_layer);

  const Tensorf& values() const noexcept { return values_; }
  const std::string& source_layer() const noexcept { return source_layer_; }

 private:
  Tensorf values_;
  std::string source_layer_;
};

class Temperature {
 public:
  explicit Temperature(double tau);
  double tau() const noexcept { return tau_; }

 private:
  double tau_;
};

struct LossWeights {
  double pi = 0.0;
  double pa = 0.0;
  double ho = 0.0;
  double ifv = 0.0;

  void validate() const;
  bool any_distillation() const noexcept { return pi > 0 || pa > 0 || ho > 0 || ifv > 0; }
};

/// Temperature-scaled channel softmax, max-subtracted per pixel.
ProbabilityMap softmax(const LogitMap& logits, const Temperature& t);

/// Checks (B, H, W) agreement, label range and finiteness. Throws
/// ShapeError, LabelRangeError or NonFiniteError.
void validate_batch(const LogitMap& logits, const LabelMap& labels);

}  // namespace kdseg
