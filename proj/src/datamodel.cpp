#include "kdseg/datamodel.hpp"

#include <cmath>

#include "kdseg/kernels.hpp"

namespace kdseg {
namespace {

void require_finite(const Tensorf& t, const char* what) {
  for (float v : t.span()) {
    if (!std::isfinite(v)) throw NonFiniteError(std::string(what) + ": non-finite entry");
  }
}

}  // namespace

LogitMap::LogitMap(Tensorf values) : values_(std::move(values)) {
  if (values_.c() < 2) throw ShapeError("LogitMap: class count must be >= 2");
  if (values_.n() < 1 || values_.h() < 1 || values_.w() < 1) {
    throw ShapeError("LogitMap: empty shape " + shape_string(values_.shape()));
  }
  require_finite(values_, "LogitMap");
}

ProbabilityMap::ProbabilityMap(Tensorf values) : values_(std::move(values)) {
  const std::size_t plane = values_.plane();
  for (std::size_t b = 0; b < values_.n(); ++b) {
    for (std::size_t i = 0; i < plane; ++i) {
      double sum = 0;
      for (std::size_t c = 0; c < values_.c(); ++c) {
        const float p = values_.plane_ptr(b, c)[i];
        if (!(p >= 0.0f && p <= 1.0f)) throw ValidationError("ProbabilityMap: entry outside [0, 1]");
        sum += p;
      }
      if (std::abs(sum - 1.0) > 1e-6) throw ValidationError("ProbabilityMap: channel sum differs from 1");
    }
  }
}

LabelMap::LabelMap(std::size_t batch, std::size_t height, std::size_t width,
                   std::vector<std::int32_t> values, std::int32_t ignore_id)
    : batch_(batch), height_(height), width_(width), values_(std::move(values)), ignore_id_(ignore_id) {
  if (values_.size() != batch * height * width) throw ShapeError("LabelMap: value count does not match shape");
}

LabelMap::LabelMap(std::size_t batch, std::size_t height, std::size_t width, std::int32_t fill,
                   std::int32_t ignore_id)
    : LabelMap(batch, height, width, std::vector<std::int32_t>(batch * height * width, fill), ignore_id) {}

LabelMap LabelMap::resized_nearest(std::size_t height, std::size_t width) const {
  std::vector<std::int32_t> out(batch_ * height * width);
  for (std::size_t b = 0; b < batch_; ++b)
    for (std::size_t y = 0; y < height; ++y) {
      const std::size_t sy = y * height_ / height;
      for (std::size_t x = 0; x < width; ++x) {
        out[(b * height + y) * width + x] = at(b, sy, x * width_ / width);
      }
    }
  return LabelMap(batch_, height, width, std::move(out), ignore_id_);
}

FeatureMap::FeatureMap(Tensorf values, std::string source_layer)
    : values_(std::move(values)), source_layer_(std::move(source_layer)) {
  require_finite(values_, "FeatureMap");
}

Temperature::Temperature(double tau) : tau_(tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ValidationError("temperature must be positive");
}

void LossWeights::validate() const {
  for (double w : {pi, pa, ho, ifv}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ValidationError("loss weights must be finite and >= 0");
  }
}

ProbabilityMap softmax(const LogitMap& logits, const Temperature& t) {
  Tensorf out;
  kernels::softmax_channels(logits.values(), t.tau(), out);
  return ProbabilityMap(std::move(out));
}

void validate_batch(const LogitMap& logits, const LabelMap& labels) {
  if (logits.batch() != labels.batch() || logits.height() != labels.height() ||
      logits.width() != labels.width()) {
    throw ShapeError("validate_batch: logits " + shape_string(logits.values().shape()) + " vs labels (" +
                     std::to_string(labels.batch()) + "," + std::to_string(labels.height()) + "," +
                     std::to_string(labels.width()) + ")");
  }
  const auto classes = static_cast<std::int32_t>(logits.class_count());
  for (std::int32_t v : labels.values()) {
    if (v != labels.ignore_id() && (v < 0 || v >= classes)) {
      throw LabelRangeError("validate_batch: label " + std::to_string(v) + " outside [0," +
                            std::to_string(classes) + ") and not ignore id " +
                            std::to_string(labels.ignore_id()));
    }
  }
  require_finite(logits.values(), "validate_batch");
}

}  // namespace kdseg
