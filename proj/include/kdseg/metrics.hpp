#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "kdseg/datamodel.hpp"

namespace kdseg {

/// counts[g][p] = number of scored pixels with ground truth g predicted as p.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes);

  std::size_t classes() const noexcept { return classes_; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const noexcept { return counts_[truth * classes_ + pred]; }
  std::uint64_t& at(std::size_t truth, std::size_t pred) noexcept { return counts_[truth * classes_ + pred]; }
  std::uint64_t total() const noexcept;
  std::uint64_t row_sum(std::size_t truth) const noexcept;
  std::uint64_t col_sum(std::size_t pred) const noexcept;
  const std::vector<std::uint64_t>& counts() const noexcept { return counts_; }

  /// Elementwise sum; the only cross-worker interaction.
  ConfusionMatrix& merge(const ConfusionMatrix& other);

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

/// Adds every pixel whose truth is not ignore_id. Throws ShapeError on
/// mismatched maps and LabelRangeError on ids outside [0, C).
ConfusionMatrix accumulate(ConfusionMatrix cm, const LabelMap& pred, const LabelMap& truth);

/// Per-class IoU; nullopt for classes absent from both truth and prediction.
std::vector<std::optional<double>> per_class_iou(const ConfusionMatrix& cm);

/// Mean IoU in percent over classes with a nonzero denominator. Throws
/// EmptyBatchError when no class qualifies.
double miou(const ConfusionMatrix& cm);

/// Per-pixel argmax over classes.
LabelMap argmax(const LogitMap& logits, std::int32_t ignore_id = kDefaultIgnoreId);

/// Per-pixel Shannon entropy in nats (0 ln 0 := 0), laid out (B, H, W).
std::vector<double> shannon_entropy(const ProbabilityMap& p);

/// Fixed-bin histogram of entropies on [0, ln C]; values at the top edge go
/// into the last bin. Counts are exact integers.
class EntropyHistogram {
 public:
  EntropyHistogram(std::size_t classes, std::size_t bins = 64);

  void add(double entropy) noexcept;
  void add(std::span<const double> entropies) noexcept;
  EntropyHistogram& merge(const EntropyHistogram& other);

  std::size_t bins() const noexcept { return counts_.size(); }
  double upper() const noexcept { return upper_; }
  double bin_lower(std::size_t i) const noexcept;
  double bin_upper(std::size_t i) const noexcept;
  const std::vector<std::uint64_t>& counts() const noexcept { return counts_; }
  std::uint64_t total() const noexcept { return total_; }
  std::vector<double> shares() const;

  bool operator==(const EntropyHistogram&) const = default;

 private:
  double upper_;
  std::vector<std::uint64_t> counts_;
  std::uint64_t total_ = 0;
};

struct EntropyStats {
  double temperature = 1.0;
  std::vector<double> values;
  EntropyHistogram histogram;
};

EntropyStats entropy_stats(const LogitMap& logits, const Temperature& t, std::size_t bins = 64);

/// Tab-separated dumps.
void write_confusion_table(std::ostream& out, const ConfusionMatrix& cm);
void write_entropy_table(std::ostream& out, const EntropyStats& stats);

namespace reference {
ConfusionMatrix accumulate(ConfusionMatrix cm, const LabelMap& pred, const LabelMap& truth);
}

}  // namespace kdseg
