#include "kdseg/metrics.hpp"

#include <cmath>
#include <numeric>

#include <omp.h>

#include "kdseg/kernels.hpp"

namespace kdseg {
namespace {

void check_pair(const ConfusionMatrix& cm, const LabelMap& pred, const LabelMap& truth) {
  if (pred.batch() != truth.batch() || pred.height() != truth.height() || pred.width() != truth.width()) {
    throw ShapeError("accumulate: prediction and truth shapes differ");
  }
  const auto classes = static_cast<std::int32_t>(cm.classes());
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth.ignored(i)) continue;
    const std::int32_t g = truth.values()[i], p = pred.values()[i];
    if (g < 0 || g >= classes || p < 0 || p >= classes) {
      throw LabelRangeError("accumulate: class id outside [0," + std::to_string(classes) + ")");
    }
  }
}

}  // namespace

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {
  if (classes == 0) throw ValidationError("ConfusionMatrix: classes must be positive");
}

std::uint64_t ConfusionMatrix::total() const noexcept {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t truth) const noexcept {
  std::uint64_t s = 0;
  for (std::size_t p = 0; p < classes_; ++p) s += at(truth, p);
  return s;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t pred) const noexcept {
  std::uint64_t s = 0;
  for (std::size_t g = 0; g < classes_; ++g) s += at(g, pred);
  return s;
}

ConfusionMatrix& ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw ShapeError("ConfusionMatrix::merge: class count mismatch");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

ConfusionMatrix accumulate(ConfusionMatrix cm, const LabelMap& pred, const LabelMap& truth) {
  check_pair(cm, pred, truth);
  const std::size_t n = truth.size(), classes = cm.classes();
  const auto& g = truth.values();
  const auto& p = pred.values();
  const std::int32_t ignore = truth.ignore_id();
#pragma omp parallel
  {
    std::vector<std::uint64_t> local(classes * classes, 0);
#pragma omp for schedule(static) nowait
    for (std::size_t i = 0; i < n; ++i) {
      if (g[i] == ignore) continue;
      ++local[static_cast<std::size_t>(g[i]) * classes + static_cast<std::size_t>(p[i])];
    }
#pragma omp critical(kdseg_confusion_merge)
    for (std::size_t k = 0; k < local.size(); ++k) {
      cm.at(k / classes, k % classes) += local[k];
    }
  }
  return cm;
}

namespace reference {
ConfusionMatrix accumulate(ConfusionMatrix cm, const LabelMap& pred, const LabelMap& truth) {
  check_pair(cm, pred, truth);
  for (std::size_t b = 0; b < truth.batch(); ++b)
    for (std::size_t y = 0; y < truth.height(); ++y)
      for (std::size_t x = 0; x < truth.width(); ++x) {
        const std::int32_t g = truth.at(b, y, x);
        if (g == truth.ignore_id()) continue;
        ++cm.at(static_cast<std::size_t>(g), static_cast<std::size_t>(pred.at(b, y, x)));
      }
  return cm;
}
}  // namespace reference

std::vector<std::optional<double>> per_class_iou(const ConfusionMatrix& cm) {
  std::vector<std::optional<double>> out(cm.classes());
  for (std::size_t c = 0; c < cm.classes(); ++c) {
    const std::uint64_t tp = cm.at(c, c);
    const std::uint64_t denom = cm.row_sum(c) + cm.col_sum(c) - tp;
    if (denom > 0) out[c] = static_cast<double>(tp) / static_cast<double>(denom);
  }
  return out;
}

double miou(const ConfusionMatrix& cm) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& iou : per_class_iou(cm)) {
    if (!iou) continue;
    sum += *iou;
    ++n;
  }
  if (n == 0) throw EmptyBatchError("miou: no class has a nonzero denominator");
  return 100.0 * sum / static_cast<double>(n);
}

LabelMap argmax(const LogitMap& logits, std::int32_t ignore_id) {
  const Tensorf& z = logits.values();
  const std::size_t plane = z.plane();
  std::vector<std::int32_t> out(z.n() * plane);
#pragma omp parallel for schedule(static)
  for (std::size_t p = 0; p < out.size(); ++p) {
    const std::size_t b = p / plane, i = p % plane;
    const float* v = z.plane_ptr(b, 0) + i;
    std::size_t best = 0;
    for (std::size_t c = 1; c < z.c(); ++c)
      if (v[c * plane] > v[best * plane]) best = c;
    out[p] = static_cast<std::int32_t>(best);
  }
  return LabelMap(z.n(), z.h(), z.w(), std::move(out), ignore_id);
}

std::vector<double> shannon_entropy(const ProbabilityMap& p) {
  const Tensorf& v = p.values();
  const std::size_t plane = v.plane();
  std::vector<double> out(v.n() * plane);
#pragma omp parallel for schedule(static)
  for (std::size_t k = 0; k < out.size(); ++k) {
    const std::size_t b = k / plane, i = k % plane;
    const float* q = v.plane_ptr(b, 0) + i;
    double h = 0.0;
    for (std::size_t c = 0; c < v.c(); ++c) {
      const double pc = q[c * plane];
      if (pc > 0.0) h -= pc * std::log(pc);
    }
    out[k] = std::max(h, 0.0);
  }
  return out;
}

EntropyHistogram::EntropyHistogram(std::size_t classes, std::size_t bins)
    : upper_(std::log(static_cast<double>(classes))), counts_(bins, 0) {
  if (classes < 2) throw ValidationError("EntropyHistogram: classes must be >= 2");
  if (bins == 0) throw ValidationError("EntropyHistogram: bins must be positive");
}

void EntropyHistogram::add(double h) noexcept {
  const double pos = h / upper_ * static_cast<double>(counts_.size());
  std::size_t bin = pos <= 0.0 ? 0 : static_cast<std::size_t>(pos);
  if (bin >= counts_.size()) bin = counts_.size() - 1;
  ++counts_[bin];
  ++total_;
}

void EntropyHistogram::add(std::span<const double> entropies) noexcept {
  for (double h : entropies) add(h);
}

EntropyHistogram& EntropyHistogram::merge(const EntropyHistogram& other) {
  if (other.counts_.size() != counts_.size() || other.upper_ != upper_) {
    throw ValidationError("EntropyHistogram::merge: incompatible binning");
  }
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  total_ += other.total_;
  return *this;
}

double EntropyHistogram::bin_lower(std::size_t i) const noexcept {
  return upper_ * static_cast<double>(i) / static_cast<double>(counts_.size());
}

double EntropyHistogram::bin_upper(std::size_t i) const noexcept { return bin_lower(i + 1); }

std::vector<double> EntropyHistogram::shares() const {
  std::vector<double> out(counts_.size(), 0.0);
  if (total_ == 0) return out;
  for (std::size_t i = 0; i < counts_.size(); ++i) {
    out[i] = static_cast<double>(counts_[i]) / static_cast<double>(total_);
  }
  return out;
}

EntropyStats entropy_stats(const LogitMap& logits, const Temperature& t, std::size_t bins) {
  EntropyStats stats{t.tau(), shannon_entropy(softmax(logits, t)), EntropyHistogram(logits.class_count(), bins)};
  stats.histogram.add(stats.values);
  return stats;
}

void write_confusion_table(std::ostream& out, const ConfusionMatrix& cm) {
  out << "truth\\pred";
  for (std::size_t p = 0; p < cm.classes(); ++p) out << '\t' << p;
  out << '\n';
  for (std::size_t g = 0; g < cm.classes(); ++g) {
    out << g;
    for (std::size_t p = 0; p < cm.classes(); ++p) out << '\t' << cm.at(g, p);
    out << '\n';
  }
}

void write_entropy_table(std::ostream& out, const EntropyStats& stats) {
  const auto& h = stats.histogram;
  const auto shares = h.shares();
  out << "temperature\tbin\tlower\tupper\tcount\tshare\n";
  for (std::size_t i = 0; i < h.bins(); ++i) {
    out << stats.temperature << '\t' << i << '\t' << h.bin_lower(i) << '\t' << h.bin_upper(i) << '\t'
        << h.counts()[i] << '\t' << shares[i] << '\n';
  }
}

}  // namespace kdseg
