#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "kdseg/datamodel.hpp"

namespace kdseg {

namespace term {
inline constexpr const char* kCrossEntropy = "ce";
inline constexpr const char* kPixelwise = "pi";
inline constexpr const char* kPairwise = "pa";
inline constexpr const char* kHolistic = "ho";
inline constexpr const char* kIntraClassVariation = "ifv";
}  // namespace term

struct LossValue {
  std::string term;
  double value = 0.0;
};

/// A loss value together with its gradient with respect to the student-side
/// input (logits or features). Teacher inputs never receive a gradient.
struct LossWithGrad {
  LossValue loss;
  Tensorf grad;
};

struct WeightedTerm {
  LossValue loss;
  double weight = 1.0;
};

struct CompositeLossReport {
  struct Entry {
    std::string term;
    double raw = 0.0;
    double weight = 0.0;
    double weighted = 0.0;
  };

  double total = 0.0;
  std::vector<Entry> per_term;

  const Entry* find(const std::string& term) const;
};

/// Mean over non-ignored pixels of -log softmax_y(z). Throws EmptyBatchError
/// when every pixel is ignored.
LossWithGrad cross_entropy(const LogitMap& student, const LabelMap& labels);

/// Mean over pixels of -tau^2 * sum_c softmax_c(z_t/tau) log softmax_c(z_s/tau)
/// (soft cross-entropy; differs from KL by the teacher entropy only).
LossWithGrad pixelwise_distillation(const LogitMap& student, const LogitMap& teacher,
                                    const Temperature& t);

/// Squared difference of spatial cosine-affinity matrices of the
/// block-average-pooled features, averaged over batch and position pairs.
/// Channel counts may differ between student and teacher.
LossWithGrad pairwise_affinity_loss(const FeatureMap& student, const FeatureMap& teacher,
                                    std::size_t pool_factor = 2);

/// Intra-class feature variation matching. Labels are resampled (nearest) to
/// the feature resolution; per image and class the prototype is the mean
/// feature, and each pixel's variation is its cosine similarity to its class
/// prototype. Returns the mean squared student/teacher difference over
/// labeled pixels.
LossWithGrad ifv_loss(const FeatureMap& student, const FeatureMap& teacher, const LabelMap& labels);

CompositeLossReport compose(std::span<const WeightedTerm> terms);

}  // namespace kdseg
