#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "kdseg/datamodel.hpp"
#include "kdseg/losses.hpp"
#include "kdseg/nn.hpp"

namespace kdseg {

/// Conditional critic for the holistic term: four stride-2 3x3 conv blocks
/// with GELU, global average pooling and a linear head. Input is
/// the channel concatenation of the conditioning image and a segmentation
/// probability map. One scalar score per batch element.
template <typename T>
class Discriminator {
 public:
  static constexpr std::size_t kBlocks = 4;

  Discriminator(std::size_t image_channels, std::size_t class_count, std::uint64_t seed,
                bool zero_head = false, std::array<std::size_t, kBlocks> widths = {16, 32, 32, 64});

  /// Scores for (image, probs); shapes (B,3,H,W) and (B,C,H,W).
  std::vector<T> forward(const Tensor<T>& probs, const Tensor<T>& image, bool keep = true);

  /// Backward from d(score_b) to d(probs). Parameter gradients are
  /// accumulated only when `accumulate_params` is set.
  Tensor<T> backward(const std::vector<T>& dscore, bool accumulate_params);

  nn::ParamRefs<T> parameters();
  std::size_t class_count() const noexcept { return class_count_; }
  std::size_t image_channels() const noexcept { return image_channels_; }

 private:
  std::size_t image_channels_;
  std::size_t class_count_;
  std::array<nn::Conv2d<T>, kBlocks> convs_;
  std::array<nn::Gelu<T>, kBlocks> acts_;
  nn::Parameter<T> head_weight_;
  nn::Parameter<T> head_bias_;
  Tensor<T> pooled_;
  std::array<std::size_t, 2> last_spatial_{0, 0};
};

/// Least-squares generator objective mean_b (D(student_b) - 1)^2 with its
/// gradient with respect to the student probabilities. Discriminator
/// parameters are left untouched.
template <typename T>
struct HolisticResult {
  double value = 0.0;
  Tensor<T> dprobs;
  std::vector<T> scores;
};

template <typename T>
HolisticResult<T> holistic_student_loss(Discriminator<T>& critic, const Tensor<T>& student_probs,
                                        const Tensor<T>& image);

LossWithGrad holistic_student_loss(Discriminator<float>& critic, const ProbabilityMap& student,
                                   const Tensorf& image);

/// Momentum SGD state for the critic; learning rate fixed.
struct AdversarialState {
  AdversarialState(Discriminator<float> critic, double learning_rate = 1e-4, double momentum = 0.9,
                   std::size_t update_ratio = 1);

  Discriminator<float> critic;
  double learning_rate;
  double momentum;
  std::size_t update_ratio;
  std::vector<Tensorf> velocity;
};

/// One optimizer step on the critic minimising
/// mean_b[(D(teacher_b) - 1)^2 + D(student_b)^2]. Inputs are treated as
/// constants. Returns the loss evaluated before the step.
LossValue discriminator_step(AdversarialState& state, const ProbabilityMap& student,
                             const ProbabilityMap& teacher, const Tensorf& image);

}  // namespace kdseg
