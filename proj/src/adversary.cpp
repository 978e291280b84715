#include "kdseg/adversary.hpp"

#include <cmath>
#include <string>

namespace kdseg {

template <typename T>
Discriminator<T>::Discriminator(std::size_t image_channels, std::size_t class_count, std::uint64_t seed,
                                bool zero_head, std::array<std::size_t, kBlocks> widths)
    : image_channels_(image_channels), class_count_(class_count) {
  std::mt19937_64 rng(seed);
  std::size_t in = image_channels + class_count;
  for (std::size_t i = 0; i < kBlocks; ++i) {
    convs_[i] = nn::Conv2d<T>("discriminator.block" + std::to_string(i), in, widths[i],
                              ConvGeometry{3, 2, 1, 1});
    convs_[i].init_he(rng);
    in = widths[i];
  }
  head_weight_ = nn::Parameter<T>("discriminator.head.weight", Tensor<T>(1, in, 1, 1));
  head_bias_ = nn::Parameter<T>("discriminator.head.bias", Tensor<T>(1, 1, 1, 1));
  if (!zero_head) {
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
    for (auto& w : head_weight_.value.storage()) w = static_cast<T>(dist(rng));
  }
}

template <typename T>
std::vector<T> Discriminator<T>::forward(const Tensor<T>& probs, const Tensor<T>& image, bool keep) {
  if (probs.n() != image.n() || probs.h() != image.h() || probs.w() != image.w()) {
    throw ShapeError("discriminator: segmentation " + shape_string(probs.shape()) +
                     " not aligned with image " + shape_string(image.shape()));
  }
  if (probs.c() != class_count_ || image.c() != image_channels_) {
    throw ShapeError("discriminator: unexpected channel counts");
  }
  Tensor<T> x = nn::concat_channels<T>({&image, &probs});
  for (std::size_t i = 0; i < kBlocks; ++i) {
    x = acts_[i].forward(convs_[i].forward(x, keep), keep);
  }
  last_spatial_ = {x.h(), x.w()};
  const std::size_t width = x.c(), plane = x.plane();
  Tensor<T> pooled(x.n(), width, 1, 1);
  std::vector<T> scores(x.n());
  for (std::size_t b = 0; b < x.n(); ++b) {
    double score = head_bias_.value[0];
    for (std::size_t c = 0; c < width; ++c) {
      const T* p = x.plane_ptr(b, c);
      double acc = 0;
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      pooled(b, c, 0, 0) = static_cast<T>(acc / static_cast<double>(plane));
      score += static_cast<double>(head_weight_.value[c]) * pooled(b, c, 0, 0);
    }
    scores[b] = static_cast<T>(score);
  }
  if (keep) pooled_ = std::move(pooled);
  return scores;
}

template <typename T>
Tensor<T> Discriminator<T>::backward(const std::vector<T>& dscore, bool accumulate_params) {
  const std::size_t batch = pooled_.n(), width = pooled_.c();
  if (dscore.size() != batch) throw ShapeError("discriminator backward: score gradient size mismatch");
  const auto [h, w] = last_spatial_;
  const double inv_plane = 1.0 / static_cast<double>(h * w);
  Tensor<T> dx(batch, width, h, w);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < width; ++c) {
      const T g = static_cast<T>(dscore[b] * head_weight_.value[c] * inv_plane);
      T* p = dx.plane_ptr(b, c);
      for (std::size_t i = 0; i < h * w; ++i) p[i] = g;
      if (accumulate_params) head_weight_.grad[c] += dscore[b] * pooled_(b, c, 0, 0);
    }
    if (accumulate_params) head_bias_.grad[0] += dscore[b];
  }
  for (std::size_t i = kBlocks; i-- > 0;) {
    dx = convs_[i].backward(acts_[i].backward(dx), accumulate_params);
  }
  auto parts = nn::split_channels(dx, {image_channels_, class_count_});
  return std::move(parts[1]);
}

template <typename T>
nn::ParamRefs<T> Discriminator<T>::parameters() {
  nn::ParamRefs<T> out;
  for (auto& c : convs_) c.collect(out);
  out.push_back(&head_weight_);
  out.push_back(&head_bias_);
  return out;
}

template <typename T>
HolisticResult<T> holistic_student_loss(Discriminator<T>& critic, const Tensor<T>& student_probs,
                                        const Tensor<T>& image) {
  HolisticResult<T> out;
  out.scores = critic.forward(student_probs, image, true);
  const double batch = static_cast<double>(out.scores.size());
  std::vector<T> dscore(out.scores.size());
  for (std::size_t b = 0; b < out.scores.size(); ++b) {
    const double r = static_cast<double>(out.scores[b]) - 1.0;
    out.value += r * r / batch;
    dscore[b] = static_cast<T>(2.0 * r / batch);
  }
  out.dprobs = critic.backward(dscore, /*accumulate_params=*/false);
  return out;
}

LossWithGrad holistic_student_loss(Discriminator<float>& critic, const ProbabilityMap& student,
                                   const Tensorf& image) {
  auto r = holistic_student_loss<float>(critic, student.values(), image);
  return {{term::kHolistic, r.value}, std::move(r.dprobs)};
}

AdversarialState::AdversarialState(Discriminator<float> c, double lr, double m, std::size_t ratio)
    : critic(std::move(c)), learning_rate(lr), momentum(m), update_ratio(ratio) {
  if (update_ratio < 1) throw ValidationError("update_ratio must be >= 1");
  for (auto* p : critic.parameters()) velocity.emplace_back(p->value.shape());
}

LossValue discriminator_step(AdversarialState& state, const ProbabilityMap& student,
                             const ProbabilityMap& teacher, const Tensorf& image) {
  auto params = state.critic.parameters();
  nn::zero_grads(params);
  const double batch = static_cast<double>(image.n());
  double loss = 0.0;

  auto run = [&](const Tensorf& probs, double target) {
    const auto scores = state.critic.forward(probs, image, true);
    std::vector<float> dscore(scores.size());
    for (std::size_t b = 0; b < scores.size(); ++b) {
      const double r = scores[b] - target;
      loss += r * r / batch;
      dscore[b] = static_cast<float>(2.0 * r / batch);
    }
    state.critic.backward(dscore, /*accumulate_params=*/true);
  };
  run(teacher.values(), 1.0);
  run(student.values(), 0.0);

  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& v = state.velocity[k].storage();
    auto& w = params[k]->value.storage();
    const auto& g = params[k]->grad.storage();
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = static_cast<float>(state.momentum * v[i] + g[i]);
      w[i] -= static_cast<float>(state.learning_rate * v[i]);
    }
  }
  return {"discriminator", loss};
}

template class Discriminator<float>;
template class Discriminator<double>;
template HolisticResult<float> holistic_student_loss(Discriminator<float>&, const Tensor<float>&,
                                                     const Tensor<float>&);
template HolisticResult<double> holistic_student_loss(Discriminator<double>&, const Tensor<double>&,
                                                      const Tensor<double>&);

}  // namespace kdseg
