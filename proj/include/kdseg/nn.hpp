#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "kdseg/kernels.hpp"

namespace kdseg::nn {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
};

template <typename T>
using ParamRefs = std::vector<Parameter<T>*>;

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, std::size_t in_channels, std::size_t out_channels, ConvGeometry geometry,
         bool with_bias = true);

  /// He-normal weights (gain for ReLU), zero bias.
  void init_he(std::mt19937_64& rng, double negative_slope = 0.0);
  void init_zero();

  Tensor<T> forward(const Tensor<T>& input, bool keep_input = true);
  /// Accumulates parameter gradients unless `accumulate_params` is false;
  /// returns the input gradient (empty when `input_grad` is false).
  Tensor<T> backward(const Tensor<T>& dout, bool accumulate_params = true, bool input_grad = true);

  void collect(ParamRefs<T>& out) {
    out.push_back(&weight_);
    if (with_bias_) out.push_back(&bias_);
  }
  std::size_t in_channels() const noexcept { return weight_.value.c(); }
  std::size_t out_channels() const noexcept { return weight_.value.n(); }
  const ConvGeometry& geometry() const noexcept { return geometry_; }

 private:
  Parameter<T> weight_;
  Parameter<T> bias_;
  ConvGeometry geometry_;
  bool with_bias_ = true;
  Tensor<T> input_;
};

/// Elementwise max(x, slope * x); slope 0 is ReLU.
template <typename T>
class LeakyRelu {
 public:
  explicit LeakyRelu(T slope = T{0}) : slope_(slope) {}
  Tensor<T> forward(const Tensor<T>& input, bool keep_input = true);
  Tensor<T> backward(const Tensor<T>& dout) const;

 private:
  T slope_;
  Tensor<T> input_;
};

/// Exact GELU, x * Phi(x). Smooth everywhere, unlike the ReLU family.
template <typename T>
class Gelu {
 public:
  Tensor<T> forward(const Tensor<T>& input, bool keep_input = true);
  Tensor<T> backward(const Tensor<T>& dout) const;

 private:
  Tensor<T> input_;
};

/// Per-channel batch normalization with a learned affine transform. Training
/// mode normalizes with the batch statistics and updates running estimates
/// (unbiased variance); inference mode uses the running estimates.
template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(std::string name, std::size_t channels, double momentum = 0.1, double eps = 1e-5);

  Tensor<T> forward(const Tensor<T>& input, bool training);
  /// Accumulates weight/bias gradients and returns the input gradient.
  Tensor<T> backward(const Tensor<T>& dout);

  void collect(ParamRefs<T>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }
  /// Running mean and variance; checkpointed but not trained.
  void collect_buffers(ParamRefs<T>& out) {
    out.push_back(&running_mean_);
    out.push_back(&running_var_);
  }

 private:
  Parameter<T> weight_;
  Parameter<T> bias_;
  Parameter<T> running_mean_;
  Parameter<T> running_var_;
  double momentum_ = 0.1;
  double eps_ = 1e-5;
  bool trained_forward_ = false;
  Tensor<T> xhat_;
  std::vector<double> inv_std_;
};

/// Channel concatenation along dimension 1.
template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& parts);

/// Splits a channel-concatenated gradient back into its parts.
template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& grad, const std::vector<std::size_t>& channels);

template <typename T>
std::size_t parameter_count(const ParamRefs<T>& params) {
  std::size_t n = 0;
  for (const auto* p : params) n += p->value.size();
  return n;
}

template <typename T>
void zero_grads(const ParamRefs<T>& params) {
  for (auto* p : params) p->grad.zero();
}

}  // namespace kdseg::nn
