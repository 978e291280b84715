#include "kdseg/nn.hpp"

#include <cmath>
#include <cstring>

namespace kdseg::nn {

template <typename T>
Conv2d<T>::Conv2d(std::string name, std::size_t in_channels, std::size_t out_channels,
                  ConvGeometry geometry, bool with_bias)
    : weight_(name + ".weight", Tensor<T>(out_channels, in_channels, geometry.kernel, geometry.kernel)),
      bias_(name + ".bias", with_bias ? Tensor<T>(out_channels, 1, 1, 1) : Tensor<T>()),
      geometry_(geometry),
      with_bias_(with_bias) {}

template <typename T>
void Conv2d<T>::init_he(std::mt19937_64& rng, double negative_slope) {
  const double fan_in = static_cast<double>(in_channels() * geometry_.kernel * geometry_.kernel);
  const double stddev = std::sqrt(2.0 / ((1.0 + negative_slope * negative_slope) * fan_in));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& w : weight_.value.storage()) w = static_cast<T>(dist(rng));
  bias_.value.zero();
}

template <typename T>
void Conv2d<T>::init_zero() {
  weight_.value.zero();
  bias_.value.zero();
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& input, bool keep_input) {
  if (keep_input) input_ = input;
  return kernels::conv2d_forward(input, weight_.value, bias_.value, geometry_);
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& dout, bool accumulate_params, bool input_grad) {
  if (input_.empty()) throw Error("Conv2d::backward: forward input was not kept");
  Tensor<T> dinput;
  ConvGrads<T> grads;
  if (input_grad) grads.dinput = &dinput;
  if (accumulate_params) {
    grads.dweight = &weight_.grad;
    if (with_bias_) grads.dbias = &bias_.grad;
  }
  kernels::conv2d_backward(input_, weight_.value, dout, geometry_, grads);
  return dinput;
}

template <typename T>
Tensor<T> LeakyRelu<T>::forward(const Tensor<T>& input, bool keep_input) {
  if (keep_input) input_ = input;
  Tensor<T> out(input.shape());
  const T* x = input.data();
  T* y = out.data();
  const std::size_t n = input.size();
#pragma omp parallel for simd schedule(static)
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > T{0} ? x[i] : slope_ * x[i];
  return out;
}

template <typename T>
Tensor<T> LeakyRelu<T>::backward(const Tensor<T>& dout) const {
  require_same_shape(dout, input_, "LeakyRelu::backward");
  Tensor<T> din(dout.shape());
  const T* x = input_.data();
  const T* g = dout.data();
  T* d = din.data();
  const std::size_t n = dout.size();
#pragma omp parallel for simd schedule(static)
  for (std::size_t i = 0; i < n; ++i) d[i] = x[i] > T{0} ? g[i] : slope_ * g[i];
  return din;
}

template <typename T>
Tensor<T> Gelu<T>::forward(const Tensor<T>& input, bool keep_input) {
  if (keep_input) input_ = input;
  Tensor<T> out(input.shape());
  const T* x = input.data();
  T* y = out.data();
  const std::size_t n = input.size();
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x[i];
    y[i] = static_cast<T>(0.5 * v * std::erfc(-v * M_SQRT1_2));
  }
  return out;
}

template <typename T>
Tensor<T> Gelu<T>::backward(const Tensor<T>& dout) const {
  require_same_shape(dout, input_, "Gelu::backward");
  Tensor<T> din(dout.shape());
  const T* x = input_.data();
  const T* g = dout.data();
  T* d = din.data();
  const std::size_t n = dout.size();
  const double inv_sqrt_2pi = 0.5 * M_2_SQRTPI * M_SQRT1_2;
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x[i];
    const double cdf = 0.5 * std::erfc(-v * M_SQRT1_2);
    d[i] = static_cast<T>(g[i] * (cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v)));
  }
  return din;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& parts) {
  if (parts.empty()) return {};
  const auto& first = *parts.front();
  std::size_t channels = 0;
  for (const auto* p : parts) {
    if (p->n() != first.n() || p->h() != first.h() || p->w() != first.w()) {
      throw ShapeError("concat_channels: spatial/batch mismatch");
    }
    channels += p->c();
  }
  Tensor<T> out(first.n(), channels, first.h(), first.w());
  const std::size_t plane = first.plane();
  for (std::size_t b = 0; b < first.n(); ++b) {
    std::size_t offset = 0;
    for (const auto* p : parts) {
      std::memcpy(out.plane_ptr(b, offset), p->plane_ptr(b, 0), sizeof(T) * p->c() * plane);
      offset += p->c();
    }
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& grad, const std::vector<std::size_t>& channels) {
  std::vector<Tensor<T>> out;
  out.reserve(channels.size());
  std::size_t offset = 0;
  for (std::size_t c : channels) {
    Tensor<T> part(grad.n(), c, grad.h(), grad.w());
    for (std::size_t b = 0; b < grad.n(); ++b) {
      std::memcpy(part.plane_ptr(b, 0), grad.plane_ptr(b, offset), sizeof(T) * c * grad.plane());
    }
    offset += c;
    out.push_back(std::move(part));
  }
  if (offset != grad.c()) throw ShapeError("split_channels: channel counts do not add up");
  return out;
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::string name, std::size_t channels, double momentum, double eps)
    : weight_(name + ".weight", Tensor<T>(1, channels, 1, 1)),
      bias_(name + ".bias", Tensor<T>(1, channels, 1, 1)),
      running_mean_(name + ".running_mean", Tensor<T>(1, channels, 1, 1)),
      running_var_(name + ".running_var", Tensor<T>(1, channels, 1, 1)),
      momentum_(momentum),
      eps_(eps) {
  weight_.value.fill(T{1});
  running_var_.value.fill(T{1});
}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x, bool training) {
  const std::size_t C = weight_.value.c();
  if (x.c() != C) throw ShapeError("BatchNorm2d: expected " + std::to_string(C) + " channels, got " + shape_string(x.shape()));
  Tensor<T> out(x.shape());
  const std::size_t B = x.n(), P = x.plane();
  const std::size_t count = B * P;
  trained_forward_ = training;
  if (training) {
    xhat_ = Tensor<T>(x.shape());
    inv_std_.assign(C, 0.0);
  }
#pragma omp parallel for schedule(static)
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0.0, var = 0.0;
    if (training) {
      for (std::size_t b = 0; b < B; ++b) {
        const T* src = x.plane_ptr(b, c);
        for (std::size_t i = 0; i < P; ++i) mean += src[i];
      }
      mean /= static_cast<double>(count);
      for (std::size_t b = 0; b < B; ++b) {
        const T* src = x.plane_ptr(b, c);
        for (std::size_t i = 0; i < P; ++i) var += (src[i] - mean) * (src[i] - mean);
      }
      var /= static_cast<double>(count);
      const double unbiased = count > 1 ? var * static_cast<double>(count) / static_cast<double>(count - 1) : var;
      T& rm = running_mean_.value.data()[c];
      T& rv = running_var_.value.data()[c];
      rm = static_cast<T>((1.0 - momentum_) * rm + momentum_ * mean);
      rv = static_cast<T>((1.0 - momentum_) * rv + momentum_ * unbiased);
    } else {
      mean = running_mean_.value.data()[c];
      var = running_var_.value.data()[c];
    }
    const double inv = 1.0 / std::sqrt(var + eps_);
    const double g = weight_.value.data()[c], beta = bias_.value.data()[c];
    if (training) inv_std_[c] = inv;
    for (std::size_t b = 0; b < B; ++b) {
      const T* src = x.plane_ptr(b, c);
      T* dst = out.plane_ptr(b, c);
      T* xh = training ? xhat_.plane_ptr(b, c) : nullptr;
      for (std::size_t i = 0; i < P; ++i) {
        const double n = (src[i] - mean) * inv;
        if (xh) xh[i] = static_cast<T>(n);
        dst[i] = static_cast<T>(g * n + beta);
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> BatchNorm2d<T>::backward(const Tensor<T>& dout) {
  if (!trained_forward_) throw ValidationError("BatchNorm2d::backward requires a training-mode forward");
  require_same_shape(dout, xhat_, "BatchNorm2d::backward");
  const std::size_t C = dout.c(), B = dout.n(), P = dout.plane();
  const double count = static_cast<double>(B * P);
  Tensor<T> dx(dout.shape());
#pragma omp parallel for schedule(static)
  for (std::size_t c = 0; c < C; ++c) {
    double sum_d = 0.0, sum_dx = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const T* d = dout.plane_ptr(b, c);
      const T* xh = xhat_.plane_ptr(b, c);
      for (std::size_t i = 0; i < P; ++i) {
        sum_d += d[i];
        sum_dx += static_cast<double>(d[i]) * xh[i];
      }
    }
    weight_.grad.data()[c] += static_cast<T>(sum_dx);
    bias_.grad.data()[c] += static_cast<T>(sum_d);
    const double g = weight_.value.data()[c];
    const double k = g * inv_std_[c] / count;
    for (std::size_t b = 0; b < B; ++b) {
      const T* d = dout.plane_ptr(b, c);
      const T* xh = xhat_.plane_ptr(b, c);
      T* o = dx.plane_ptr(b, c);
      for (std::size_t i = 0; i < P; ++i) o[i] = static_cast<T>(k * (count * d[i] - sum_d - xh[i] * sum_dx));
    }
  }
  return dx;
}

template class BatchNorm2d<float>;
template class BatchNorm2d<double>;
template class Conv2d<float>;
template class Conv2d<double>;
template class LeakyRelu<float>;
template class LeakyRelu<double>;
template class Gelu<float>;
template class Gelu<double>;
template Tensor<float> concat_channels(const std::vector<const Tensor<float>*>&);
template Tensor<double> concat_channels(const std::vector<const Tensor<double>*>&);
template std::vector<Tensor<float>> split_channels(const Tensor<float>&, const std::vector<std::size_t>&);
template std::vector<Tensor<double>> split_channels(const Tensor<double>&, const std::vector<std::size_t>&);

}  // namespace kdseg::nn
