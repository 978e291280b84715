#pragma once

// Dense compute kernels. Everything in `kdseg::kernels` is OpenMP-parallel
// and deterministic: every output element is produced by exactly one thread
// and cross-image reductions are summed in batch order, so results do not
// depend on the thread count. `kdseg::reference` holds the plain serial
// loops the parallel versions are tested and benchmarked against.

#include <cstddef>

#include "kdseg/tensor.hpp"

namespace kdseg {

struct ConvGeometry {
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;
  std::size_t dilation = 1;

  std::size_t out_extent(std::size_t in) const noexcept {
    const std::size_t span = dilation * (kernel - 1) + 1;
    return (in + 2 * pad - span) / stride + 1;
  }
};

/// Gradients produced by a convolution backward pass. Any pointer may be
/// null to skip that output; dweight/dbias are accumulated into, dinput is
/// overwritten.
template <typename T>
struct ConvGrads {
  Tensor<T>* dinput = nullptr;
  Tensor<T>* dweight = nullptr;
  Tensor<T>* dbias = nullptr;
};

namespace kernels {

/// weight: (OC, IC, K, K); bias: (OC, 1, 1, 1) or empty.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                         const ConvGeometry& g);

template <typename T>
void conv2d_backward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& dout,
                     const ConvGeometry& g, ConvGrads<T> grads);

/// Channel softmax of input / tau at every pixel.
template <typename T>
void softmax_channels(const Tensor<T>& input, double tau, Tensor<T>& out);

/// Backward of softmax (tau = 1): dz = p * (dp - sum_c p_c dp_c).
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& probs, const Tensor<T>& dprobs);

/// Bilinear resize with half-pixel centres (align_corners = false).
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& input, std::size_t out_h, std::size_t out_w);

template <typename T>
Tensor<T> resize_bilinear_backward(const Tensor<T>& dout, std::size_t in_h, std::size_t in_w);

/// Adaptive average pooling: window i covers [floor(i*in/out), ceil((i+1)*in/out)).
template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& input, std::size_t out_h, std::size_t out_w);

template <typename T>
Tensor<T> adaptive_avg_pool_backward(const Tensor<T>& dout, std::size_t in_h, std::size_t in_w);

/// Non-overlapping factor x factor average pooling; edge windows are
/// clipped and averaged over the pixels they cover.
template <typename T>
Tensor<T> block_avg_pool(const Tensor<T>& input, std::size_t factor);

template <typename T>
Tensor<T> block_avg_pool_backward(const Tensor<T>& dout, std::size_t factor, std::size_t in_h,
                                  std::size_t in_w);

}  // namespace kernels

namespace reference {

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                         const ConvGeometry& g);

template <typename T>
void conv2d_backward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& dout,
                     const ConvGeometry& g, ConvGrads<T> grads);

template <typename T>
void softmax_channels(const Tensor<T>& input, double tau, Tensor<T>& out);

}  // namespace reference

}  // namespace kdseg
