#define EIGEN_DONT_PARALLELIZE
#include "kdseg/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <vector>

namespace kdseg {
namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMatrix<T>>;

bool is_pointwise(const ConvGeometry& g) {
  return g.kernel == 1 && g.stride == 1 && g.pad == 0;
}

// cols has shape (IC*K*K, OH*OW).
template <typename T>
void im2col(const T* image, std::size_t channels, std::size_t h, std::size_t w,
            const ConvGeometry& g, std::size_t oh, std::size_t ow, T* cols) {
  const std::size_t k = g.kernel;
  const std::size_t out_plane = oh * ow;
  for (std::size_t ic = 0; ic < channels; ++ic) {
    const T* src = image + ic * h * w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* dst = cols + ((ic * k + ky) * k + kx) * out_plane;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky * g.dilation) - static_cast<long>(g.pad);
          T* row = dst + oy * ow;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            std::fill(row, row + ow, T{});
            continue;
          }
          const T* src_row = src + static_cast<std::size_t>(iy) * w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx * g.dilation) - static_cast<long>(g.pad);
            row[ox] = (ix < 0 || ix >= static_cast<long>(w)) ? T{} : src_row[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, std::size_t channels, std::size_t h, std::size_t w,
            const ConvGeometry& g, std::size_t oh, std::size_t ow, T* image) {
  const std::size_t k = g.kernel;
  const std::size_t out_plane = oh * ow;
  std::fill(image, image + channels * h * w, T{});
  for (std::size_t ic = 0; ic < channels; ++ic) {
    T* dst = image + ic * h * w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* src = cols + ((ic * k + ky) * k + kx) * out_plane;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky * g.dilation) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          T* dst_row = dst + static_cast<std::size_t>(iy) * w;
          const T* row = src + oy * ow;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx * g.dilation) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(w)) dst_row[ix] += row[ox];
          }
        }
      }
    }
  }
}

template <typename T>
void check_conv_shapes(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                       const ConvGeometry& g) {
  if (weight.c() != input.c() || weight.h() != g.kernel || weight.w() != g.kernel) {
    throw ShapeError("conv2d: weight " + shape_string(weight.shape()) + " does not match input " +
                     shape_string(input.shape()));
  }
  if (!bias.empty() && bias.size() != weight.n()) {
    throw ShapeError("conv2d: bias size mismatch");
  }
  const std::size_t span = g.dilation * (g.kernel - 1) + 1;
  if (input.h() + 2 * g.pad < span || input.w() + 2 * g.pad < span) {
    throw ShapeError("conv2d: input " + shape_string(input.shape()) + " smaller than kernel");
  }
}

}  // namespace

namespace kernels {

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                         const ConvGeometry& g) {
  check_conv_shapes(input, weight, bias, g);
  const std::size_t batch = input.n(), ic = input.c(), oc = weight.n();
  const std::size_t oh = g.out_extent(input.h()), ow = g.out_extent(input.w());
  const std::size_t kdim = ic * g.kernel * g.kernel, out_plane = oh * ow;
  Tensor<T> out(batch, oc, oh, ow);
  const bool pointwise = is_pointwise(g);
  ConstMapMat<T> wmat(weight.data(), oc, kdim);

#pragma omp parallel
  {
    std::vector<T> cols(pointwise ? 0 : kdim * out_plane);
#pragma omp for schedule(static)
    for (std::size_t b = 0; b < batch; ++b) {
      const T* src = input.plane_ptr(b, 0);
      if (!pointwise) {
        im2col(src, ic, input.h(), input.w(), g, oh, ow, cols.data());
        src = cols.data();
      }
      MapMat<T> omat(out.plane_ptr(b, 0), oc, out_plane);
      omat.noalias() = wmat * ConstMapMat<T>(src, kdim, out_plane);
      if (!bias.empty()) {
        for (std::size_t o = 0; o < oc; ++o) omat.row(o).array() += bias[o];
      }
    }
  }
  return out;
}

template <typename T>
void conv2d_backward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& dout,
                     const ConvGeometry& g, ConvGrads<T> grads) {
  const std::size_t batch = input.n(), ic = input.c(), oc = weight.n();
  const std::size_t oh = dout.h(), ow = dout.w();
  const std::size_t kdim = ic * g.kernel * g.kernel, out_plane = oh * ow;
  const bool pointwise = is_pointwise(g);
  ConstMapMat<T> wmat(weight.data(), oc, kdim);

  if (grads.dinput) *grads.dinput = Tensor<T>(input.shape());
  // Per-image weight gradients, summed afterwards in batch order.
  std::vector<T> dw_parts(grads.dweight ? batch * oc * kdim : 0);

#pragma omp parallel
  {
    std::vector<T> cols(pointwise ? 0 : kdim * out_plane);
    std::vector<T> dcols(pointwise || !grads.dinput ? 0 : kdim * out_plane);
#pragma omp for schedule(static)
    for (std::size_t b = 0; b < batch; ++b) {
      ConstMapMat<T> dy(dout.plane_ptr(b, 0), oc, out_plane);
      if (grads.dweight) {
        const T* src = input.plane_ptr(b, 0);
        if (!pointwise) {
          im2col(input.plane_ptr(b, 0), ic, input.h(), input.w(), g, oh, ow, cols.data());
          src = cols.data();
        }
        MapMat<T> dw(dw_parts.data() + b * oc * kdim, oc, kdim);
        dw.noalias() = dy * ConstMapMat<T>(src, kdim, out_plane).transpose();
      }
      if (grads.dinput) {
        if (pointwise) {
          MapMat<T>(grads.dinput->plane_ptr(b, 0), kdim, out_plane).noalias() = wmat.transpose() * dy;
        } else {
          MapMat<T>(dcols.data(), kdim, out_plane).noalias() = wmat.transpose() * dy;
          col2im(dcols.data(), ic, input.h(), input.w(), g, oh, ow, grads.dinput->plane_ptr(b, 0));
        }
      }
    }
  }

  if (grads.dweight) {
    T* dw = grads.dweight->data();
    const std::size_t count = oc * kdim;
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < count; ++i) {
      T acc = dw[i];
      for (std::size_t b = 0; b < batch; ++b) acc += dw_parts[b * count + i];
      dw[i] = acc;
    }
  }
  if (grads.dbias) {
    T* db = grads.dbias->data();
#pragma omp parallel for schedule(static)
    for (std::size_t o = 0; o < oc; ++o) {
      T acc = db[o];
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = dout.plane_ptr(b, o);
        for (std::size_t i = 0; i < out_plane; ++i) acc += p[i];
      }
      db[o] = acc;
    }
  }
}

template <typename T>
void softmax_channels(const Tensor<T>& input, double tau, Tensor<T>& out) {
  if (out.shape() != input.shape()) out = Tensor<T>(input.shape());
  const std::size_t batch = input.n(), classes = input.c(), plane = input.plane();
  const long pixels = static_cast<long>(batch * plane);
  const double inv_tau = 1.0 / tau;
#pragma omp parallel for schedule(static)
  for (long p = 0; p < pixels; ++p) {
    const std::size_t b = static_cast<std::size_t>(p) / plane, i = static_cast<std::size_t>(p) % plane;
    const T* z = input.plane_ptr(b, 0) + i;
    T* q = out.plane_ptr(b, 0) + i;
    double zmax = static_cast<double>(z[0]);
    for (std::size_t c = 1; c < classes; ++c) zmax = std::max(zmax, static_cast<double>(z[c * plane]));
    double sum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      const double e = std::exp((static_cast<double>(z[c * plane]) - zmax) * inv_tau);
      q[c * plane] = static_cast<T>(e);
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (std::size_t c = 0; c < classes; ++c) q[c * plane] = static_cast<T>(static_cast<double>(q[c * plane]) * inv);
  }
}

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& probs, const Tensor<T>& dprobs) {
  require_same_shape(probs, dprobs, "softmax_backward");
  Tensor<T> dz(probs.shape());
  const std::size_t classes = probs.c(), plane = probs.plane();
  const long pixels = static_cast<long>(probs.n() * plane);
#pragma omp parallel for schedule(static)
  for (long p = 0; p < pixels; ++p) {
    const std::size_t b = static_cast<std::size_t>(p) / plane, i = static_cast<std::size_t>(p) % plane;
    const T* q = probs.plane_ptr(b, 0) + i;
    const T* g = dprobs.plane_ptr(b, 0) + i;
    T* out = dz.plane_ptr(b, 0) + i;
    double dot = 0.0;
    for (std::size_t c = 0; c < classes; ++c) dot += static_cast<double>(q[c * plane]) * g[c * plane];
    for (std::size_t c = 0; c < classes; ++c) {
      out[c * plane] = static_cast<T>(q[c * plane] * (g[c * plane] - dot));
    }
  }
  return dz;
}

namespace {

struct LerpTap {
  std::size_t i0, i1;
  double w1;
};

std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    std::size_t i0 = std::min(static_cast<std::size_t>(src), in - 1);
    std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

std::pair<std::size_t, std::size_t> adaptive_window(std::size_t i, std::size_t in, std::size_t out) {
  const std::size_t lo = (i * in) / out;
  const std::size_t hi = ((i + 1) * in + out - 1) / out;
  return {lo, hi};
}

}  // namespace

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& input, std::size_t out_h, std::size_t out_w) {
  Tensor<T> out(input.n(), input.c(), out_h, out_w);
  const auto ty = lerp_taps(input.h(), out_h);
  const auto tx = lerp_taps(input.w(), out_w);
  const long planes = static_cast<long>(input.n() * input.c());
  const std::size_t iw = input.w();
#pragma omp parallel for schedule(static)
  for (long p = 0; p < planes; ++p) {
    const T* src = input.data() + static_cast<std::size_t>(p) * input.plane();
    T* dst = out.data() + static_cast<std::size_t>(p) * out_h * out_w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto& a = ty[y];
      for (std::size_t x = 0; x < out_w; ++x) {
        const auto& b = tx[x];
        const double top = src[a.i0 * iw + b.i0] * (1 - b.w1) + src[a.i0 * iw + b.i1] * b.w1;
        const double bot = src[a.i1 * iw + b.i0] * (1 - b.w1) + src[a.i1 * iw + b.i1] * b.w1;
        dst[y * out_w + x] = static_cast<T>(top * (1 - a.w1) + bot * a.w1);
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> resize_bilinear_backward(const Tensor<T>& dout, std::size_t in_h, std::size_t in_w) {
  Tensor<T> din(dout.n(), dout.c(), in_h, in_w);
  const auto ty = lerp_taps(in_h, dout.h());
  const auto tx = lerp_taps(in_w, dout.w());
  const long planes = static_cast<long>(dout.n() * dout.c());
#pragma omp parallel for schedule(static)
  for (long p = 0; p < planes; ++p) {
    const T* g = dout.data() + static_cast<std::size_t>(p) * dout.plane();
    T* dst = din.data() + static_cast<std::size_t>(p) * in_h * in_w;
    for (std::size_t y = 0; y < dout.h(); ++y) {
      const auto& a = ty[y];
      for (std::size_t x = 0; x < dout.w(); ++x) {
        const auto& b = tx[x];
        const double v = g[y * dout.w() + x];
        dst[a.i0 * in_w + b.i0] += static_cast<T>(v * (1 - a.w1) * (1 - b.w1));
        dst[a.i0 * in_w + b.i1] += static_cast<T>(v * (1 - a.w1) * b.w1);
        dst[a.i1 * in_w + b.i0] += static_cast<T>(v * a.w1 * (1 - b.w1));
        dst[a.i1 * in_w + b.i1] += static_cast<T>(v * a.w1 * b.w1);
      }
    }
  }
  return din;
}

template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& input, std::size_t out_h, std::size_t out_w) {
  Tensor<T> out(input.n(), input.c(), out_h, out_w);
  const long planes = static_cast<long>(input.n() * input.c());
#pragma omp parallel for schedule(static)
  for (long p = 0; p < planes; ++p) {
    const T* src = input.data() + static_cast<std::size_t>(p) * input.plane();
    T* dst = out.data() + static_cast<std::size_t>(p) * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto [y0, y1] = adaptive_window(oy, input.h(), out_h);
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto [x0, x1] = adaptive_window(ox, input.w(), out_w);
        double acc = 0;
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t x = x0; x < x1; ++x) acc += src[y * input.w() + x];
        dst[oy * out_w + ox] = static_cast<T>(acc / static_cast<double>((y1 - y0) * (x1 - x0)));
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> adaptive_avg_pool_backward(const Tensor<T>& dout, std::size_t in_h, std::size_t in_w) {
  Tensor<T> din(dout.n(), dout.c(), in_h, in_w);
  const long planes = static_cast<long>(dout.n() * dout.c());
#pragma omp parallel for schedule(static)
  for (long p = 0; p < planes; ++p) {
    const T* g = dout.data() + static_cast<std::size_t>(p) * dout.plane();
    T* dst = din.data() + static_cast<std::size_t>(p) * in_h * in_w;
    for (std::size_t oy = 0; oy < dout.h(); ++oy) {
      const auto [y0, y1] = adaptive_window(oy, in_h, dout.h());
      for (std::size_t ox = 0; ox < dout.w(); ++ox) {
        const auto [x0, x1] = adaptive_window(ox, in_w, dout.w());
        const T v = static_cast<T>(g[oy * dout.w() + ox] / static_cast<double>((y1 - y0) * (x1 - x0)));
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t x = x0; x < x1; ++x) dst[y * in_w + x] += v;
      }
    }
  }
  return din;
}

template <typename T>
Tensor<T> block_avg_pool(const Tensor<T>& input, std::size_t factor) {
  if (factor == 0) throw ValidationError("block_avg_pool: factor must be positive");
  const std::size_t oh = (input.h() + factor - 1) / factor, ow = (input.w() + factor - 1) / factor;
  Tensor<T> out(input.n(), input.c(), oh, ow);
  const long planes = static_cast<long>(input.n() * input.c());
#pragma omp parallel for schedule(static)
  for (long p = 0; p < planes; ++p) {
    const T* src = input.data() + static_cast<std::size_t>(p) * input.plane();
    T* dst = out.data() + static_cast<std::size_t>(p) * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const std::size_t y1 = std::min((oy + 1) * factor, input.h());
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t x1 = std::min((ox + 1) * factor, input.w());
        double acc = 0;
        for (std::size_t y = oy * factor; y < y1; ++y)
          for (std::size_t x = ox * factor; x < x1; ++x) acc += src[y * input.w() + x];
        dst[oy * ow + ox] = static_cast<T>(acc / static_cast<double>((y1 - oy * factor) * (x1 - ox * factor)));
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> block_avg_pool_backward(const Tensor<T>& dout, std::size_t factor, std::size_t in_h,
                                  std::size_t in_w) {
  Tensor<T> din(dout.n(), dout.c(), in_h, in_w);
  const long planes = static_cast<long>(dout.n() * dout.c());
#pragma omp parallel for schedule(static)
  for (long p = 0; p < planes; ++p) {
    const T* g = dout.data() + static_cast<std::size_t>(p) * dout.plane();
    T* dst = din.data() + static_cast<std::size_t>(p) * in_h * in_w;
    for (std::size_t y = 0; y < in_h; ++y) {
      const std::size_t oy = y / factor;
      const std::size_t hy = std::min((oy + 1) * factor, in_h) - oy * factor;
      for (std::size_t x = 0; x < in_w; ++x) {
        const std::size_t ox = x / factor;
        const std::size_t wx = std::min((ox + 1) * factor, in_w) - ox * factor;
        dst[y * in_w + x] = static_cast<T>(g[oy * dout.w() + ox] / static_cast<double>(hy * wx));
      }
    }
  }
  return din;
}

#define KDSEG_INSTANTIATE(T)                                                                      \
  template Tensor<T> conv2d_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,         \
                                    const ConvGeometry&);                                         \
  template void conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                                const ConvGeometry&, ConvGrads<T>);                               \
  template void softmax_channels(const Tensor<T>&, double, Tensor<T>&);                           \
  template Tensor<T> softmax_backward(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> resize_bilinear(const Tensor<T>&, std::size_t, std::size_t);                 \
  template Tensor<T> resize_bilinear_backward(const Tensor<T>&, std::size_t, std::size_t);        \
  template Tensor<T> adaptive_avg_pool(const Tensor<T>&, std::size_t, std::size_t);               \
  template Tensor<T> adaptive_avg_pool_backward(const Tensor<T>&, std::size_t, std::size_t);      \
  template Tensor<T> block_avg_pool(const Tensor<T>&, std::size_t);                               \
  template Tensor<T> block_avg_pool_backward(const Tensor<T>&, std::size_t, std::size_t, std::size_t);

KDSEG_INSTANTIATE(float)
KDSEG_INSTANTIATE(double)
#undef KDSEG_INSTANTIATE

}  // namespace kernels

namespace reference {

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                         const ConvGeometry& g) {
  check_conv_shapes(input, weight, bias, g);
  const std::size_t oh = g.out_extent(input.h()), ow = g.out_extent(input.w());
  Tensor<T> out(input.n(), weight.n(), oh, ow);
  for (std::size_t b = 0; b < input.n(); ++b)
    for (std::size_t o = 0; o < weight.n(); ++o)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          T acc = bias.empty() ? T{} : bias[o];
          for (std::size_t i = 0; i < input.c(); ++i)
            for (std::size_t ky = 0; ky < g.kernel; ++ky)
              for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                const long iy = static_cast<long>(oy * g.stride + ky * g.dilation) - static_cast<long>(g.pad);
                const long ix = static_cast<long>(ox * g.stride + kx * g.dilation) - static_cast<long>(g.pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(input.h()) || ix >= static_cast<long>(input.w()))
                  continue;
                acc += weight(o, i, ky, kx) * input(b, i, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
              }
          out(b, o, oy, ox) = acc;
        }
  return out;
}

template <typename T>
void conv2d_backward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& dout,
                     const ConvGeometry& g, ConvGrads<T> grads) {
  if (grads.dinput) *grads.dinput = Tensor<T>(input.shape());
  for (std::size_t b = 0; b < input.n(); ++b)
    for (std::size_t o = 0; o < weight.n(); ++o)
      for (std::size_t oy = 0; oy < dout.h(); ++oy)
        for (std::size_t ox = 0; ox < dout.w(); ++ox) {
          const T dy = dout(b, o, oy, ox);
          if (grads.dbias) (*grads.dbias)[o] += dy;
          for (std::size_t i = 0; i < input.c(); ++i)
            for (std::size_t ky = 0; ky < g.kernel; ++ky)
              for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                const long iy = static_cast<long>(oy * g.stride + ky * g.dilation) - static_cast<long>(g.pad);
                const long ix = static_cast<long>(ox * g.stride + kx * g.dilation) - static_cast<long>(g.pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(input.h()) || ix >= static_cast<long>(input.w()))
                  continue;
                const auto y = static_cast<std::size_t>(iy), x = static_cast<std::size_t>(ix);
                if (grads.dweight) (*grads.dweight)(o, i, ky, kx) += dy * input(b, i, y, x);
                if (grads.dinput) (*grads.dinput)(b, i, y, x) += dy * weight(o, i, ky, kx);
              }
        }
}

template <typename T>
void softmax_channels(const Tensor<T>& input, double tau, Tensor<T>& out) {
  out = Tensor<T>(input.shape());
  for (std::size_t b = 0; b < input.n(); ++b)
    for (std::size_t y = 0; y < input.h(); ++y)
      for (std::size_t x = 0; x < input.w(); ++x) {
        double zmax = input(b, 0, y, x);
        for (std::size_t c = 1; c < input.c(); ++c) zmax = std::max<double>(zmax, input(b, c, y, x));
        double sum = 0;
        for (std::size_t c = 0; c < input.c(); ++c) sum += std::exp((input(b, c, y, x) - zmax) / tau);
        for (std::size_t c = 0; c < input.c(); ++c)
          out(b, c, y, x) = static_cast<T>(std::exp((input(b, c, y, x) - zmax) / tau) / sum);
      }
}

template Tensor<float> conv2d_forward(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                                      const ConvGeometry&);
template Tensor<double> conv2d_forward(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                                       const ConvGeometry&);
template void conv2d_backward(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                              const ConvGeometry&, ConvGrads<float>);
template void conv2d_backward(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                              const ConvGeometry&, ConvGrads<double>);
template void softmax_channels(const Tensor<float>&, double, Tensor<float>&);
template void softmax_channels(const Tensor<double>&, double, Tensor<double>&);

}  // namespace reference
}  // namespace kdseg
