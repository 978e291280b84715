#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "kdseg/tensor.hpp"

namespace kdseg::testing {

template <typename T = float>
Tensor<T> random_tensor(std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed,
                        double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, scale);
  Tensor<T> t(n, c, h, w);
  for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
  return t;
}

/// Central differences of `f` at every element of `x`. The denominator is the
/// perturbation actually representable in T, not the nominal 2*eps.
template <typename T>
Tensor<double> numeric_gradient(const std::function<double(const Tensor<T>&)>& f, const Tensor<T>& x,
                                double eps = 1e-3) {
  Tensor<double> g(x.shape());
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = x[i];
    const T up = static_cast<T>(orig + eps);
    const T down = static_cast<T>(orig - eps);
    probe[i] = up;
    const double fp = f(probe);
    probe[i] = down;
    const double fm = f(probe);
    probe[i] = orig;
    g[i] = (fp - fm) / (static_cast<double>(up) - static_cast<double>(down));
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||); 0 when both vanish.
template <typename A, typename B>
double relative_error(const Tensor<A>& a, const Tensor<B>& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i], y = b[i];
    diff += (x - y) * (x - y);
    na += x * x;
    nb += y * y;
  }
  const double denom = std::sqrt(std::max(na, nb));
  return denom == 0 ? 0.0 : std::sqrt(diff) / denom;
}

/// Fresh directory under the system temp directory.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("kdseg-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace kdseg::testing
