#include "kdseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "kdseg/kernels.hpp"

namespace kdseg {
namespace {

// Per-pixel log-softmax of z / tau, computed in double.
void log_softmax_pixel(const float* z, std::size_t classes, std::size_t stride, double inv_tau,
                       double* out) {
  double zmax = z[0];
  for (std::size_t c = 1; c < classes; ++c) zmax = std::max(zmax, static_cast<double>(z[c * stride]));
  double sum = 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    out[c] = (static_cast<double>(z[c * stride]) - zmax) * inv_tau;
    sum += std::exp(out[c]);
  }
  const double log_sum = std::log(sum);
  for (std::size_t c = 0; c < classes; ++c) out[c] -= log_sum;
}

double ordered_sum(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

struct Norms {
  std::vector<double> unit;  // row-major (positions x channels)
  std::vector<double> norm;
};

// Normalizes each position's feature vector. feats is (D, N) channel-major.
Norms normalize_columns(const double* feats, std::size_t channels, std::size_t positions) {
  Norms out{std::vector<double>(positions * channels), std::vector<double>(positions)};
  for (std::size_t i = 0; i < positions; ++i) {
    double sq = 0;
    for (std::size_t d = 0; d < channels; ++d) sq += feats[d * positions + i] * feats[d * positions + i];
    const double n = std::sqrt(sq);
    out.norm[i] = n;
    for (std::size_t d = 0; d < channels; ++d) {
      out.unit[i * channels + d] = n > 0 ? feats[d * positions + i] / n : 0.0;
    }
  }
  return out;
}

void require_same_spatial(const Tensorf& a, const Tensorf& b, const char* what) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w()) {
    throw ShapeError(std::string(what) + ": student " + shape_string(a.shape()) + " vs teacher " +
                     shape_string(b.shape()));
  }
}

}  // namespace

const CompositeLossReport::Entry* CompositeLossReport::find(const std::string& name) const {
  for (const auto& e : per_term)
    if (e.term == name) return &e;
  return nullptr;
}

LossWithGrad cross_entropy(const LogitMap& student, const LabelMap& labels) {
  validate_batch(student, labels);
  const Tensorf& z = student.values();
  const std::size_t classes = z.c(), plane = z.plane();
  const std::size_t pixels = z.n() * plane;
  std::size_t valid = 0;
  for (std::size_t i = 0; i < pixels; ++i) valid += labels.ignored(i) ? 0 : 1;
  if (valid == 0) throw EmptyBatchError("cross_entropy: every pixel is ignored");

  const double inv_valid = 1.0 / static_cast<double>(valid);
  std::vector<double> per_pixel(pixels, 0.0);
  Tensorf grad(z.shape());
#pragma omp parallel
  {
    std::vector<double> logp(classes);
#pragma omp for schedule(static)
    for (std::size_t p = 0; p < pixels; ++p) {
      if (labels.ignored(p)) continue;
      const std::size_t b = p / plane, i = p % plane;
      log_softmax_pixel(z.plane_ptr(b, 0) + i, classes, plane, 1.0, logp.data());
      const auto y = static_cast<std::size_t>(labels.values()[p]);
      per_pixel[p] = -logp[y];
      float* g = grad.plane_ptr(b, 0) + i;
      for (std::size_t c = 0; c < classes; ++c) {
        g[c * plane] = static_cast<float>((std::exp(logp[c]) - (c == y ? 1.0 : 0.0)) * inv_valid);
      }
    }
  }
  return {{term::kCrossEntropy, ordered_sum(per_pixel) * inv_valid}, std::move(grad)};
}

LossWithGrad pixelwise_distillation(const LogitMap& student, const LogitMap& teacher,
                                    const Temperature& t) {
  require_same_shape(student.values(), teacher.values(), "pixelwise_distillation");
  const Tensorf& zs = student.values();
  const Tensorf& zt = teacher.values();
  const std::size_t classes = zs.c(), plane = zs.plane();
  const std::size_t pixels = zs.n() * plane;
  const double tau = t.tau(), inv_tau = 1.0 / tau;
  const double inv_pixels = 1.0 / static_cast<double>(pixels);
  std::vector<double> per_pixel(pixels);
  Tensorf grad(zs.shape());
#pragma omp parallel
  {
    std::vector<double> logp(classes), logq(classes);
#pragma omp for schedule(static)
    for (std::size_t p = 0; p < pixels; ++p) {
      const std::size_t b = p / plane, i = p % plane;
      log_softmax_pixel(zs.plane_ptr(b, 0) + i, classes, plane, inv_tau, logp.data());
      log_softmax_pixel(zt.plane_ptr(b, 0) + i, classes, plane, inv_tau, logq.data());
      double acc = 0.0;
      float* g = grad.plane_ptr(b, 0) + i;
      for (std::size_t c = 0; c < classes; ++c) {
        const double q = std::exp(logq[c]);
        acc -= q * logp[c];
        // d/dz_s of -tau^2 sum q log p(z_s/tau) = tau * (p - q)
        g[c * plane] = static_cast<float>(tau * (std::exp(logp[c]) - q) * inv_pixels);
      }
      per_pixel[p] = tau * tau * acc;
    }
  }
  return {{term::kPixelwise, ordered_sum(per_pixel) * inv_pixels}, std::move(grad)};
}

LossWithGrad pairwise_affinity_loss(const FeatureMap& student, const FeatureMap& teacher,
                                    std::size_t pool_factor) {
  if (pool_factor == 0) throw ValidationError("pairwise_affinity_loss: pool_factor must be positive");
  const Tensorf& fs = student.values();
  const Tensorf& ft = teacher.values();
  const Tensor<double> ps = kernels::block_avg_pool(fs.cast<double>(), pool_factor);
  const Tensor<double> pt = kernels::block_avg_pool(ft.cast<double>(), pool_factor);
  if (fs.n() != ft.n() || ps.h() != pt.h() || ps.w() != pt.w()) {
    throw ShapeError("pairwise_affinity_loss: pooled spatial mismatch " + shape_string(ps.shape()) + " vs " +
                     shape_string(pt.shape()));
  }
  const std::size_t batch = ps.n(), positions = ps.plane();
  const std::size_t ds = ps.c(), dt = pt.c();
  const double scale = 1.0 / static_cast<double>(batch * positions * positions);

  std::vector<double> per_image(batch, 0.0);
  Tensor<double> dpooled(ps.shape());
#pragma omp parallel for schedule(static)
  for (std::size_t b = 0; b < batch; ++b) {
    const Norms us = normalize_columns(ps.plane_ptr(b, 0), ds, positions);
    const Norms ut = normalize_columns(pt.plane_ptr(b, 0), dt, positions);
    // sym[i][j] = dL/dA_s[i][j] + dL/dA_s[j][i]
    std::vector<double> sym(positions * positions);
    double acc = 0.0;
    for (std::size_t i = 0; i < positions; ++i) {
      for (std::size_t j = 0; j < positions; ++j) {
        double as = 0, at = 0;
        for (std::size_t d = 0; d < ds; ++d) as += us.unit[i * ds + d] * us.unit[j * ds + d];
        for (std::size_t d = 0; d < dt; ++d) at += ut.unit[i * dt + d] * ut.unit[j * dt + d];
        const double diff = as - at;
        acc += diff * diff;
        sym[i * positions + j] = diff;
      }
    }
    per_image[b] = acc;
    double* dp = dpooled.plane_ptr(b, 0);
    std::vector<double> du(ds);
    for (std::size_t i = 0; i < positions; ++i) {
      std::fill(du.begin(), du.end(), 0.0);
      for (std::size_t j = 0; j < positions; ++j) {
        // A is symmetric, so dL/du_i = sum_j 2 * 2 * diff_ij * u_j * scale
        const double g = 4.0 * sym[i * positions + j] * scale;
        for (std::size_t d = 0; d < ds; ++d) du[d] += g * us.unit[j * ds + d];
      }
      if (us.norm[i] == 0) continue;
      double dot = 0;
      for (std::size_t d = 0; d < ds; ++d) dot += du[d] * us.unit[i * ds + d];
      for (std::size_t d = 0; d < ds; ++d) {
        dp[d * positions + i] = (du[d] - dot * us.unit[i * ds + d]) / us.norm[i];
      }
    }
  }
  const double value = ordered_sum(per_image) * scale;
  Tensorf grad = kernels::block_avg_pool_backward(dpooled, pool_factor, fs.h(), fs.w()).cast<float>();
  return {{term::kPairwise, value}, std::move(grad)};
}

LossWithGrad ifv_loss(const FeatureMap& student, const FeatureMap& teacher, const LabelMap& labels) {
  const Tensorf& fs = student.values();
  const Tensorf& ft = teacher.values();
  require_same_spatial(fs, ft, "ifv_loss");
  if (labels.batch() != fs.n()) throw ShapeError("ifv_loss: label batch mismatch");
  const LabelMap small = (labels.height() == fs.h() && labels.width() == fs.w())
                             ? labels
                             : labels.resized_nearest(fs.h(), fs.w());
  const std::size_t batch = fs.n(), plane = fs.plane(), ds = fs.c(), dt = ft.c();

  std::size_t valid = 0;
  for (std::size_t i = 0; i < small.size(); ++i) valid += small.ignored(i) ? 0 : 1;
  if (valid == 0) throw EmptyBatchError("ifv_loss: no labeled pixel at feature resolution");
  const double inv_valid = 1.0 / static_cast<double>(valid);

  std::vector<double> per_image(batch, 0.0);
  Tensorf grad(fs.shape());
#pragma omp parallel for schedule(static)
  for (std::size_t b = 0; b < batch; ++b) {
    const std::int32_t* lab = small.values().data() + b * plane;
    const float* s = fs.plane_ptr(b, 0);
    const float* t = ft.plane_ptr(b, 0);

    // Class membership at this image.
    std::vector<std::int32_t> classes;
    for (std::size_t i = 0; i < plane; ++i) {
      if (lab[i] == small.ignore_id()) continue;
      if (std::find(classes.begin(), classes.end(), lab[i]) == classes.end()) classes.push_back(lab[i]);
    }
    auto slot = [&](std::int32_t c) {
      return static_cast<std::size_t>(std::find(classes.begin(), classes.end(), c) - classes.begin());
    };
    const std::size_t k = classes.size();
    std::vector<double> proto_s(k * ds, 0.0), proto_t(k * dt, 0.0);
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < plane; ++i) {
      if (lab[i] == small.ignore_id()) continue;
      const std::size_t c = slot(lab[i]);
      ++count[c];
      for (std::size_t d = 0; d < ds; ++d) proto_s[c * ds + d] += s[d * plane + i];
      for (std::size_t d = 0; d < dt; ++d) proto_t[c * dt + d] += t[d * plane + i];
    }
    std::vector<double> norm_ps(k), norm_pt(k);
    for (std::size_t c = 0; c < k; ++c) {
      double qs = 0, qt = 0;
      for (std::size_t d = 0; d < ds; ++d) qs += (proto_s[c * ds + d] /= count[c]) * proto_s[c * ds + d];
      for (std::size_t d = 0; d < dt; ++d) qt += (proto_t[c * dt + d] /= count[c]) * proto_t[c * dt + d];
      norm_ps[c] = std::sqrt(qs);
      norm_pt[c] = std::sqrt(qt);
    }

    // Per-pixel variations and dL/dv_s.
    std::vector<double> gv(plane, 0.0), vs(plane, 0.0), norm_fs(plane, 0.0);
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
      if (lab[i] == small.ignore_id()) continue;
      const std::size_t c = slot(lab[i]);
      double dot_s = 0, nfs = 0, dot_t = 0, nft = 0;
      for (std::size_t d = 0; d < ds; ++d) {
        dot_s += s[d * plane + i] * proto_s[c * ds + d];
        nfs += static_cast<double>(s[d * plane + i]) * s[d * plane + i];
      }
      for (std::size_t d = 0; d < dt; ++d) {
        dot_t += t[d * plane + i] * proto_t[c * dt + d];
        nft += static_cast<double>(t[d * plane + i]) * t[d * plane + i];
      }
      nfs = std::sqrt(nfs);
      nft = std::sqrt(nft);
      const double v_s = (nfs > 0 && norm_ps[c] > 0) ? dot_s / (nfs * norm_ps[c]) : 0.0;
      const double v_t = (nft > 0 && norm_pt[c] > 0) ? dot_t / (nft * norm_pt[c]) : 0.0;
      const double diff = v_s - v_t;
      acc += diff * diff;
      vs[i] = v_s;
      norm_fs[i] = nfs;
      gv[i] = 2.0 * diff * inv_valid;
    }
    per_image[b] = acc;

    // d cos(a, P)/da = (P/|P| - cos * a/|a|) / |a|,  d cos(a, P)/dP = (a/|a| - cos * P/|P|) / |P|.
    std::vector<double> dproto(k * ds, 0.0);
    float* g = grad.plane_ptr(b, 0);
    for (std::size_t i = 0; i < plane; ++i) {
      if (lab[i] == small.ignore_id() || gv[i] == 0.0) continue;
      const std::size_t c = slot(lab[i]);
      if (norm_fs[i] == 0 || norm_ps[c] == 0) continue;
      for (std::size_t d = 0; d < ds; ++d) {
        const double a_hat = s[d * plane + i] / norm_fs[i];
        const double p_hat = proto_s[c * ds + d] / norm_ps[c];
        g[d * plane + i] += static_cast<float>(gv[i] * (p_hat - vs[i] * a_hat) / norm_fs[i]);
        dproto[c * ds + d] += gv[i] * (a_hat - vs[i] * p_hat) / norm_ps[c];
      }
    }
    for (std::size_t i = 0; i < plane; ++i) {
      if (lab[i] == small.ignore_id()) continue;
      const std::size_t c = slot(lab[i]);
      const double share = 1.0 / static_cast<double>(count[c]);
      for (std::size_t d = 0; d < ds; ++d) {
        g[d * plane + i] += static_cast<float>(dproto[c * ds + d] * share);
      }
    }
  }
  return {{term::kIntraClassVariation, ordered_sum(per_image) * inv_valid}, std::move(grad)};
}

CompositeLossReport compose(std::span<const WeightedTerm> terms) {
  CompositeLossReport report;
  for (const auto& t : terms) {
    if (!(t.weight >= 0.0)) throw ValidationError("compose: weight for '" + t.loss.term + "' is negative");
    const double weighted = t.weight * t.loss.value;
    report.per_term.push_back({t.loss.term, t.loss.value, t.weight, weighted});
    report.total += weighted;
  }
  return report;
}

}  // namespace kdseg
