#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "kdseg/losses.hpp"
#include "kdseg/metrics.hpp"
#include "support.hpp"

using namespace kdseg;
using testing::numeric_gradient;
using testing::random_tensor;
using testing::relative_error;

namespace {

LabelMap random_labels(std::size_t b, std::size_t h, std::size_t w, int classes, std::uint64_t seed,
                       double ignore_share = 0.0) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> cls(0, classes - 1);
  std::bernoulli_distribution ign(ignore_share);
  std::vector<std::int32_t> v(b * h * w);
  for (auto& x : v) x = ign(rng) ? 255 : cls(rng);
  return LabelMap(b, h, w, v);
}

double mean_entropy(const Tensorf& zt, double tau) {
  const auto h = shannon_entropy(softmax(LogitMap(zt), Temperature(tau)));
  double s = 0;
  for (double v : h) s += v;
  return s / static_cast<double>(h.size());
}

std::vector<double> column(const Tensorf& f, std::size_t b, std::size_t y, std::size_t x) {
  std::vector<double> v(f.c());
  for (std::size_t d = 0; d < f.c(); ++d) v[d] = f(b, d, y, x);
  return v;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / std::sqrt(na * nb);
}

// Affinity oracle without pooling: one double loop over position pairs.
double pairwise_oracle(const Tensorf& s, const Tensorf& t) {
  double total = 0;
  const std::size_t hw = s.h() * s.w();
  for (std::size_t b = 0; b < s.n(); ++b) {
    for (std::size_t i = 0; i < hw; ++i)
      for (std::size_t j = 0; j < hw; ++j) {
        const auto si = column(s, b, i / s.w(), i % s.w()), sj = column(s, b, j / s.w(), j % s.w());
        const auto ti = column(t, b, i / t.w(), i % t.w()), tj = column(t, b, j / t.w(), j % t.w());
        const double d = cosine(si, sj) - cosine(ti, tj);
        total += d * d;
      }
  }
  return total / static_cast<double>(s.n() * hw * hw);
}

double ifv_oracle(const Tensorf& s, const Tensorf& t, const LabelMap& l) {
  double total = 0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < s.n(); ++b) {
    for (std::size_t y = 0; y < s.h(); ++y)
      for (std::size_t x = 0; x < s.w(); ++x) {
        const int c = l.at(b, y, x);
        if (c == 255) continue;
        std::vector<double> ps(s.c(), 0), pt(t.c(), 0);
        double n = 0;
        for (std::size_t yy = 0; yy < s.h(); ++yy)
          for (std::size_t xx = 0; xx < s.w(); ++xx) {
            if (l.at(b, yy, xx) != c) continue;
            n += 1;
            for (std::size_t d = 0; d < s.c(); ++d) ps[d] += s(b, d, yy, xx);
            for (std::size_t d = 0; d < t.c(); ++d) pt[d] += t(b, d, yy, xx);
          }
        for (auto& v : ps) v /= n;
        for (auto& v : pt) v /= n;
        const double diff = cosine(column(s, b, y, x), ps) - cosine(column(t, b, y, x), pt);
        total += diff * diff;
        ++count;
      }
  }
  return total / static_cast<double>(count);
}

}  // namespace

TEST_CASE("cross entropy reference values") {
  SUBCASE("uniform output over 150 classes is ln 150") {
    const auto r = cross_entropy(LogitMap(Tensorf(1, 150, 2, 2)), LabelMap(1, 2, 2, 7));
    CHECK(r.loss.value == doctest::Approx(std::log(150.0)).epsilon(1e-9));
    CHECK(r.loss.value == doctest::Approx(5.0106).epsilon(1e-4));
  }
  SUBCASE("confident correct logit gives almost zero") {
    Tensorf z(1, 3, 1, 1);
    z[0] = 50;
    CHECK(cross_entropy(LogitMap(z), LabelMap(1, 1, 1, 0)).loss.value < 1e-20);
  }
  SUBCASE("all pixels ignored is an empty batch") {
    CHECK_THROWS_AS(cross_entropy(LogitMap(Tensorf(1, 3, 2, 2)), LabelMap(1, 2, 2, 255)), EmptyBatchError);
  }
}

TEST_CASE("cross entropy ignores logits at ignored pixels") {
  const auto labels = random_labels(2, 5, 5, 4, 3, 0.3);
  auto z = random_tensor(2, 4, 5, 5, 1);
  const auto a = cross_entropy(LogitMap(z), labels);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t y = 0; y < 5; ++y)
      for (std::size_t x = 0; x < 5; ++x)
        if (labels.at(b, y, x) == 255)
          for (std::size_t c = 0; c < 4; ++c) z(b, c, y, x) = 1000.0f * static_cast<float>(c + 1);
  const auto b = cross_entropy(LogitMap(z), labels);
  CHECK(a.loss.value == b.loss.value);
}

TEST_CASE("pixel-wise distillation reference values") {
  SUBCASE("hand evaluation: teacher (ln 2, 0), student (0, 0)") {
    Tensorf zt(1, 2, 1, 1);
    zt[0] = static_cast<float>(std::log(2.0));
    const auto r = pixelwise_distillation(LogitMap(Tensorf(1, 2, 1, 1)), LogitMap(zt), Temperature(1));
    CHECK(r.loss.value == doctest::Approx(std::log(2.0)).epsilon(1e-7));
  }
  SUBCASE("uniform teacher over 19 classes at tau 2 gives 4 ln 19") {
    const Tensorf z(1, 19, 3, 3);
    const auto r = pixelwise_distillation(LogitMap(z), LogitMap(z), Temperature(2));
    CHECK(r.loss.value == doctest::Approx(4 * std::log(19.0)).epsilon(1e-9));
    CHECK(r.loss.value == doctest::Approx(11.78).epsilon(1e-3));
  }
  SUBCASE("equal inputs give tau^2 times the teacher entropy") {
    const auto z = random_tensor(2, 5, 4, 4, 8, 2.0);
    for (double tau : {0.5, 1.0, 3.0}) {
      const auto r = pixelwise_distillation(LogitMap(z), LogitMap(z), Temperature(tau));
      CHECK(r.loss.value == doctest::Approx(tau * tau * mean_entropy(z, tau)).epsilon(1e-6));
    }
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(pixelwise_distillation(LogitMap(Tensorf(1, 3, 2, 2)), LogitMap(Tensorf(1, 3, 2, 3)),
                                           Temperature(1)),
                    ShapeError);
  }
}

TEST_CASE("pixel-wise distillation is bounded below by the teacher entropy") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto zt = random_tensor(1, 6, 4, 4, seed, 3.0);
    const auto zs = random_tensor(1, 6, 4, 4, seed + 100, 3.0);
    const double tau = 1.0 + static_cast<double>(seed % 4);
    const double bound = tau * tau * mean_entropy(zt, tau);
    CHECK(pixelwise_distillation(LogitMap(zs), LogitMap(zt), Temperature(tau)).loss.value > bound);
  }
}

TEST_CASE("pixel-wise distillation gradient goes to the student only") {
  const auto zs = random_tensor(1, 4, 5, 5, 1);
  const auto zt = random_tensor(1, 4, 5, 5, 2);
  const auto a = pixelwise_distillation(LogitMap(zs), LogitMap(zt), Temperature(2));
  // The returned gradient has the student's shape; the teacher tensor is
  // only read and is unchanged by the call.
  CHECK(a.grad.shape() == zs.shape());
  const auto zt_copy = zt;
  (void)pixelwise_distillation(LogitMap(zs), LogitMap(zt), Temperature(2));
  CHECK(zt == zt_copy);
}

TEST_CASE("pairwise affinity loss") {
  SUBCASE("identical and scaled student features give zero") {
    const auto f = random_tensor(2, 6, 6, 6, 4);
    CHECK(pairwise_affinity_loss(FeatureMap(f, "s"), FeatureMap(f, "t"), 2).loss.value == doctest::Approx(0.0));
    Tensorf scaled = f;
    for (auto& v : scaled.storage()) v *= 3.0f;
    CHECK(pairwise_affinity_loss(FeatureMap(scaled, "s"), FeatureMap(f, "t"), 2).loss.value ==
          doctest::Approx(0.0));
  }
  SUBCASE("orthogonal teacher, parallel student on a 2x1 map") {
    Tensorf t(1, 2, 2, 1), s(1, 2, 2, 1);
    t(0, 0, 0, 0) = 1;
    t(0, 1, 1, 0) = 1;
    s(0, 0, 0, 0) = 1;
    s(0, 0, 1, 0) = 2;
    const double v = pairwise_affinity_loss(FeatureMap(s, "s"), FeatureMap(t, "t"), 1).loss.value;
    CHECK(v == doctest::Approx(pairwise_oracle(s, t)).epsilon(1e-12));
    CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("matches the brute-force oracle on random features of different widths") {
    const auto s = random_tensor(2, 3, 4, 3, 5);
    const auto t = random_tensor(2, 7, 4, 3, 6);
    const double v = pairwise_affinity_loss(FeatureMap(s, "s"), FeatureMap(t, "t"), 1).loss.value;
    CHECK(v == doctest::Approx(pairwise_oracle(s, t)).epsilon(1e-6));
  }
  SUBCASE("invariant to positive global scaling") {
    const auto s = random_tensor(1, 4, 6, 6, 7);
    const auto t = random_tensor(1, 5, 6, 6, 8);
    Tensorf s2 = s, t2 = t;
    for (auto& v : s2.storage()) v *= 0.01f;
    for (auto& v : t2.storage()) v *= 40.0f;
    const double a = pairwise_affinity_loss(FeatureMap(s, "s"), FeatureMap(t, "t"), 2).loss.value;
    const double b = pairwise_affinity_loss(FeatureMap(s2, "s"), FeatureMap(t2, "t"), 2).loss.value;
    CHECK(std::abs(a - b) <= 1e-5);
  }
  SUBCASE("spatial mismatch after pooling") {
    CHECK_THROWS_AS(pairwise_affinity_loss(FeatureMap(Tensorf(1, 2, 4, 4, 1), "s"),
                                           FeatureMap(Tensorf(1, 2, 8, 8, 1), "t"), 2),
                    ShapeError);
  }
}

TEST_CASE("intra-class feature variation loss") {
  SUBCASE("identical features give zero") {
    const auto f = random_tensor(1, 4, 5, 5, 9);
    CHECK(ifv_loss(FeatureMap(f, "s"), FeatureMap(f, "t"), random_labels(1, 5, 5, 3, 1)).loss.value ==
          doctest::Approx(0.0));
  }
  SUBCASE("constant features and one class give zero") {
    const Tensorf s(1, 3, 4, 4, 2.0f), t(1, 5, 4, 4, -1.0f);
    CHECK(ifv_loss(FeatureMap(s, "s"), FeatureMap(t, "t"), LabelMap(1, 4, 4, 1)).loss.value ==
          doctest::Approx(0.0));
  }
  SUBCASE("2x2 map with two classes matches the brute-force oracle") {
    const auto s = random_tensor(1, 3, 2, 2, 10);
    const auto t = random_tensor(1, 4, 2, 2, 11);
    const LabelMap l(1, 2, 2, std::vector<std::int32_t>{0, 1, 1, 0});
    const double v = ifv_loss(FeatureMap(s, "s"), FeatureMap(t, "t"), l).loss.value;
    CHECK(v == doctest::Approx(ifv_oracle(s, t, l)).epsilon(1e-6));
    CHECK(v > 0.0);
  }
  SUBCASE("larger random case with ignored pixels matches the oracle") {
    const auto s = random_tensor(2, 5, 6, 6, 12);
    const auto t = random_tensor(2, 3, 6, 6, 13);
    const auto l = random_labels(2, 6, 6, 4, 14, 0.2);
    const double v = ifv_loss(FeatureMap(s, "s"), FeatureMap(t, "t"), l).loss.value;
    CHECK(v == doctest::Approx(ifv_oracle(s, t, l)).epsilon(1e-6));
  }
  SUBCASE("labels are resampled to the feature resolution") {
    const auto s = random_tensor(1, 3, 2, 2, 15);
    const auto t = random_tensor(1, 3, 2, 2, 16);
    const LabelMap full(1, 4, 4, std::vector<std::int32_t>{0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 0, 0, 2, 2, 0, 0});
    const LabelMap small(1, 2, 2, std::vector<std::int32_t>{0, 1, 2, 0});
    CHECK(ifv_loss(FeatureMap(s, "s"), FeatureMap(t, "t"), full).loss.value ==
          ifv_loss(FeatureMap(s, "s"), FeatureMap(t, "t"), small).loss.value);
  }
  SUBCASE("invariant to positive global scaling") {
    const auto s = random_tensor(1, 4, 5, 5, 17);
    const auto t = random_tensor(1, 4, 5, 5, 18);
    const auto l = random_labels(1, 5, 5, 3, 19);
    Tensorf s2 = s;
    for (auto& v : s2.storage()) v *= 25.0f;
    CHECK(std::abs(ifv_loss(FeatureMap(s, "s"), FeatureMap(t, "t"), l).loss.value -
                   ifv_loss(FeatureMap(s2, "s"), FeatureMap(t, "t"), l).loss.value) <= 1e-5);
  }
  SUBCASE("no labeled pixel is an empty batch") {
    CHECK_THROWS_AS(ifv_loss(FeatureMap(Tensorf(1, 2, 2, 2, 1), "s"), FeatureMap(Tensorf(1, 2, 2, 2, 1), "t"),
                             LabelMap(1, 2, 2, 255)),
                    EmptyBatchError);
  }
}

TEST_CASE("gradients match central differences") {
  constexpr double kTol = 1e-3;
  const auto labels = random_labels(1, 5, 5, 4, 21, 0.1);
  const auto zt = random_tensor(1, 4, 5, 5, 22, 2.0);
  const auto zs = random_tensor(1, 4, 5, 5, 23, 2.0);

  SUBCASE("cross entropy") {
    const auto r = cross_entropy(LogitMap(zs), labels);
    const auto n = numeric_gradient<float>(
        [&](const Tensorf& z) { return cross_entropy(LogitMap(z), labels).loss.value; }, zs);
    CHECK(relative_error(r.grad, n) < kTol);
  }
  SUBCASE("pixel-wise distillation") {
    for (double tau : {1.0, 3.0, 8.0}) {
      CAPTURE(tau);
      const auto r = pixelwise_distillation(LogitMap(zs), LogitMap(zt), Temperature(tau));
      const auto n = numeric_gradient<float>(
          [&](const Tensorf& z) {
            return pixelwise_distillation(LogitMap(z), LogitMap(zt), Temperature(tau)).loss.value;
          },
          zs);
      CHECK(relative_error(r.grad, n) < kTol);
    }
  }
  SUBCASE("pairwise affinity") {
    const auto ft = random_tensor(1, 4, 5, 5, 24);
    for (std::size_t pool : {1, 2}) {
      CAPTURE(pool);
      const auto r = pairwise_affinity_loss(FeatureMap(zs, "s"), FeatureMap(ft, "t"), pool);
      const auto n = numeric_gradient<float>(
          [&](const Tensorf& f) {
            return pairwise_affinity_loss(FeatureMap(f, "s"), FeatureMap(ft, "t"), pool).loss.value;
          },
          zs);
      CHECK(relative_error(r.grad, n) < kTol);
    }
  }
  SUBCASE("intra-class variation") {
    const auto ft = random_tensor(1, 4, 5, 5, 25);
    const auto r = ifv_loss(FeatureMap(zs, "s"), FeatureMap(ft, "t"), labels);
    const auto n = numeric_gradient<float>(
        [&](const Tensorf& f) { return ifv_loss(FeatureMap(f, "s"), FeatureMap(ft, "t"), labels).loss.value; },
        zs);
    CHECK(relative_error(r.grad, n) < kTol);
  }
}

TEST_CASE("compose") {
  SUBCASE("weighted sum") {
    const std::vector<WeightedTerm> t{{{"ce", 1.0}, 1.0}, {{"pi", 2.0}, 0.1}};
    const auto r = compose(t);
    CHECK(r.total == doctest::Approx(1.2));
    REQUIRE(r.find("pi") != nullptr);
    CHECK(r.find("pi")->weighted == doctest::Approx(0.2));
    CHECK(r.find("ho") == nullptr);
  }
  SUBCASE("zero weights leave cross entropy alone") {
    const std::vector<WeightedTerm> t{{{"ce", 0.7}, 1.0}, {{"pi", 3.0}, 0.0}, {{"pa", 5.0}, 0.0}};
    CHECK(compose(t).total == 0.7);
  }
  SUBCASE("empty") { CHECK(compose({}).total == 0.0); }
  SUBCASE("negative weight") {
    const std::vector<WeightedTerm> t{{{"ce", 1.0}, -1.0}};
    CHECK_THROWS_AS(compose(t), ValidationError);
  }
}
