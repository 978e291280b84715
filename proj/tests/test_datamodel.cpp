#include <cmath>
#include <limits>

#include "doctest.h"
#include "kdseg/datamodel.hpp"
#include "kdseg/metrics.hpp"
#include "support.hpp"

using namespace kdseg;

namespace {

Tensorf pixel(std::initializer_list<float> z) {
  Tensorf t(1, z.size(), 1, 1);
  std::size_t i = 0;
  for (float v : z) t[i++] = v;
  return t;
}

}  // namespace

TEST_CASE("softmax of equal logits is uniform") {
  const auto p = softmax(LogitMap(pixel({0, 0, 0})), Temperature(1));
  for (std::size_t c = 0; c < 3; ++c) CHECK(p.values()[c] == doctest::Approx(1.0 / 3).epsilon(1e-7));
}

TEST_CASE("softmax of (ln 2, 0) is (2/3, 1/3)") {
  const auto p = softmax(LogitMap(pixel({static_cast<float>(std::log(2.0)), 0})), Temperature(1));
  CHECK(p.values()[0] == doctest::Approx(2.0 / 3).epsilon(1e-6));
  CHECK(p.values()[1] == doctest::Approx(1.0 / 3).epsilon(1e-6));
}

TEST_CASE("softmax is invariant under per-pixel shifts") {
  const auto z = testing::random_tensor(2, 5, 4, 3, 11);
  Tensorf shifted = z;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> k(-50, 50);
  for (std::size_t b = 0; b < z.n(); ++b)
    for (std::size_t y = 0; y < z.h(); ++y)
      for (std::size_t x = 0; x < z.w(); ++x) {
        const float s = k(rng);
        for (std::size_t c = 0; c < z.c(); ++c) shifted(b, c, y, x) += s;
      }
  const auto a = softmax(LogitMap(z), Temperature(1.5));
  const auto b = softmax(LogitMap(shifted), Temperature(1.5));
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(std::abs(a.values()[i] - b.values()[i]) <= 1e-6);
}

TEST_CASE("softmax stays finite for logits up to 1e4 and sums to one") {
  auto z = testing::random_tensor(1, 7, 8, 8, 5, 4e3);
  z[0] = 1e4f;
  z[1] = -1e4f;
  const auto p = softmax(LogitMap(z), Temperature(1));
  const auto& v = p.values();
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(std::isfinite(v[i]));
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) {
      double s = 0;
      for (std::size_t c = 0; c < 7; ++c) s += v(0, c, y, x);
      CHECK(std::abs(s - 1.0) <= 1e-6);
    }
}

TEST_CASE("higher temperature never lowers per-pixel entropy") {
  const auto z = testing::random_tensor(2, 6, 10, 10, 17, 3.0);
  const std::vector<double> taus{0.5, 1, 2, 4, 8, 16};
  std::vector<double> prev;
  for (double tau : taus) {
    const auto h = shannon_entropy(softmax(LogitMap(z), Temperature(tau)));
    if (!prev.empty())
      for (std::size_t i = 0; i < h.size(); ++i) CHECK(h[i] >= prev[i] - 1e-6);
    prev = h;
  }
}

TEST_CASE("non-finite logits and bad temperatures are rejected") {
  auto z = pixel({0, 1});
  z[1] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(LogitMap{z}, NonFiniteError);
  z[1] = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(LogitMap{z}, NonFiniteError);
  CHECK_THROWS_AS(Temperature(0), ValidationError);
  CHECK_THROWS_AS(Temperature(-1), ValidationError);
  CHECK_THROWS_AS(LogitMap{pixel({1})}, ValidationError);
}

TEST_CASE("validate_batch") {
  const LogitMap logits(testing::random_tensor(2, 19, 8, 8, 1));
  std::vector<std::int32_t> ids(2 * 8 * 8);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::int32_t>(i % 19);

  SUBCASE("matching shapes and ids pass") { CHECK_NOTHROW(validate_batch(logits, LabelMap(2, 8, 8, ids))); }
  SUBCASE("ignore id is accepted") {
    ids[3] = 255;
    CHECK_NOTHROW(validate_batch(logits, LabelMap(2, 8, 8, ids)));
  }
  SUBCASE("id equal to C is out of range") {
    ids[5] = 19;
    CHECK_THROWS_AS(validate_batch(logits, LabelMap(2, 8, 8, ids)), LabelRangeError);
  }
  SUBCASE("negative id is out of range") {
    ids[5] = -1;
    CHECK_THROWS_AS(validate_batch(logits, LabelMap(2, 8, 8, ids)), LabelRangeError);
  }
  SUBCASE("spatial mismatch") { CHECK_THROWS_AS(validate_batch(logits, LabelMap(2, 8, 7, 0)), ShapeError); }
  SUBCASE("batch mismatch") { CHECK_THROWS_AS(validate_batch(logits, LabelMap(1, 8, 8, 0)), ShapeError); }
}

TEST_CASE("loss weights must be non-negative") {
  LossWeights w;
  CHECK_NOTHROW(w.validate());
  CHECK_FALSE(w.any_distillation());
  w.ifv = 1e-2;
  CHECK(w.any_distillation());
  w.pa = -1;
  CHECK_THROWS_AS(w.validate(), ValidationError);
}

TEST_CASE("nearest label resampling picks floor(dst * in / out)") {
  std::vector<std::int32_t> ids{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15};
  const LabelMap l(1, 4, 4, ids);
  const auto r = l.resized_nearest(2, 2);
  CHECK(r.at(0, 0, 0) == 0);
  CHECK(r.at(0, 0, 1) == 2);
  CHECK(r.at(0, 1, 0) == 8);
  CHECK(r.at(0, 1, 1) == 10);
}
