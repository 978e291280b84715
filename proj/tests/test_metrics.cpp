#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "kdseg/metrics.hpp"
#include "support.hpp"

using namespace kdseg;

namespace {

LabelMap random_labels(std::size_t h, std::size_t w, int classes, double ignore_share, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> cls(0, classes - 1);
  std::bernoulli_distribution ign(ignore_share);
  std::vector<std::int32_t> v(h * w);
  for (auto& x : v) x = ign(rng) ? 255 : cls(rng);
  return LabelMap(1, h, w, v);
}

// Independent oracle: explicit per-pixel loop and IoU from raw counts.
double oracle_miou(const LabelMap& pred, const LabelMap& truth, int classes) {
  std::vector<std::vector<long>> m(classes, std::vector<long>(classes, 0));
  for (std::size_t y = 0; y < truth.height(); ++y)
    for (std::size_t x = 0; x < truth.width(); ++x) {
      const int t = truth.at(0, y, x);
      if (t == 255) continue;
      m[t][pred.at(0, y, x)] += 1;
    }
  double sum = 0;
  int n = 0;
  for (int c = 0; c < classes; ++c) {
    long row = 0, col = 0;
    for (int k = 0; k < classes; ++k) {
      row += m[c][k];
      col += m[k][c];
    }
    const long denom = row + col - m[c][c];
    if (denom == 0) continue;
    sum += static_cast<double>(m[c][c]) / static_cast<double>(denom);
    ++n;
  }
  return 100.0 * sum / n;
}

}  // namespace

TEST_CASE("perfect prediction adds to the diagonal") {
  const LabelMap l(1, 2, 5, 3);
  const auto cm = accumulate(ConfusionMatrix(5), l, l);
  CHECK(cm.at(3, 3) == 10);
  CHECK(cm.total() == 10);
  CHECK(miou(cm) == 100.0);
}

TEST_CASE("ignored truth leaves the matrix unchanged") {
  const LabelMap truth(1, 4, 4, 255);
  const LabelMap pred(1, 4, 4, 1);
  const auto cm = accumulate(ConfusionMatrix(3), pred, truth);
  CHECK(cm == ConfusionMatrix(3));
}

TEST_CASE("accumulate matches a per-pixel oracle") {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    const auto truth = random_labels(16, 16, 5, 0.1, rng);
    const auto pred = random_labels(16, 16, 5, 0.0, rng);
    const auto cm = accumulate(ConfusionMatrix(5), pred, truth);
    CHECK(cm == reference::accumulate(ConfusionMatrix(5), pred, truth));
    CHECK(miou(cm) == oracle_miou(pred, truth, 5));
  }
}

TEST_CASE("hand-computed mIoU") {
  ConfusionMatrix cm(2);
  cm.at(0, 0) = 50;
  cm.at(0, 1) = 50;
  cm.at(1, 1) = 100;
  CHECK(miou(cm) == doctest::Approx(100.0 * (0.5 + 100.0 / 150.0) / 2).epsilon(1e-12));
  CHECK(miou(cm) == doctest::Approx(58.33).epsilon(1e-4));

  ConfusionMatrix three(3);
  three.at(0, 0) = 50;
  three.at(0, 1) = 50;
  three.at(1, 1) = 100;
  CHECK(miou(three) == miou(cm));
  CHECK_FALSE(per_class_iou(three)[2].has_value());
}

TEST_CASE("constant wrong prediction scores zero") {
  const auto cm = accumulate(ConfusionMatrix(2), LabelMap(1, 3, 3, 0), LabelMap(1, 3, 3, 1));
  CHECK(miou(cm) == 0.0);
}

TEST_CASE("empty matrix has no mIoU") { CHECK_THROWS_AS(miou(ConfusionMatrix(4)), EmptyBatchError); }

TEST_CASE("accumulate rejects mismatched shapes and bad ids") {
  CHECK_THROWS_AS(accumulate(ConfusionMatrix(3), LabelMap(1, 2, 2, 0), LabelMap(1, 2, 3, 0)), ShapeError);
  CHECK_THROWS_AS(accumulate(ConfusionMatrix(3), LabelMap(1, 2, 2, 3), LabelMap(1, 2, 2, 0)), LabelRangeError);
}

TEST_CASE("mIoU is invariant under a consistent relabelling") {
  std::mt19937_64 rng(7);
  const std::vector<std::int32_t> perm{3, 0, 4, 1, 2};
  for (int trial = 0; trial < 10; ++trial) {
    const auto truth = random_labels(12, 12, 5, 0.05, rng);
    const auto pred = random_labels(12, 12, 5, 0.0, rng);
    auto relabel = [&](const LabelMap& l) {
      auto v = l.values();
      for (auto& x : v)
        if (x != 255) x = perm[x];
      return LabelMap(1, l.height(), l.width(), v);
    };
    const double a = miou(accumulate(ConfusionMatrix(5), pred, truth));
    const double b = miou(accumulate(ConfusionMatrix(5), relabel(pred), relabel(truth)));
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
  }
}

TEST_CASE("merging shard matrices equals accumulating the whole") {
  std::mt19937_64 rng(9);
  ConfusionMatrix whole(5), merged(5);
  for (int shard = 0; shard < 6; ++shard) {
    const auto truth = random_labels(8, 8, 5, 0.1, rng);
    const auto pred = random_labels(8, 8, 5, 0.0, rng);
    whole = accumulate(std::move(whole), pred, truth);
    merged.merge(accumulate(ConfusionMatrix(5), pred, truth));
  }
  CHECK(whole == merged);
}

TEST_CASE("entropy reference values") {
  SUBCASE("one-hot") {
    Tensorf p(1, 4, 1, 1);
    p[2] = 1;
    CHECK(shannon_entropy(ProbabilityMap(p))[0] == 0.0);
  }
  SUBCASE("uniform over 19 classes is ln 19") {
    Tensorf p(1, 19, 1, 1, 1.0f / 19);
    CHECK(shannon_entropy(ProbabilityMap(p))[0] == doctest::Approx(std::log(19.0)).epsilon(1e-7));
    CHECK(std::log(19.0) == doctest::Approx(2.9444).epsilon(1e-4));
  }
  SUBCASE("two-point uniform is ln 2") {
    Tensorf p(1, 5, 1, 1);
    p[0] = 0.5f;
    p[1] = 0.5f;
    CHECK(shannon_entropy(ProbabilityMap(p))[0] == doctest::Approx(std::log(2.0)).epsilon(1e-7));
  }
}

TEST_CASE("non-uniform distributions stay below ln C") {
  const auto z = testing::random_tensor(1, 6, 16, 16, 23);
  const auto h = shannon_entropy(softmax(LogitMap(z), Temperature(1)));
  for (double v : h) {
    CHECK(v >= 0.0);
    CHECK(v < std::log(6.0));
  }
}

TEST_CASE("entropy histogram binning") {
  EntropyHistogram hist(4, 8);
  CHECK(hist.upper() == doctest::Approx(std::log(4.0)));
  hist.add(0.0);
  hist.add(std::log(4.0));
  hist.add(std::log(4.0) * 0.55);
  CHECK(hist.counts()[0] == 1);
  CHECK(hist.counts()[7] == 1);
  CHECK(hist.counts()[4] == 1);
  CHECK(hist.total() == 3);
  double sum = 0;
  for (double s : hist.shares()) sum += s;
  CHECK(sum == doctest::Approx(1.0));
  EntropyHistogram other(4, 8);
  other.add(0.1);
  hist.merge(other);
  CHECK(hist.counts()[0] == 2);
}

TEST_CASE("argmax and table export") {
  Tensorf z(1, 3, 1, 2);
  z(0, 2, 0, 0) = 5;
  z(0, 1, 0, 1) = 1;
  const auto l = argmax(LogitMap(z));
  CHECK(l.values() == std::vector<std::int32_t>{2, 1});

  ConfusionMatrix cm(2);
  cm.at(0, 1) = 4;
  std::ostringstream os;
  write_confusion_table(os, cm);
  CHECK(os.str().find('4') != std::string::npos);
}
