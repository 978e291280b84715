#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include "json.hpp"

#include "kdseg/analysis.hpp"
#include "kdseg/error.hpp"
#include "support.hpp"

using namespace kdseg;

namespace {

// 16x16 logit maps over C classes: a share of pixels is one-hot sharp
// (winner +5, rest -5); the others are uniform in [-5, 5].
LogitMap sharp_logits(std::size_t classes, double sharp_share, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> cls(0, classes - 1);
  Tensorf t(1, classes, 16, 16);
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x) {
      if (coin(rng) < sharp_share) {
        const std::size_t w = cls(rng);
        for (std::size_t c = 0; c < classes; ++c) t(0, c, y, x) = c == w ? 5.0f : -5.0f;
      } else {
        for (std::size_t c = 0; c < classes; ++c) t(0, c, y, x) = static_cast<float>(u(rng));
      }
    }
  return LogitMap(std::move(t));
}

LogitSource sharp_source(std::size_t classes, double share) {
  return [=](std::size_t i) { return std::pair<std::string, LogitMap>("img" + std::to_string(i), sharp_logits(classes, share, i)); };
}

}  // namespace

TEST_CASE("default study configuration") {
  const EntropyStudyConfig cfg;
  CHECK(cfg.temperatures == std::vector<double>{1, 2, 4, 8, 16});
  CHECK(cfg.sample_count == 800);
  CHECK(cfg.bins == 64);
  CHECK(cfg.near_max_tolerance == 0.1);
  EntropyStudyConfig bad;
  bad.temperatures = {};
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad.temperatures = {1, 0};
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = EntropyStudyConfig{};
  bad.sample_count = 0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("sample_without_replacement") {
  const auto a = sample_without_replacement(100, 30, 9);
  CHECK(a == sample_without_replacement(100, 30, 9));
  CHECK(a != sample_without_replacement(100, 30, 10));
  CHECK(std::set<std::size_t>(a.begin(), a.end()).size() == 30);
  CHECK(*std::max_element(a.begin(), a.end()) < 100);
  auto all = sample_without_replacement(20, 20, 1);
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 20; ++i) CHECK(all[i] == i);
  CHECK(sample_without_replacement(5, 0, 1).empty());
  CHECK_THROWS_AS(sample_without_replacement(5, 6, 1), RangeError);
}

TEST_CASE("sharp logits spike at zero entropy and flatten at high temperature") {
  EntropyStudyConfig cfg;
  cfg.sample_count = 40;
  const EntropyReport r = entropy_study(200, sharp_source(19, 0.7), cfg);
  REQUIRE(r.series.size() == 5);
  CHECK(r.class_count == 19);
  CHECK(r.sample_ids.size() == 40);
  CHECK(r.series[0].histogram.total() == 40u * 256u);
  CHECK(r.series[0].lowest_bin_share() >= 0.6);
  CHECK(r.series[4].near_max_share() >= 0.99);
  // Mean entropy grows with temperature.
  auto mean_entropy = [](const TemperatureSeries& s) {
    double acc = 0.0;
    for (std::size_t i = 0; i < s.histogram.bins(); ++i)
      acc += static_cast<double>(s.histogram.counts()[i]) * 0.5 * (s.histogram.bin_lower(i) + s.histogram.bin_upper(i));
    return acc / static_cast<double>(s.histogram.total());
  };
  for (std::size_t k = 1; k < r.series.size(); ++k) {
    CHECK(mean_entropy(r.series[k]) > mean_entropy(r.series[k - 1]));
    CHECK(r.series[k].lowest_bin_share() <= r.series[k - 1].lowest_bin_share());
    CHECK(r.series[k].near_max_share() >= r.series[k - 1].near_max_share());
  }
}

TEST_CASE("entropy study is reproducible and seed-dependent") {
  EntropyStudyConfig cfg;
  cfg.sample_count = 10;
  cfg.temperatures = {1, 4};
  const EntropyReport a = entropy_study(50, sharp_source(5, 0.5), cfg);
  const EntropyReport b = entropy_study(50, sharp_source(5, 0.5), cfg);
  CHECK(a.sample_ids == b.sample_ids);
  for (std::size_t k = 0; k < a.series.size(); ++k) {
    CHECK(a.series[k].histogram == b.series[k].histogram);
    CHECK(a.series[k].near_max_count == b.series[k].near_max_count);
  }
  cfg.seed = 1;
  CHECK(entropy_study(50, sharp_source(5, 0.5), cfg).sample_ids != a.sample_ids);
}

TEST_CASE("entropy study errors") {
  EntropyStudyConfig cfg;
  cfg.sample_count = 10;
  CHECK_THROWS_AS(entropy_study(5, sharp_source(5, 0.5), cfg), RangeError);
  CHECK_THROWS_AS(entropy_study(0, sharp_source(5, 0.5), cfg), EmptyBatchError);
  const LogitSource mixed = [](std::size_t i) {
    return std::pair<std::string, LogitMap>("x", sharp_logits(i % 2 ? 4 : 5, 0.5, i));
  };
  CHECK_THROWS_AS(entropy_study(20, mixed, cfg), ShapeError);
}

TEST_CASE("render_report writes figure, table and summary") {
  EntropyStudyConfig cfg;
  cfg.sample_count = 8;
  const EntropyReport r = entropy_study(30, sharp_source(19, 0.7), cfg);
  const auto dir = testing::scratch_dir("entropy_report");
  const ReportFiles files = render_report(r, dir / "sub" / "entropy");
  CHECK(std::filesystem::exists(files.figure));

  std::ifstream tsv(files.table);
  std::string line;
  std::size_t rows = 0;
  std::getline(tsv, line);
  CHECK(line == "temperature\tbin\tlower\tupper\tcount\tshare");
  while (std::getline(tsv, line)) ++rows;
  CHECK(rows == 5 * 64);

  std::ifstream svg(files.figure);
  const std::string text((std::istreambuf_iterator<char>(svg)), std::istreambuf_iterator<char>());
  CHECK(text.find("<svg") != std::string::npos);
  for (const char* t : {"1", "2", "4", "8", "16"}) CHECK(text.find(std::string("T = ") + t + "</text>") != std::string::npos);
  std::size_t polylines = 0;
  for (auto p = text.find("<polyline"); p != std::string::npos; p = text.find("<polyline", p + 1)) ++polylines;
  CHECK(polylines == 5);

  std::ifstream js(files.summary);
  const auto j = nlohmann::json::parse(js);
  CHECK(j["class_count"] == 19);
  CHECK(j["samples"].size() == 8);
  CHECK(j["series"].size() == 5);
  CHECK(j["max_entropy"].get<double>() == doctest::Approx(std::log(19.0)));

  EntropyReport one = r;
  one.series.erase(one.series.begin() + 1, one.series.end());
  CHECK_NOTHROW(render_report(one, dir / "single"));
  CHECK_THROWS_AS(render_report(EntropyReport{}, dir / "empty"), ValidationError);
}
