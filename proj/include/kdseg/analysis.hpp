#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "kdseg/data.hpp"
#include "kdseg/metrics.hpp"
#include "kdseg/models.hpp"

namespace kdseg {

struct EntropyStudyConfig {
  std::vector<double> temperatures{1, 2, 4, 8, 16};
  std::size_t sample_count = 800;
  std::uint64_t seed = 0;
  std::size_t bins = 64;
  /// A pixel counts as near-maximal when its entropy is within this many
  /// nats of ln C.
  double near_max_tolerance = 0.1;

  void validate() const;
};

struct TemperatureSeries {
  double temperature = 1.0;
  EntropyHistogram histogram;
  std::uint64_t near_max_count = 0;

  double lowest_bin_share() const;
  double near_max_share() const;
};

struct EntropyReport {
  std::size_t class_count = 0;
  double near_max_tolerance = 0.1;
  std::uint64_t seed = 0;
  std::vector<std::string> sample_ids;
  std::vector<TemperatureSeries> series;

  bool empty() const noexcept { return series.empty(); }
};

/// Seeded draw of k distinct indices from [0, population), in draw order.
std::vector<std::size_t> sample_without_replacement(std::size_t population, std::size_t k, std::uint64_t seed);

/// Yields (id, teacher logits) for population index i.
using LogitSource = std::function<std::pair<std::string, LogitMap>(std::size_t)>;

/// Streams entropy histograms per temperature over the logits of
/// `cfg.sample_count` indices drawn from `population`; only one image's
/// distributions are held at a time.
EntropyReport entropy_study(std::size_t population, const LogitSource& source, const EntropyStudyConfig& cfg);

/// Same, with whole-image teacher inference over a dataset split.
EntropyReport entropy_study(SegmentationModel& teacher, const DatasetSpec& data, const std::string& split,
                            const EntropyStudyConfig& cfg);

struct ReportFiles {
  std::filesystem::path figure;
  std::filesystem::path table;
  std::filesystem::path summary;
};

/// Writes <stem>.svg (overlaid histograms, one series per temperature),
/// <stem>.tsv (one row per temperature and bin) and <stem>.json (shares and
/// sample manifest). Throws ValidationError on an empty report and IoError
/// when a file cannot be written.
ReportFiles render_report(const EntropyReport& report, const std::filesystem::path& stem);

}  // namespace kdseg
