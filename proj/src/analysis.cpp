#include "kdseg/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"
#include "kdseg/error.hpp"
#include "kdseg/trainer.hpp"

namespace kdseg {
namespace fs = std::filesystem;

void EntropyStudyConfig::validate() const {
  if (temperatures.empty()) throw ValidationError("entropy study: no temperatures");
  for (double t : temperatures)
    if (!(t > 0)) throw ValidationError("entropy study: temperatures must be > 0");
  if (sample_count == 0) throw ValidationError("entropy study: sample_count must be positive");
  if (bins == 0) throw ValidationError("entropy study: bins must be positive");
  if (!(near_max_tolerance >= 0)) throw ValidationError("entropy study: near_max_tolerance must be >= 0");
}

double TemperatureSeries::lowest_bin_share() const {
  return histogram.total() ? static_cast<double>(histogram.counts().front()) / static_cast<double>(histogram.total())
                           : 0.0;
}

double TemperatureSeries::near_max_share() const {
  return histogram.total() ? static_cast<double>(near_max_count) / static_cast<double>(histogram.total()) : 0.0;
}

std::vector<std::size_t> sample_without_replacement(std::size_t population, std::size_t k, std::uint64_t seed) {
  if (k > population) {
    throw RangeError("cannot sample " + std::to_string(k) + " items from a split of size " + std::to_string(population));
  }
  std::vector<std::size_t> idx(population);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, population - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  return idx;
}

EntropyReport entropy_study(std::size_t population, const LogitSource& source, const EntropyStudyConfig& cfg) {
  cfg.validate();
  if (population == 0) throw EmptyBatchError("entropy study: empty split");
  EntropyReport report;
  report.seed = cfg.seed;
  report.near_max_tolerance = cfg.near_max_tolerance;
  for (std::size_t index : sample_without_replacement(population, cfg.sample_count, cfg.seed)) {
    auto [id, logits] = source(index);
    if (report.series.empty()) {
      report.class_count = logits.class_count();
      for (double t : cfg.temperatures) report.series.push_back({t, EntropyHistogram(report.class_count, cfg.bins), 0});
    } else if (logits.class_count() != report.class_count) {
      throw ShapeError("entropy study: class count changed between samples");
    }
    const double threshold = std::log(static_cast<double>(report.class_count)) - cfg.near_max_tolerance;
    for (auto& s : report.series) {
      const std::vector<double> h = shannon_entropy(softmax(logits, Temperature(s.temperature)));
      s.histogram.add(h);
      s.near_max_count += static_cast<std::uint64_t>(std::count_if(h.begin(), h.end(), [&](double v) { return v >= threshold; }));
    }
    report.sample_ids.push_back(std::move(id));
  }
  return report;
}

EntropyReport entropy_study(SegmentationModel& teacher, const DatasetSpec& data, const std::string& split_name,
                            const EntropyStudyConfig& cfg) {
  if (teacher.class_count() != data.class_count) {
    throw ValidationError("teacher has " + std::to_string(teacher.class_count()) + " classes, dataset has " +
                          std::to_string(data.class_count));
  }
  const Split split = load_split(data, split_name);
  if (split.empty()) throw EmptyBatchError("entropy study: split '" + split_name + "' is empty");
  if (cfg.sample_count > split.size()) {
    throw RangeError("sample_count " + std::to_string(cfg.sample_count) + " exceeds split size " +
                     std::to_string(split.size()));
  }
  return entropy_study(
      split.size(),
      [&](std::size_t i) {
        Sample s = split.load(i);
        return std::pair<std::string, LogitMap>(s.id, predict(teacher, data, s.image));
      },
      cfg);
}

namespace {

const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string format_number(double v) {
  std::ostringstream ss;
  ss << v;
  return ss.str();
}

void write_svg(std::ostream& out, const EntropyReport& report) {
  constexpr double W = 720, H = 420, left = 70, right = 150, top = 30, bottom = 60;
  const double pw = W - left - right, ph = H - top - bottom;
  double ymax = 0;
  for (const auto& s : report.series)
    for (double v : s.histogram.shares()) ymax = std::max(ymax, v);
  ymax = ymax > 0 ? ymax * 1.05 : 1.0;
  const double xmax = report.series.front().histogram.upper();
  auto X = [&](double x) { return left + pw * x / xmax; };
  auto Y = [&](double y) { return top + ph * (1.0 - y / ymax); };

  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
      << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 5; ++k) {
    const double x = xmax * k / 5.0, y = ymax * k / 5.0;
    out << "<text x=\"" << X(x) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">"
        << format_number(std::round(x * 100) / 100) << "</text>\n";
    out << "<text x=\"" << left - 8 << "\" y=\"" << Y(y) + 4 << "\" text-anchor=\"end\">"
        << format_number(std::round(y * 1000) / 1000) << "</text>\n";
  }
  out << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 15 << "\" text-anchor=\"middle\">entropy (nats)</text>\n";
  out << "<text x=\"18\" y=\"" << top + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
      << top + ph / 2 << ")\">share of pixels</text>\n";

  for (std::size_t k = 0; k < report.series.size(); ++k) {
    const auto& s = report.series[k];
    const auto shares = s.histogram.shares();
    const char* colour = kPalette[k % std::size(kPalette)];
    out << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\" points=\"";
    out << X(0) << ',' << Y(0);
    for (std::size_t i = 0; i < shares.size(); ++i) {
      out << ' ' << X(s.histogram.bin_lower(i)) << ',' << Y(shares[i]) << ' ' << X(s.histogram.bin_upper(i)) << ','
          << Y(shares[i]);
    }
    out << ' ' << X(xmax) << ',' << Y(0) << "\"/>\n";
    const double ly = top + 16 + 18 * static_cast<double>(k);
    out << "<line x1=\"" << left + pw + 15 << "\" y1=\"" << ly - 4 << "\" x2=\"" << left + pw + 40 << "\" y2=\""
        << ly - 4 << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << left + pw + 46 << "\" y=\"" << ly << "\">T = " << format_number(s.temperature)
        << "</text>\n";
  }
  out << "</svg>\n";
}

std::ofstream open_or_throw(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

}  // namespace

ReportFiles render_report(const EntropyReport& report, const fs::path& stem) {
  if (report.empty()) throw ValidationError("render_report: empty entropy report");
  if (stem.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(stem.parent_path(), ec);
  }
  ReportFiles files{fs::path(stem).concat(".svg"), fs::path(stem).concat(".tsv"), fs::path(stem).concat(".json")};

  {
    auto out = open_or_throw(files.figure);
    write_svg(out, report);
  }
  {
    auto out = open_or_throw(files.table);
    out << "temperature\tbin\tlower\tupper\tcount\tshare\n";
    for (const auto& s : report.series) {
      const auto shares = s.histogram.shares();
      for (std::size_t i = 0; i < s.histogram.bins(); ++i) {
        out << s.temperature << '\t' << i << '\t' << s.histogram.bin_lower(i) << '\t' << s.histogram.bin_upper(i)
            << '\t' << s.histogram.counts()[i] << '\t' << shares[i] << '\n';
      }
    }
  }
  {
    nlohmann::json series = nlohmann::json::array();
    for (const auto& s : report.series) {
      series.push_back({{"temperature", s.temperature},
                        {"pixels", s.histogram.total()},
                        {"lowest_bin_share", s.lowest_bin_share()},
                        {"near_max_share", s.near_max_share()}});
    }
    const nlohmann::json j{{"class_count", report.class_count},
                           {"max_entropy", std::log(static_cast<double>(report.class_count))},
                           {"near_max_tolerance", report.near_max_tolerance},
                           {"seed", report.seed},
                           {"samples", report.sample_ids},
                           {"series", series}};
    auto out = open_or_throw(files.summary);
    out << j.dump(2) << '\n';
  }
  return files;
}

}  // namespace kdseg
