#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

namespace kdseg {

inline constexpr const char* kMu0Axis = "train.mu0";
inline constexpr const char* kGammaAxis = "train.gamma";

/// One grid cell: axis name (a dotted config path) to value.
using Assignment = std::map<std::string, double>;

/// Canonical text form "a=1e-2,b=5e-4" with axes in name order.
std::string assignment_key(const Assignment& a);

struct GridSpec {
  std::map<std::string, std::vector<double>> axes;
  std::vector<std::uint64_t> seeds{0};
  nlohmann::json base = nlohmann::json::object();

  void validate() const;
  /// Cartesian product in axis-name order, last axis fastest.
  std::vector<Assignment> cells() const;
};

struct SeedOutcome {
  std::uint64_t seed = 0;
  std::optional<double> value;  // nullopt when the run failed
  std::string error;
};

struct TrialResult {
  enum class Status { ok, failed };

  Assignment assignment;
  std::vector<SeedOutcome> seeds;
  std::vector<double> values;  // successful seeds, in seed order
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  Status status = Status::failed;
};

/// Mean and population standard deviation; std is 0 for one value.
std::pair<double, double> mean_and_std(const std::vector<double>& values);

struct SweepReport {
  std::vector<std::string> axes;
  std::vector<TrialResult> trials;  // in grid order
  std::size_t best = 0;
  std::vector<std::size_t> within_one_std;  // indices into trials, includes best

  const TrialResult& best_trial() const { return trials.at(best); }
  bool underlined(std::size_t i) const;
};

/// Builds a report from per-seed outcomes. best = highest mean among ok
/// trials; ties go to smaller train.mu0, then smaller train.gamma, then the
/// lexicographically smaller assignment key. Throws SweepError when every
/// trial failed.
SweepReport summarize(std::vector<std::string> axes, std::vector<TrialResult> trials);

/// Evaluates one (assignment, seed); may throw to signal failure.
using Objective = std::function<double(const Assignment&, std::uint64_t seed)>;

/// Persists one JSON line per finished (assignment, seed). Re-opening an
/// existing store makes finished work visible to run_grid, which skips it.
class TrialStore {
 public:
  explicit TrialStore(std::filesystem::path path);

  const std::filesystem::path& path() const noexcept { return path_; }
  std::optional<SeedOutcome> find(const Assignment& a, std::uint64_t seed) const;
  void record(const Assignment& a, const SeedOutcome& outcome, const std::string& started, const std::string& finished);
  /// Start timestamp of a stored record, if any.
  std::optional<std::string> started(const Assignment& a, std::uint64_t seed) const;

 private:
  std::filesystem::path path_;
  std::map<std::string, nlohmann::json> records_;
};

struct RunGridOptions {
  /// Permutes the execution order of (cell, seed) pairs; results do not
  /// depend on it.
  std::optional<std::uint64_t> shuffle_seed;
  /// Trials run concurrently; the objective must then be thread-safe.
  std::size_t concurrency = 1;
  TrialStore* store = nullptr;
  std::function<void(const Assignment&, const SeedOutcome&)> on_trial;
};

/// Runs every (cell, seed) once; failures are recorded, not fatal.
SweepReport run_grid(const GridSpec& grid, const Objective& objective, const RunGridOptions& options = {});

enum class TableStyle { text, tsv };

/// mean±std per trial; '**' marks the best, '_' marks trials within one
/// standard deviation of the best (text style), or a marker column (tsv).
std::string report_table(const SweepReport& report, TableStyle style = TableStyle::text);

// Staged protocol: (1) student-only (mu0, gamma) grid, (2) student+teacher
// (mu0, gamma) grid at tau = 1 with pixel-wise distillation, (3) tau sweep
// at the stage-2 optimum, (4) one weight sweep per additional loss term at
// the stage-2/3 optima.

struct StagePlan {
  std::string name;
  std::string preset;
  std::map<std::string, std::vector<double>> axes;
  /// Fixed overrides applied on top of the preset.
  std::map<std::string, double> fixed;
  /// Axis values taken from the best trial of another stage: path -> stage.
  std::map<std::string, std::string> inherit;
  std::vector<std::uint64_t> seeds;
  /// Optimum published for the preset, where one exists.
  Assignment expected;
};

struct SweepPlan {
  std::vector<StagePlan> stages;
  /// Overrides applied to every trial (e.g. data.root, train.eta).
  std::vector<std::string> overrides;
  std::string metric = "final";  // "final" or "best" checkpoint mIoU
  std::size_t concurrency = 1;
  /// Replace training runs with the analytic mock objective.
  bool mock = false;

  void validate() const;
};

nlohmann::json to_json(const SweepPlan& plan);
SweepPlan sweep_plan_from_json(const nlohmann::json& j);

/// mu0 grid searched for a student family ("effnet" or "resnet").
std::vector<double> mu0_grid(const std::string& student);
std::vector<double> gamma_grid();
std::vector<double> temperature_grid();
std::vector<double> weight_grid(const std::string& term);  // "pa", "ho", "ifv"

/// Full plan for every (dataset, student) pair. Throws ConfigError when a
/// preset is missing.
SweepPlan stage_protocol(const std::vector<std::string>& datasets, const std::vector<std::string>& students);

/// Analytic stand-in for a training run: 70 - (log10 mu0 + 2)^2 -
/// (log10 gamma + 5)^2 - sum over other axes of (log10 v + 1)^2, ignoring
/// seeds. Its argmax on the learning-rate grids is known in closed form.
double mock_objective(const Assignment& a);

/// Runs argv as a child process; returns its exit status (or 128 + signal).
int run_process(const std::vector<std::string>& argv, const std::filesystem::path& log_path);

}  // namespace kdseg
