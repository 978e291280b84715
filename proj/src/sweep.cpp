#include "kdseg/sweep.hpp"

#include <spawn.h>
#include <sys/wait.h>
#include <fcntl.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>
#include <cstring>

#include "kdseg/config.hpp"
#include "kdseg/error.hpp"
#include "kdseg/util.hpp"

extern char** environ;

namespace kdseg {
namespace fs = std::filesystem;
using nlohmann::json;

std::string assignment_key(const Assignment& a) {
  std::ostringstream ss;
  ss << std::setprecision(17);
  bool first = true;
  for (const auto& [name, value] : a) {
    ss << (first ? "" : ",") << name << '=' << value;
    first = false;
  }
  return ss.str();
}

void GridSpec::validate() const {
  if (axes.empty()) throw ConfigError("grid has no axes");
  for (const auto& [name, values] : axes)
    if (values.empty()) throw ConfigError("grid axis '" + name + "' is empty");
  if (seeds.empty()) throw ConfigError("grid has no seeds");
}

std::vector<Assignment> GridSpec::cells() const {
  validate();
  std::vector<Assignment> out{Assignment{}};
  for (const auto& [name, values] : axes) {
    std::vector<Assignment> next;
    for (const auto& partial : out)
      for (double v : values) {
        Assignment a = partial;
        a[name] = v;
        next.push_back(std::move(a));
      }
    out = std::move(next);
  }
  return out;
}

std::pair<double, double> mean_and_std(const std::vector<double>& values) {
  if (values.empty()) return {0.0, 0.0};
  double sum = 0.0;
  for (double v : values) sum += v;
  const double mean = sum / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - mean) * (v - mean);
  return {mean, std::sqrt(sq / static_cast<double>(values.size()))};
}

bool SweepReport::underlined(std::size_t i) const {
  return std::find(within_one_std.begin(), within_one_std.end(), i) != within_one_std.end();
}

namespace {

double axis_or(const Assignment& a, const char* name, double fallback) {
  auto it = a.find(name);
  return it == a.end() ? fallback : it->second;
}

// True when trial a should be preferred over b at equal means.
bool preferred(const TrialResult& a, const TrialResult& b) {
  const double ma = axis_or(a.assignment, kMu0Axis, 0.0), mb = axis_or(b.assignment, kMu0Axis, 0.0);
  if (ma != mb) return ma < mb;
  const double ga = axis_or(a.assignment, kGammaAxis, 0.0), gb = axis_or(b.assignment, kGammaAxis, 0.0);
  if (ga != gb) return ga < gb;
  return assignment_key(a.assignment) < assignment_key(b.assignment);
}

}  // namespace

SweepReport summarize(std::vector<std::string> axes, std::vector<TrialResult> trials) {
  SweepReport r{std::move(axes), std::move(trials), 0, {}};
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < r.trials.size(); ++i) {
    auto& t = r.trials[i];
    t.values.clear();
    for (const auto& s : t.seeds)
      if (s.value) t.values.push_back(*s.value);
    t.status = t.values.empty() ? TrialResult::Status::failed : TrialResult::Status::ok;
    std::tie(t.mean, t.std) = mean_and_std(t.values);
    if (t.status != TrialResult::Status::ok) continue;
    if (!best || t.mean > r.trials[*best].mean || (t.mean == r.trials[*best].mean && preferred(t, r.trials[*best]))) {
      best = i;
    }
  }
  if (!best) throw SweepError("every trial failed");
  r.best = *best;
  const double threshold = r.trials[r.best].mean - r.trials[r.best].std;
  for (std::size_t i = 0; i < r.trials.size(); ++i) {
    if (r.trials[i].status == TrialResult::Status::ok && r.trials[i].mean >= threshold) r.within_one_std.push_back(i);
  }
  return r;
}

TrialStore::TrialStore(fs::path path) : path_(std::move(path)) {
  std::ifstream in(path_);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("key")) continue;  // torn final line of an interrupted sweep
    records_[j.at("key").get<std::string>()] = j;
  }
}

namespace {
std::string store_key(const Assignment& a, std::uint64_t seed) { return assignment_key(a) + "#" + std::to_string(seed); }
}  // namespace

std::optional<SeedOutcome> TrialStore::find(const Assignment& a, std::uint64_t seed) const {
  auto it = records_.find(store_key(a, seed));
  if (it == records_.end()) return std::nullopt;
  SeedOutcome o{seed, std::nullopt, it->second.value("error", "")};
  if (it->second.at("status") == "ok") o.value = it->second.at("value").get<double>();
  return o;
}

std::optional<std::string> TrialStore::started(const Assignment& a, std::uint64_t seed) const {
  auto it = records_.find(store_key(a, seed));
  if (it == records_.end()) return std::nullopt;
  return it->second.value("started", "");
}

void TrialStore::record(const Assignment& a, const SeedOutcome& o, const std::string& started,
                        const std::string& finished) {
  json j{{"key", store_key(a, o.seed)},
         {"assignment", a},
         {"seed", o.seed},
         {"status", o.value ? "ok" : "failed"},
         {"started", started},
         {"finished", finished}};
  if (o.value) j["value"] = *o.value;
  else j["error"] = o.error;
  if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
  std::ofstream out(path_, std::ios::app);
  if (!out) throw IoError("cannot append to trial store " + path_.string());
  out << j.dump() << '\n';
  out.flush();
  records_[j.at("key").get<std::string>()] = j;
}

SweepReport run_grid(const GridSpec& grid, const Objective& objective, const RunGridOptions& options) {
  const std::vector<Assignment> cells = grid.cells();
  struct Job {
    std::size_t cell;
    std::size_t seed_index;
  };
  std::vector<Job> jobs;
  for (std::size_t c = 0; c < cells.size(); ++c)
    for (std::size_t s = 0; s < grid.seeds.size(); ++s) jobs.push_back({c, s});
  if (options.shuffle_seed) {
    std::mt19937_64 rng(*options.shuffle_seed);
    std::shuffle(jobs.begin(), jobs.end(), rng);
  }

  std::vector<std::vector<SeedOutcome>> outcomes(cells.size(), std::vector<SeedOutcome>(grid.seeds.size()));
  std::mutex mutex;
  auto run_job = [&](const Job& job) {
    const Assignment& a = cells[job.cell];
    const std::uint64_t seed = grid.seeds[job.seed_index];
    {
      std::lock_guard lock(mutex);
      if (options.store) {
        if (auto done = options.store->find(a, seed)) {
          outcomes[job.cell][job.seed_index] = *done;
          return;
        }
      }
    }
    const std::string started = utc_timestamp();
    SeedOutcome o{seed, std::nullopt, ""};
    try {
      const double v = objective(a, seed);
      if (std::isfinite(v)) o.value = v;
      else o.error = "objective returned a non-finite value";
    } catch (const std::exception& e) {
      o.error = e.what();
    } catch (...) {
      o.error = "unknown failure";
    }
    std::lock_guard lock(mutex);
    outcomes[job.cell][job.seed_index] = o;
    if (options.store) options.store->record(a, o, started, utc_timestamp());
    if (options.on_trial) options.on_trial(a, o);
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(options.concurrency, jobs.size()));
  if (workers == 1) {
    for (const auto& job : jobs) run_job(job);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t k; (k = next.fetch_add(1)) < jobs.size();) run_job(jobs[k]);
      });
    }
    for (auto& t : pool) t.join();
  }

  std::vector<TrialResult> trials;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    TrialResult t;
    t.assignment = cells[c];
    t.seeds = outcomes[c];
    trials.push_back(std::move(t));
  }
  std::vector<std::string> axes;
  for (const auto& [name, values] : grid.axes) axes.push_back(name);
  return summarize(std::move(axes), std::move(trials));
}

namespace {

std::string fixed2(double v) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(2) << v;
  return ss.str();
}

std::string short_number(double v) {
  std::ostringstream ss;
  ss << std::setprecision(6) << v;
  return ss.str();
}

}  // namespace

std::string report_table(const SweepReport& report, TableStyle style) {
  std::ostringstream out;
  if (style == TableStyle::tsv) {
    for (const auto& a : report.axes) out << a << '\t';
    out << "mean\tstd\tok_seeds\tstatus\tmarker\n";
    for (std::size_t i = 0; i < report.trials.size(); ++i) {
      const auto& t = report.trials[i];
      for (const auto& a : report.axes) out << short_number(t.assignment.at(a)) << '\t';
      const bool ok = t.status == TrialResult::Status::ok;
      out << std::setprecision(10) << (ok ? t.mean : NAN) << '\t' << (ok ? t.std : NAN) << '\t' << t.values.size()
          << '\t' << (ok ? "ok" : "failed") << '\t'
          << (i == report.best ? "best" : report.underlined(i) ? "within_one_std" : "") << '\n';
    }
    return out.str();
  }

  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header(report.axes.begin(), report.axes.end());
  header.push_back("mIoU");
  rows.push_back(header);
  for (std::size_t i = 0; i < report.trials.size(); ++i) {
    const auto& t = report.trials[i];
    std::vector<std::string> row;
    for (const auto& a : report.axes) row.push_back(short_number(t.assignment.at(a)));
    std::string cell = t.status == TrialResult::Status::ok ? fixed2(t.mean) + " ± " + fixed2(t.std) : "failed";
    if (i == report.best) cell = "**" + cell + "**";
    else if (report.underlined(i)) cell = "_" + cell + "_";
    row.push_back(cell);
    rows.push_back(std::move(row));
  }
  std::vector<std::size_t> widths(header.size(), 0);
  for (const auto& row : rows)
    for (std::size_t k = 0; k < row.size(); ++k) widths[k] = std::max(widths[k], row[k].size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t k = 0; k < rows[r].size(); ++k) {
      out << (k ? "  " : "") << std::left << std::setw(static_cast<int>(widths[k])) << rows[r][k];
    }
    out << '\n';
    if (r == 0) {
      std::size_t total = 0;
      for (auto w : widths) total += w + 2;
      out << std::string(total - 2, '-') << '\n';
    }
  }
  out << "** best mean; _ within one standard deviation of the best\n";
  return out.str();
}

std::vector<double> mu0_grid(const std::string& student) {
  if (student == "effnet") return {1e-1, 5e-2, 1e-2, 5e-3};
  if (student == "resnet") return {5e-2, 1e-2, 5e-3};
  throw ConfigError("no learning-rate grid for student '" + student + "'");
}

std::vector<double> gamma_grid() { return {5e-4, 5e-5, 5e-6}; }

std::vector<double> temperature_grid() { return {1, 2, 3, 4, 6, 8}; }

std::vector<double> weight_grid(const std::string& t) {
  if (t == "pa") return {1e-3, 1e-2, 1e-1, 1e0, 1e1};
  if (t == "ho") return {1e-4, 1e-3, 1e-2, 1e-1};
  if (t == "ifv") return {1e-4, 1e-3, 1e-2, 1e-1, 1e0, 1e1, 5e1, 1e2};
  throw ConfigError("no weight grid for loss term '" + t + "'");
}

void SweepPlan::validate() const {
  if (stages.empty()) throw ConfigError("sweep plan has no stages");
  if (metric != "final" && metric != "best") throw ConfigError("sweep plan metric must be 'final' or 'best'");
  if (concurrency < 1) throw ConfigError("sweep plan concurrency must be >= 1");
  std::set<std::string> done;
  for (const auto& s : stages) {
    if (s.name.empty()) throw ConfigError("sweep stage without a name");
    if (done.count(s.name)) throw ConfigError("duplicate sweep stage '" + s.name + "'");
    if (s.axes.empty()) throw ConfigError("stage '" + s.name + "': empty grid");
    for (const auto& [axis, values] : s.axes)
      if (values.empty()) throw ConfigError("stage '" + s.name + "': axis '" + axis + "' has no values");
    if (s.seeds.empty()) throw ConfigError("stage '" + s.name + "': no seeds");
    for (const auto& [path, from] : s.inherit) {
      if (!done.count(from)) {
        throw ConfigError("stage '" + s.name + "': unresolved dependency on stage '" + from + "' for " + path);
      }
    }
    done.insert(s.name);
  }
}

json to_json(const SweepPlan& plan) {
  json stages = json::array();
  for (const auto& s : plan.stages) {
    stages.push_back({{"name", s.name},
                      {"preset", s.preset},
                      {"axes", s.axes},
                      {"fixed", s.fixed},
                      {"inherit", s.inherit},
                      {"seeds", s.seeds},
                      {"expected", s.expected}});
  }
  return {{"stages", stages}, {"overrides", plan.overrides}, {"metric", plan.metric}, {"concurrency", plan.concurrency}, {"mock", plan.mock}};
}

SweepPlan sweep_plan_from_json(const json& j) {
  SweepPlan plan;
  try {
    for (const auto& s : j.at("stages")) {
      StagePlan st;
      st.name = s.at("name").get<std::string>();
      st.preset = s.value("preset", "");
      st.axes = s.at("axes").get<std::map<std::string, std::vector<double>>>();
      st.fixed = s.value("fixed", std::map<std::string, double>{});
      st.inherit = s.value("inherit", std::map<std::string, std::string>{});
      st.seeds = s.value("seeds", std::vector<std::uint64_t>{0});
      st.expected = s.value("expected", Assignment{});
      plan.stages.push_back(std::move(st));
    }
    plan.overrides = j.value("overrides", std::vector<std::string>{});
    plan.metric = j.value("metric", plan.metric);
    plan.concurrency = j.value("concurrency", plan.concurrency);
    plan.mock = j.value("mock", false);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed sweep plan: ") + e.what());
  }
  plan.validate();
  return plan;
}

SweepPlan stage_protocol(const std::vector<std::string>& datasets, const std::vector<std::string>& students) {
  SweepPlan plan;
  for (const auto& d : datasets) {
    for (const auto& s : students) {
      const std::string prefix = d + "-" + s;
      const Preset& solo = find_preset(prefix + "-student");
      const Preset& kd = find_preset(prefix + "-kd");
      std::vector<std::uint64_t> seeds;
      for (const auto& v : solo.patch.at("seeds")) seeds.push_back(v.get<std::uint64_t>());
      auto optimum = [](const Preset& p) {
        return Assignment{{kMu0Axis, p.patch.at("train").at("mu0").get<double>()},
                          {kGammaAxis, p.patch.at("train").at("gamma").get<double>()}};
      };
      const std::map<std::string, std::vector<double>> lr_grid{{kMu0Axis, mu0_grid(s)}, {kGammaAxis, gamma_grid()}};

      plan.stages.push_back({prefix + "-student", solo.name, lr_grid, {}, {}, seeds, optimum(solo)});
      plan.stages.push_back({prefix + "-kd", kd.name, lr_grid, {{"train.temperature", 1.0}}, {}, seeds, optimum(kd)});
      const std::map<std::string, std::string> lr_from_kd{{kMu0Axis, prefix + "-kd"}, {kGammaAxis, prefix + "-kd"}};
      plan.stages.push_back({prefix + "-tau", kd.name, {{"train.temperature", temperature_grid()}}, {}, lr_from_kd, seeds, {}});
      for (const char* t : {"pa", "ho", "ifv"}) {
        auto inherit = lr_from_kd;
        inherit["train.temperature"] = prefix + "-tau";
        plan.stages.push_back({prefix + "-" + t, kd.name, {{std::string("train.weights.") + t, weight_grid(t)}}, {}, inherit, seeds, {}});
      }
    }
  }
  plan.validate();
  return plan;
}

double mock_objective(const Assignment& a) {
  double f = 70.0;
  for (const auto& [axis, v] : a) {
    if (!(v > 0)) throw ValidationError("mock objective: axis '" + axis + "' must be positive");
    const double l = std::log10(v);
    const double centre = axis == kMu0Axis ? -2.0 : axis == kGammaAxis ? -5.0 : -1.0;
    f -= (l - centre) * (l - centre);
  }
  return f;
}

int run_process(const std::vector<std::string>& argv, const fs::path& log_path) {
  if (argv.empty()) throw ValidationError("run_process: empty argv");
  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawn_file_actions_addopen(&actions, STDOUT_FILENO, log_path.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  posix_spawn_file_actions_adddup2(&actions, STDOUT_FILENO, STDERR_FILENO);
  std::vector<char*> args;
  for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
  args.push_back(nullptr);
  pid_t pid = 0;
  const int rc = posix_spawn(&pid, args[0], &actions, nullptr, args.data(), environ);
  posix_spawn_file_actions_destroy(&actions);
  if (rc != 0) throw IoError("cannot start " + argv[0] + ": " + std::strerror(rc));
  int status = 0;
  while (waitpid(pid, &status, 0) < 0) {
    if (errno != EINTR) throw IoError("waitpid failed for " + argv[0]);
  }
  if (WIFEXITED(status)) return WEXITSTATUS(status);
  if (WIFSIGNALED(status)) return 128 + WTERMSIG(status);
  return 255;
}

}  // namespace kdseg
