// kdseg: command-line entry point.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "kdseg/analysis.hpp"
#include "kdseg/checkpoint.hpp"
#include "kdseg/config.hpp"
#include "kdseg/error.hpp"
#include "kdseg/sweep.hpp"
#include "kdseg/trainer.hpp"
#include "kdseg/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace kdseg;

namespace {

enum Exit : int { kOk = 0, kFailure = 1, kConfig = 2, kDivergence = 3, kIo = 4 };

struct ConfigArgs {
  std::string config_file;
  std::string preset;
  std::vector<std::string> overrides;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_file, "JSON config file");
    cmd->add_option("--preset", preset, "named preset (see `kdseg presets`)");
    cmd->add_option("--set", overrides, "override, dotted.path=value (repeatable)");
  }

  json resolve() const {
    json file;
    if (!config_file.empty()) {
      std::ifstream in(config_file);
      if (!in) throw IoError("cannot open config file " + config_file);
      file = json::parse(in, nullptr, false);
      if (file.is_discarded()) throw ConfigError("config file " + config_file + " is not valid JSON");
    }
    return resolve_config(preset.empty() ? std::nullopt : std::optional(preset), file, overrides);
  }
};

fs::path run_root() {
  if (const char* env = std::getenv("KDSEG_RUN_ROOT"); env && *env) return env;
  return "runs";
}

fs::path self_exe() { return fs::read_symlink("/proc/self/exe"); }

std::string compact_timestamp() {
  std::string t = utc_timestamp();  // 2026-01-02T03:04:05.678Z
  std::string out;
  for (char c : t)
    if (c != '-' && c != ':' && c != '.') out += c;
  return out;
}

// Creates the run directory and writes manifest.json before anything else.
fs::path start_run(const std::string& command, const json& resolved, std::uint64_t seed,
                   const std::optional<fs::path>& explicit_dir = std::nullopt) {
  const fs::path dir = explicit_dir ? *explicit_dir : run_root() / (compact_timestamp() + "-" + config_hash(resolved));
  fs::create_directories(dir);
  const json manifest{{"command", command},
                      {"config", resolved},
                      {"code_version", KDSEG_VERSION},
                      {"seed", seed},
                      {"started", utc_timestamp()},
                      {"output_dir", fs::absolute(dir).string()}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
  return dir;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

DatasetSpec prepare_dataset(const RunConfig& rc) {
  if (rc.synthetic && !fs::exists(rc.data.root / "manifest.json")) {
    std::fprintf(stderr, "generating synthetic dataset in %s\n", rc.data.root.c_str());
    generate_synthetic(*rc.synthetic, rc.data.root);
  }
  return rc.data;
}

void require_runnable(const RunConfig& rc) {
  const auto missing = missing_requirements(rc);
  if (missing.empty()) return;
  std::string msg = "configuration is incomplete:";
  for (const auto& m : missing) msg += "\n  " + m;
  throw ConfigError(msg);
}

std::unique_ptr<SegmentationModel> load_model(const fs::path& checkpoint) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  return build_model({ck.model, ck.class_count}, InitPolicy::pretrained(checkpoint.string()));
}

RunRecord run_training(const RunConfig& rc, const fs::path& dir, bool verbose) {
  const DatasetSpec data = prepare_dataset(rc);
  TrainConfig cfg = rc.train;
  if (cfg.init.mode == InitPolicy::Mode::random) cfg.init.seed = cfg.seed;
  auto student = build_model({rc.student, data.class_count}, cfg.init);
  std::unique_ptr<SegmentationModel> teacher;
  if (rc.teacher) {
    teacher = build_model({*rc.teacher, data.class_count}, InitPolicy::pretrained(*rc.teacher_weights));
  }
  TrainOutputs outputs;
  outputs.run_dir = dir;
  if (verbose) {
    const std::size_t every = std::max<std::size_t>(1, cfg.eta / 20);
    outputs.on_step = [every](const StepRecord& s) {
      if (s.step % every != 0) return;
      std::printf("step %6zu  lr %.3e  loss %.4f", s.step, s.learning_rate, s.losses.total);
      for (const auto& e : s.losses.per_term) std::printf("  %s %.4f", e.term.c_str(), e.raw);
      std::printf("\n");
      std::fflush(stdout);
    };
    outputs.on_eval = [](const EvalRecord& e) {
      std::printf("eval  %6zu  mIoU %.2f\n", e.step, e.miou);
      std::fflush(stdout);
    };
  }
  return train(*student, teacher.get(), cfg, data, outputs);
}

int cmd_train(const ConfigArgs& args, bool dry_run) {
  const json resolved = args.resolve();
  const RunConfig rc = materialize(resolved);
  if (dry_run) {
    std::cout << resolved.dump(2) << '\n';
    for (const auto& m : missing_requirements(rc)) std::cerr << "warning: " << m << '\n';
    return kOk;
  }
  require_runnable(rc);
  const fs::path dir = start_run("train", resolved, rc.train.seed);
  std::printf("run directory %s\n", dir.c_str());
  const RunRecord r = run_training(rc, dir, true);
  std::printf("final mIoU %.2f  best mIoU %.2f (step %zu)  %.1fs\n", r.final_miou, r.best_miou, r.best_step, r.seconds);
  return kOk;
}

int cmd_trial(const std::string& config_path, const std::string& result_path) {
  std::ifstream in(config_path);
  if (!in) throw IoError("cannot open trial config " + config_path);
  const json resolved = json::parse(in, nullptr, false);
  if (resolved.is_discarded()) throw ConfigError("trial config is not valid JSON");
  const RunConfig rc = materialize(resolved);
  require_runnable(rc);
  const fs::path dir = fs::path(result_path).parent_path();
  const RunRecord r = run_training(rc, dir, false);
  write_json(result_path, {{"final_miou", r.final_miou}, {"best_miou", r.best_miou}, {"seconds", r.seconds}});
  return kOk;
}

std::string describe_exit(int code) {
  switch (code) {
    case kConfig: return "configuration error";
    case kDivergence: return "training diverged";
    case kIo: return "I/O error";
    default: return code >= 128 ? "killed by signal " + std::to_string(code - 128) : "exit code " + std::to_string(code);
  }
}

int cmd_sweep(const std::string& plan_path, const std::string& resume, bool dry_run, bool mock) {
  std::ifstream in(plan_path);
  if (!in) throw IoError("cannot open sweep plan " + plan_path);
  const json pj = json::parse(in, nullptr, false);
  if (pj.is_discarded()) throw ConfigError("sweep plan is not valid JSON");
  SweepPlan plan = sweep_plan_from_json(pj);
  if (mock) plan.mock = true;
  // Validate every stage's configuration up front.
  for (const auto& st : plan.stages) {
    if (plan.mock) continue;
    std::vector<std::string> ov = plan.overrides;
    materialize(resolve_config(st.preset.empty() ? std::nullopt : std::optional(st.preset), json(), ov));
  }
  if (dry_run) {
    std::cout << to_json(plan).dump(2) << '\n';
    return kOk;
  }
  const fs::path dir = start_run("sweep", to_json(plan), 0, resume.empty() ? std::nullopt : std::optional<fs::path>(resume));
  std::printf("sweep directory %s\n", dir.c_str());

  std::map<std::string, SweepReport> reports;
  json summary = json::object();
  for (const auto& st : plan.stages) {
    std::map<std::string, double> fixed = st.fixed;
    for (const auto& [path, from] : st.inherit) {
      const Assignment& best = reports.at(from).best_trial().assignment;
      if (auto it = best.find(path); it != best.end()) {
        fixed[path] = it->second;
        continue;
      }
      // Not an axis of the earlier stage: carry over the value it held fixed.
      for (const auto& other : plan.stages)
        if (other.name == from && other.fixed.count(path)) fixed[path] = other.fixed.at(path);
    }
    GridSpec grid;
    grid.axes = st.axes;
    grid.seeds = st.seeds;
    const fs::path stage_dir = dir / st.name;
    fs::create_directories(stage_dir);
    TrialStore store(stage_dir / "trials.jsonl");

    Objective objective;
    if (plan.mock) {
      objective = [](const Assignment& a, std::uint64_t) { return mock_objective(a); };
    } else {
      std::vector<std::string> base_overrides = plan.overrides;
      for (const auto& [path, v] : fixed) {
        std::ostringstream ss;
        ss << std::setprecision(17) << path << '=' << v;
        base_overrides.push_back(ss.str());
      }
      const std::string preset = st.preset;
      const std::string metric = plan.metric;
      objective = [=](const Assignment& a, std::uint64_t seed) {
        std::vector<std::string> ov = base_overrides;
        for (const auto& [path, v] : a) {
          std::ostringstream ss;
          ss << std::setprecision(17) << path << '=' << v;
          ov.push_back(ss.str());
        }
        ov.push_back("train.seed=" + std::to_string(seed));
        const json resolved = resolve_config(preset.empty() ? std::nullopt : std::optional(preset), json(), ov);
        const fs::path trial_dir = stage_dir / "trials" / (config_hash(resolved) + "-s" + std::to_string(seed));
        fs::create_directories(trial_dir);
        write_json(trial_dir / "config.json", resolved);
        const fs::path result = trial_dir / "result.json";
        const int code = run_process({self_exe().string(), "trial", "--config", (trial_dir / "config.json").string(),
                                      "--result", result.string()},
                                     trial_dir / "log.txt");
        if (code != 0) throw SweepError("trial failed: " + describe_exit(code) + " (see " + (trial_dir / "log.txt").string() + ")");
        std::ifstream rin(result);
        const json r = json::parse(rin);
        return r.at(metric == "best" ? "best_miou" : "final_miou").get<double>();
      };
    }
    RunGridOptions options;
    options.store = &store;
    options.concurrency = plan.mock ? 1 : plan.concurrency;
    options.on_trial = [&](const Assignment& a, const SeedOutcome& o) {
      std::printf("[%s] %s seed %llu -> %s\n", st.name.c_str(), assignment_key(a).c_str(),
                  static_cast<unsigned long long>(o.seed), o.value ? std::to_string(*o.value).c_str() : o.error.c_str());
      std::fflush(stdout);
    };
    SweepReport report = run_grid(grid, objective, options);
    const std::string text = report_table(report, TableStyle::text);
    std::ofstream(stage_dir / "report.txt") << text;
    std::ofstream(stage_dir / "report.tsv") << report_table(report, TableStyle::tsv);
    std::printf("\nstage %s\n%s\n", st.name.c_str(), text.c_str());
    summary[st.name] = {{"best", report.best_trial().assignment},
                        {"mean", report.best_trial().mean},
                        {"std", report.best_trial().std},
                        {"fixed", fixed},
                        {"expected", st.expected}};
    reports.emplace(st.name, std::move(report));
  }
  write_json(dir / "summary.json", summary);
  return kOk;
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ConfigError("not a number: '" + item + "'");
    }
  }
  return out;
}

DatasetSpec dataset_from_args(const std::string& data_root, const ConfigArgs& cargs) {
  if (!data_root.empty()) return read_manifest(data_root);
  const RunConfig rc = materialize(cargs.resolve());
  if (rc.data.root.empty()) throw ConfigError("no dataset: pass --data or a config with data.root");
  return prepare_dataset(rc);
}

int cmd_entropy(const std::string& teacher_path, const std::string& data_root, const ConfigArgs& cargs,
                const std::string& temps, std::size_t samples, std::uint64_t seed, const std::string& split) {
  EntropyStudyConfig cfg;
  cfg.temperatures = parse_list(temps);
  cfg.sample_count = samples;
  cfg.seed = seed;
  try {
    cfg.validate();
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  }
  const json args{{"teacher", teacher_path}, {"data", data_root}, {"temperatures", cfg.temperatures},
                  {"samples", samples}, {"seed", seed}, {"split", split}};
  const fs::path dir = start_run("entropy", args, seed);
  const DatasetSpec data = dataset_from_args(data_root, cargs);
  auto teacher = load_model(teacher_path);
  if (teacher->class_count() != data.class_count) {
    throw ConfigError("checkpoint has " + std::to_string(teacher->class_count()) + " classes, dataset has " +
                      std::to_string(data.class_count));
  }
  const std::size_t split_size = load_split(data, split).size();
  if (samples > split_size) {
    throw ConfigError("sample count " + std::to_string(samples) + " exceeds the " + split + " split size " +
                      std::to_string(split_size));
  }
  const EntropyReport report = entropy_study(*teacher, data, split, cfg);
  const ReportFiles files = render_report(report, dir / "entropy");
  for (const auto& s : report.series) {
    std::printf("T=%-5g lowest-bin share %.4f  near-max share %.4f\n", s.temperature, s.lowest_bin_share(), s.near_max_share());
  }
  std::printf("wrote %s, %s, %s\n", files.figure.c_str(), files.table.c_str(), files.summary.c_str());
  return kOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_root, const ConfigArgs& cargs, const std::string& split) {
  const json args{{"checkpoint", checkpoint}, {"data", data_root}, {"split", split}};
  const fs::path dir = start_run("eval", args, 0);
  const DatasetSpec data = dataset_from_args(data_root, cargs);
  auto model = load_model(checkpoint);
  if (model->class_count() != data.class_count) {
    throw ConfigError("checkpoint has " + std::to_string(model->class_count()) + " classes, dataset has " +
                      std::to_string(data.class_count));
  }
  const EvalResult r = evaluate(*model, data, split);
  std::ostringstream table;
  table << "class\tiou\n";
  const auto iou = per_class_iou(r.confusion);
  for (std::size_t c = 0; c < iou.size(); ++c) {
    table << c << '\t';
    if (iou[c]) table << std::fixed << std::setprecision(2) << 100.0 * *iou[c];
    else table << "n/a";
    table << '\n';
  }
  table << "mIoU\t" << std::fixed << std::setprecision(2) << r.miou << '\n';
  std::cout << table.str();
  std::ofstream(dir / "iou.tsv") << table.str();
  std::ofstream conf(dir / "confusion.tsv");
  write_confusion_table(conf, r.confusion);
  return kOk;
}

int cmd_synth(const std::string& out, SyntheticSceneConfig cfg) {
  const json args{{"out", out}, {"image_size", cfg.image_size}, {"class_count", cfg.class_count},
                  {"train", cfg.train_count}, {"val", cfg.val_count}, {"seed", cfg.seed}};
  start_run("synth", args, cfg.seed);
  if (cfg.class_count < 2) throw ConfigError("--classes must be >= 2");
  generate_synthetic(cfg, out);
  std::printf("wrote %zu train / %zu val samples to %s\n", cfg.train_count, cfg.val_count, out.c_str());
  return kOk;
}

int cmd_plan(const std::vector<std::string>& datasets, const std::vector<std::string>& students) {
  std::cout << to_json(stage_protocol(datasets, students)).dump(2) << '\n';
  return kOk;
}

int cmd_presets() {
  for (const auto& p : presets()) std::printf("%-26s %s\n", p.name.c_str(), p.description.c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge-distillation training and analysis for semantic segmentation"};
  app.set_version_flag("--version", KDSEG_VERSION);
  app.require_subcommand(1);

  ConfigArgs train_args;
  bool dry_run = false;
  auto* train_cmd = app.add_subcommand("train", "train a student (optionally with a teacher)");
  train_args.attach(train_cmd);
  train_cmd->add_flag("--dry-run", dry_run, "print the resolved configuration and exit");

  std::string trial_config, trial_result;
  auto* trial_cmd = app.add_subcommand("trial", "run one sweep trial (used by `sweep`)");
  trial_cmd->add_option("--config", trial_config, "resolved configuration")->required();
  trial_cmd->add_option("--result", trial_result, "result file")->required();
  trial_cmd->group("");

  std::string plan_path, resume;
  bool sweep_dry = false, mock = false;
  auto* sweep_cmd = app.add_subcommand("sweep", "run a staged hyperparameter sweep");
  sweep_cmd->add_option("plan", plan_path, "sweep plan (JSON)")->required();
  sweep_cmd->add_option("--resume", resume, "continue the sweep in this directory");
  sweep_cmd->add_flag("--dry-run", sweep_dry, "validate and print the plan");
  sweep_cmd->add_flag("--mock", mock, "use the analytic mock objective instead of training");

  std::vector<std::string> plan_datasets{"cityscapes", "ade20k", "pascalvoc"}, plan_students{"effnet", "resnet"};
  auto* plan_cmd = app.add_subcommand("plan", "print the staged sweep plan for the tuned presets");
  plan_cmd->add_option("--datasets", plan_datasets)->delimiter(',');
  plan_cmd->add_option("--students", plan_students)->delimiter(',');

  std::string teacher_path, data_root, temps = "1,2,4,8,16", split = "val";
  std::size_t samples = 800;
  std::uint64_t seed = 0;
  ConfigArgs entropy_args;
  auto* entropy_cmd = app.add_subcommand("entropy", "entropy of temperature-scaled teacher outputs");
  entropy_cmd->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
  entropy_cmd->add_option("--data", data_root, "dataset root with manifest.json");
  entropy_args.attach(entropy_cmd);
  entropy_cmd->add_option("--temperatures", temps, "comma-separated temperatures")->capture_default_str();
  entropy_cmd->add_option("--samples", samples, "images to sample")->capture_default_str();
  entropy_cmd->add_option("--seed", seed, "sampling seed")->capture_default_str();
  entropy_cmd->add_option("--split", split)->capture_default_str();

  std::string checkpoint, eval_data, eval_split = "val";
  ConfigArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", checkpoint)->required();
  eval_cmd->add_option("--data", eval_data, "dataset root with manifest.json");
  eval_args.attach(eval_cmd);
  eval_cmd->add_option("--split", eval_split)->capture_default_str();

  std::string synth_out;
  SyntheticSceneConfig synth;
  auto* synth_cmd = app.add_subcommand("synth", "generate the synthetic shapes dataset");
  synth_cmd->add_option("--out", synth_out)->required();
  synth_cmd->add_option("--size", synth.image_size)->capture_default_str();
  synth_cmd->add_option("--classes", synth.class_count)->capture_default_str();
  synth_cmd->add_option("--train", synth.train_count)->capture_default_str();
  synth_cmd->add_option("--val", synth.val_count)->capture_default_str();
  synth_cmd->add_option("--seed", synth.seed)->capture_default_str();

  auto* presets_cmd = app.add_subcommand("presets", "list presets");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*train_cmd) return cmd_train(train_args, dry_run);
    if (*trial_cmd) return cmd_trial(trial_config, trial_result);
    if (*sweep_cmd) return cmd_sweep(plan_path, resume, sweep_dry, mock);
    if (*plan_cmd) return cmd_plan(plan_datasets, plan_students);
    if (*entropy_cmd) return cmd_entropy(teacher_path, data_root, entropy_args, temps, samples, seed, split);
    if (*eval_cmd) return cmd_eval(checkpoint, eval_data, eval_args, eval_split);
    if (*synth_cmd) return cmd_synth(synth_out, synth);
    if (*presets_cmd) return cmd_presets();
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << " [term " << e.term() << "]\n";
    return kDivergence;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const ValidationError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const UnknownModelError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}
