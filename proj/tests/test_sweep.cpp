#include <doctest.h>

#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>

#include "kdseg/error.hpp"
#include "kdseg/sweep.hpp"
#include "support.hpp"

using namespace kdseg;

namespace {

GridSpec lr_grid(const std::vector<double>& mu0, std::vector<std::uint64_t> seeds = {0}) {
  GridSpec g;
  g.axes[kMu0Axis] = mu0;
  g.axes[kGammaAxis] = {5e-4, 5e-5, 5e-6};
  g.seeds = std::move(seeds);
  return g;
}

const std::vector<double> kEffnetMu0{1e-1, 5e-2, 1e-2, 5e-3};

TrialResult trial(double mu0, std::vector<double> values) {
  TrialResult t;
  t.assignment = {{kMu0Axis, mu0}};
  std::uint64_t s = 0;
  for (double v : values) t.seeds.push_back({s++, v, ""});
  return t;
}

// Welford's streaming mean and population variance.
std::pair<double, double> welford(const std::vector<double>& xs) {
  double mean = 0.0, m2 = 0.0;
  std::size_t n = 0;
  for (double x : xs) {
    ++n;
    const double d = x - mean;
    mean += d / static_cast<double>(n);
    m2 += d * (x - mean);
  }
  return {mean, std::sqrt(m2 / static_cast<double>(n))};
}

}  // namespace

TEST_CASE("mock objective closed form") {
  CHECK(mock_objective({{kMu0Axis, 1e-2}, {kGammaAxis, 1e-5}}) == doctest::Approx(70.0));
  CHECK(mock_objective({{kMu0Axis, 1e-1}, {kGammaAxis, 1e-5}}) == doctest::Approx(69.0));
  CHECK(mock_objective({{"train.weights.pa", 1e-1}}) == doctest::Approx(70.0));
  CHECK(mock_objective({{"train.weights.pa", 1e1}}) == doctest::Approx(66.0));
  CHECK_THROWS_AS(mock_objective({{kMu0Axis, 0.0}}), ValidationError);
}

TEST_CASE("run_grid finds the mock argmax regardless of order and concurrency") {
  const GridSpec g = lr_grid(kEffnetMu0);
  const Objective f = [](const Assignment& a, std::uint64_t) { return mock_objective(a); };
  // Brute force over the grid.
  double best_v = -1e300;
  Assignment best_a;
  for (const auto& a : g.cells()) {
    if (mock_objective(a) > best_v) best_v = mock_objective(a), best_a = a;
  }
  CHECK(best_a == Assignment{{kMu0Axis, 1e-2}, {kGammaAxis, 5e-6}});

  for (std::optional<std::uint64_t> shuffle : {std::optional<std::uint64_t>{}, std::optional<std::uint64_t>{1},
                                               std::optional<std::uint64_t>{7}, std::optional<std::uint64_t>{99}}) {
    for (std::size_t conc : {1u, 3u}) {
      RunGridOptions o;
      o.shuffle_seed = shuffle;
      o.concurrency = conc;
      const SweepReport r = run_grid(g, f, o);
      CHECK(r.trials.size() == 12);
      CHECK(r.best_trial().assignment == best_a);
      CHECK(r.best_trial().mean == best_v);
    }
  }
}

TEST_CASE("execution order is shuffled but results are not") {
  const GridSpec g = lr_grid(kEffnetMu0, {0, 1});
  std::vector<std::string> order_a, order_b;
  std::mutex m;
  auto record = [&](std::vector<std::string>& out) {
    return [&](const Assignment& a, std::uint64_t seed) {
      std::lock_guard lock(m);
      out.push_back(assignment_key(a) + "#" + std::to_string(seed));
      return mock_objective(a) + 0.1 * static_cast<double>(seed);
    };
  };
  RunGridOptions oa, ob;
  oa.shuffle_seed = 3;
  ob.shuffle_seed = 4;
  const SweepReport ra = run_grid(g, record(order_a), oa);
  const SweepReport rb = run_grid(g, record(order_b), ob);
  CHECK(order_a != order_b);
  REQUIRE(ra.trials.size() == rb.trials.size());
  for (std::size_t i = 0; i < ra.trials.size(); ++i) {
    CHECK(ra.trials[i].values == rb.trials[i].values);
    CHECK(ra.trials[i].std == doctest::Approx(0.05));
  }
}

TEST_CASE("grid cells and validation") {
  GridSpec single;
  single.axes[kMu0Axis] = {1e-2};
  const SweepReport r = run_grid(single, [](const Assignment&, std::uint64_t) { return 42.0; });
  CHECK(r.trials.size() == 1);
  CHECK(r.best == 0);
  CHECK(r.within_one_std == std::vector<std::size_t>{0});

  const auto cells = lr_grid({1e-1, 1e-2}).cells();
  REQUIRE(cells.size() == 6);
  // Axes iterate in name order, last axis fastest.
  CHECK(cells[0] == Assignment{{kGammaAxis, 5e-4}, {kMu0Axis, 1e-1}});
  CHECK(cells[1] == Assignment{{kGammaAxis, 5e-4}, {kMu0Axis, 1e-2}});
  CHECK(cells[2] == Assignment{{kGammaAxis, 5e-5}, {kMu0Axis, 1e-1}});

  GridSpec empty;
  CHECK_THROWS_AS(empty.validate(), ConfigError);
  empty.axes["train.mu0"] = {};
  CHECK_THROWS_AS(empty.validate(), ConfigError);
  GridSpec no_seeds = lr_grid({1e-2}, {});
  CHECK_THROWS_AS(no_seeds.validate(), ConfigError);
}

TEST_CASE("failed trials are recorded, not fatal") {
  const GridSpec g = lr_grid(kEffnetMu0, {0, 1});
  const SweepReport r = run_grid(g, [](const Assignment& a, std::uint64_t seed) -> double {
    if (a.at(kMu0Axis) == 1e-2 && a.at(kGammaAxis) == 5e-5) throw DivergenceError("ce", "loss became NaN");
    if (a.at(kMu0Axis) == 1e-1 && seed == 1) return NAN;
    return mock_objective(a);
  });
  std::size_t failed = 0;
  for (const auto& t : r.trials) {
    if (t.assignment.at(kMu0Axis) == 1e-2 && t.assignment.at(kGammaAxis) == 5e-5) {
      CHECK(t.status == TrialResult::Status::failed);
      CHECK(t.seeds[0].error.find("NaN") != std::string::npos);
      ++failed;
      CHECK_FALSE(r.underlined(static_cast<std::size_t>(&t - r.trials.data())));
    }
    if (t.assignment.at(kMu0Axis) == 1e-1) {
      CHECK(t.status == TrialResult::Status::ok);
      CHECK(t.values.size() == 1);
      CHECK_FALSE(t.seeds[1].value.has_value());
    }
  }
  CHECK(failed == 1);
  CHECK(r.best_trial().status == TrialResult::Status::ok);
  CHECK(r.best_trial().assignment.at(kMu0Axis) == 1e-2);
  CHECK(r.best_trial().assignment.at(kGammaAxis) != 5e-5);

  CHECK_THROWS_AS(run_grid(g, [](const Assignment&, std::uint64_t) -> double { throw std::runtime_error("x"); }),
                  SweepError);
}

TEST_CASE("ties prefer smaller mu0, then smaller gamma") {
  // Shape of the published ResNet student grid, which ties at 70.55.
  const GridSpec g = lr_grid({5e-2, 1e-2, 5e-3});
  const SweepReport r = run_grid(g, [](const Assignment& a, std::uint64_t) {
    const double m = a.at(kMu0Axis), w = a.at(kGammaAxis);
    if ((m == 1e-2 && w == 5e-4) || (m == 5e-2 && w == 5e-6)) return 70.55;
    return 60.0;
  });
  CHECK(r.best_trial().assignment == Assignment{{kMu0Axis, 1e-2}, {kGammaAxis, 5e-4}});

  const SweepReport g2 = run_grid(lr_grid({1e-2}), [](const Assignment&, std::uint64_t) { return 1.0; });
  CHECK(g2.best_trial().assignment.at(kGammaAxis) == 5e-6);
}

TEST_CASE("mean and std match a streaming computation") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> d(60.0, 3.0);
  for (std::size_t n : {1u, 2u, 3u, 5u, 17u}) {
    std::vector<double> xs(n);
    for (auto& x : xs) x = d(rng);
    const auto [m, s] = mean_and_std(xs);
    const auto [wm, ws] = welford(xs);
    CHECK(std::abs(m - wm) < 1e-9);
    CHECK(std::abs(s - ws) < 1e-9);
  }
  CHECK(mean_and_std({4.0}).second == 0.0);
  CHECK(mean_and_std({1.0, 3.0}) == std::pair<double, double>{2.0, 1.0});
}

TEST_CASE("within one standard deviation rule on a published column") {
  // Temperature column for PascalVOC EffNet: mean, std.
  const std::vector<std::pair<double, double>> column{{66.24, 0.46}, {66.08, 0.16}, {65.91, 0.26},
                                                      {65.02, 0.82}, {66.11, 0.67}, {66.11, 0.13}};
  std::vector<TrialResult> trials;
  for (std::size_t i = 0; i < column.size(); ++i) {
    // Two seeds at mean +- std reproduce (mean, population std) exactly.
    const auto [m, s] = column[i];
    TrialResult t = trial(static_cast<double>(i + 1), {m - s, m + s});
    t.assignment = {{"train.temperature", static_cast<double>(i + 1)}};
    trials.push_back(t);
  }
  const SweepReport r = summarize({"train.temperature"}, trials);
  CHECK(r.best == 0);
  CHECK(r.best_trial().mean == doctest::Approx(66.24));
  CHECK(r.best_trial().std == doctest::Approx(0.46));
  CHECK(r.within_one_std == std::vector<std::size_t>{0, 1, 2, 4, 5});
  CHECK_FALSE(r.underlined(3));

  const std::string text = report_table(r);
  CHECK(text.find("**66.24 ± 0.46**") != std::string::npos);
  CHECK(text.find("_66.08 ± 0.16_") != std::string::npos);
  CHECK(text.find("_65.02") == std::string::npos);
  const std::string tsv = report_table(r, TableStyle::tsv);
  CHECK(tsv.find("\tbest\n") != std::string::npos);
  CHECK(tsv.find("within_one_std") != std::string::npos);
}

TEST_CASE("the best trial is always in the underline set") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(50.0, 70.0);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<TrialResult> trials;
    for (int i = 0; i < 6; ++i) trials.push_back(trial(1e-3 * (i + 1), {u(rng), u(rng), u(rng)}));
    const SweepReport r = summarize({kMu0Axis}, trials);
    CHECK(r.underlined(r.best));
    for (std::size_t i = 0; i < r.trials.size(); ++i) CHECK(r.trials[i].mean <= r.best_trial().mean);
  }
}

TEST_CASE("trial store resumes finished work") {
  const auto dir = testing::scratch_dir("sweep_store");
  const auto path = dir / "trials.jsonl";
  const GridSpec g = lr_grid(kEffnetMu0, {0, 1});
  std::atomic<int> calls{0};
  const Objective f = [&](const Assignment& a, std::uint64_t seed) {
    ++calls;
    if (a.at(kMu0Axis) == 1e-1 && seed == 1) throw std::runtime_error("boom");
    return mock_objective(a);
  };
  SweepReport first;
  {
    TrialStore store(path);
    RunGridOptions o;
    o.store = &store;
    first = run_grid(g, f, o);
  }
  CHECK(calls == 24);

  // Torn final line from an interrupted writer.
  { std::ofstream(path, std::ios::app) << "{\"key\":\"train.gam"; }
  TrialStore reopened(path);
  CHECK(reopened.find({{kMu0Axis, 1e-2}, {kGammaAxis, 5e-5}}, 1)->value == mock_objective({{kMu0Axis, 1e-2}, {kGammaAxis, 5e-5}}));
  const auto failed = reopened.find({{kMu0Axis, 1e-1}, {kGammaAxis, 5e-4}}, 1);
  REQUIRE(failed.has_value());
  CHECK_FALSE(failed->value.has_value());
  CHECK(failed->error == "boom");
  const auto stamp = reopened.started({{kMu0Axis, 1e-2}, {kGammaAxis, 5e-5}}, 0);
  REQUIRE(stamp.has_value());

  RunGridOptions o;
  o.store = &reopened;
  const SweepReport second = run_grid(g, f, o);
  CHECK(calls == 24);
  CHECK(second.best_trial().assignment == first.best_trial().assignment);
  CHECK(reopened.started({{kMu0Axis, 1e-2}, {kGammaAxis, 5e-5}}, 0) == stamp);

  GridSpec wider = g;
  wider.seeds = {0, 1, 2};
  run_grid(wider, f, o);
  CHECK(calls == 36);
}

TEST_CASE("stage protocol") {
  const SweepPlan plan = stage_protocol({"cityscapes"}, {"resnet", "effnet"});
  REQUIRE(plan.stages.size() == 12);
  const StagePlan& solo = plan.stages[0];
  CHECK(solo.name == "cityscapes-resnet-student");
  CHECK(solo.axes.at(kMu0Axis) == std::vector<double>{5e-2, 1e-2, 5e-3});
  CHECK(solo.axes.at(kGammaAxis) == std::vector<double>{5e-4, 5e-5, 5e-6});
  CHECK(solo.expected == Assignment{{kMu0Axis, 1e-2}, {kGammaAxis, 5e-4}});
  CHECK(solo.seeds.size() == 3);

  const StagePlan& kd = plan.stages[1];
  CHECK(kd.preset == "cityscapes-resnet-kd");
  CHECK(kd.fixed.at("train.temperature") == 1.0);
  CHECK(kd.expected == Assignment{{kMu0Axis, 1e-2}, {kGammaAxis, 5e-4}});

  const StagePlan& tau = plan.stages[2];
  CHECK(tau.axes.at("train.temperature") == std::vector<double>{1, 2, 3, 4, 6, 8});
  CHECK(tau.inherit.at(kMu0Axis) == "cityscapes-resnet-kd");

  CHECK(plan.stages[3].axes.at("train.weights.pa") == std::vector<double>{1e-3, 1e-2, 1e-1, 1e0, 1e1});
  CHECK(plan.stages[4].axes.at("train.weights.ho") == std::vector<double>{1e-4, 1e-3, 1e-2, 1e-1});
  CHECK(plan.stages[5].axes.at("train.weights.ifv") ==
        std::vector<double>{1e-4, 1e-3, 1e-2, 1e-1, 1e0, 1e1, 5e1, 1e2});
  CHECK(plan.stages[5].inherit.at("train.temperature") == "cityscapes-resnet-tau");

  CHECK(plan.stages[6].axes.at(kMu0Axis) == kEffnetMu0);
  CHECK(plan.stages[6].expected == Assignment{{kMu0Axis, 1e-1}, {kGammaAxis, 5e-6}});

  CHECK_THROWS_AS(stage_protocol({"coco"}, {"resnet"}), ConfigError);
  CHECK_THROWS_AS(weight_grid("kl"), ConfigError);
  CHECK_THROWS_AS(mu0_grid("vit"), ConfigError);
}

TEST_CASE("sweep plan validation and JSON round trip") {
  SweepPlan plan = stage_protocol({"pascalvoc"}, {"effnet"});
  plan.mock = true;
  plan.overrides = {"eta=10"};
  const SweepPlan back = sweep_plan_from_json(to_json(plan));
  CHECK(to_json(back) == to_json(plan));

  SweepPlan bad = plan;
  bad.stages[0].axes.clear();
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("empty grid"), ConfigError);
  bad = plan;
  std::swap(bad.stages[1], bad.stages[2]);
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("unresolved dependency"), ConfigError);
  bad = plan;
  bad.metric = "median";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = plan;
  bad.stages[1].name = bad.stages[0].name;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(sweep_plan_from_json({{"stages", 3}}), ConfigError);
  CHECK_THROWS_AS(SweepPlan{}.validate(), ConfigError);
}

TEST_CASE("run_process reports exit status") {
  const auto dir = testing::scratch_dir("run_process");
  CHECK(run_process({"/bin/sh", "-c", "echo hi; exit 3"}, dir / "log.txt") == 3);
  std::ifstream in(dir / "log.txt");
  std::string line;
  std::getline(in, line);
  CHECK(line == "hi");
  CHECK(run_process({"/bin/sh", "-c", "kill -9 $$"}, dir / "log2.txt") == 137);
  CHECK_THROWS_AS(run_process({"/nonexistent/binary"}, dir / "log3.txt"), IoError);
}
