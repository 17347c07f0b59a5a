#include "osad/experiment.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "json.hpp"

using namespace osad;
namespace fs = std::filesystem;

namespace {

BudgetPolicy table_policy(BudgetPolicyName name) {
  BudgetPolicy p;
  p.name = name;
  p.budget_units = 320.0;
  if (name == BudgetPolicyName::Mixed) p.mixed_full_fraction = 0.15;
  return p;
}

ExperimentConfig tiny() {
  ExperimentConfig c;
  c.videos = 3;
  c.test_videos = 2;
  c.steps = 4;
  c.seed = 5;
  c.data.seed = 5;
  c.data.frames = 40;
  c.conv_channels = {4, 6, 6};
  c.predictor_hidden = 8;
  return c;
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("osad_experiment_" + name);
  fs::remove_all(p);
  return p;
}

std::size_t line_count(const fs::path& f) {
  std::ifstream in(f);
  std::size_t n = 0;
  for (std::string l; std::getline(in, l);) n += !l.empty();
  return n;
}

}  // namespace

TEST(Budget, FullRow) {
  const auto plan = plan_budget(table_policy(BudgetPolicyName::Full), 200);
  EXPECT_EQ(plan.full, 40);
  EXPECT_EQ(plan.weak, 0);
  EXPECT_EQ(plan.unlabeled, 160);
  EXPECT_DOUBLE_EQ(plan.spend, 320.0);
  EXPECT_DOUBLE_EQ(plan.ratios[0], 0.20);
  EXPECT_DOUBLE_EQ(plan.ratios[2], 0.80);
  EXPECT_FALSE(plan.discrepancy);
}

TEST(Budget, MixedRow) {
  const auto plan = plan_budget(table_policy(BudgetPolicyName::Mixed), 200);
  EXPECT_EQ(plan.full, 30);
  EXPECT_EQ(plan.weak, 80);
  EXPECT_EQ(plan.unlabeled, 90);
  EXPECT_DOUBLE_EQ(plan.spend, 320.0);
  EXPECT_DOUBLE_EQ(plan.ratios[0], 0.15);
  EXPECT_DOUBLE_EQ(plan.ratios[1], 0.40);
  EXPECT_DOUBLE_EQ(plan.ratios[2], 0.45);
  EXPECT_FALSE(plan.discrepancy);
}

TEST(Budget, WeakRowReportsRoundingDiscrepancy) {
  const auto plan = plan_budget(table_policy(BudgetPolicyName::Weak), 200);
  EXPECT_EQ(plan.full, 15);
  EXPECT_EQ(plan.weak, 185);
  EXPECT_EQ(plan.unlabeled, 0);
  EXPECT_DOUBLE_EQ(plan.spend, 320.0);
  ASSERT_TRUE(plan.discrepancy);
  EXPECT_NE(plan.discrepancy->find("8%/92%/0%"), std::string::npos) << *plan.discrepancy;
  EXPECT_NE(plan.discrepancy->find("16 full + 184 weak (312 units)"), std::string::npos) << *plan.discrepancy;
}

TEST(Budget, Errors) {
  auto p = table_policy(BudgetPolicyName::Mixed);
  p.mixed_full_fraction = 0.5;  // 100 full videos cost 800 units
  EXPECT_THROW(plan_budget(p, 200), BudgetError);
  p.mixed_full_fraction.reset();
  EXPECT_THROW(plan_budget(p, 200), BudgetError);
  auto q = table_policy(BudgetPolicyName::Full);
  q.budget_units = -1;
  EXPECT_THROW(plan_budget(q, 200), BudgetError);
  q.budget_units = 10;
  q.cost_full = 0;
  EXPECT_THROW(plan_budget(q, 200), BudgetError);
  EXPECT_THROW(budget_policy_from_string("half"), BudgetError);
  EXPECT_EQ(budget_policy_from_string("MIXED"), BudgetPolicyName::Mixed);
}

TEST(Budget, NeverExceedsBudgetProperty) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> budget(0.0, 2000.0), cost(0.1, 20.0), frac(0.0, 1.0);
  std::uniform_int_distribution<int> videos(0, 300), kind(0, 2);
  int checked = 0;
  for (int i = 0; i < 2000; ++i) {
    BudgetPolicy p;
    p.name = static_cast<BudgetPolicyName>(kind(rng));
    p.budget_units = budget(rng);
    p.cost_full = cost(rng);
    p.cost_weak = cost(rng);
    if (p.name == BudgetPolicyName::Mixed) p.mixed_full_fraction = frac(rng);
    const int n = videos(rng);
    BudgetPlan plan;
    try {
      plan = plan_budget(p, n);
    } catch (const BudgetError&) {
      ASSERT_EQ(p.name, BudgetPolicyName::Mixed);
      ASSERT_GT(std::floor(*p.mixed_full_fraction * n) * p.cost_full, p.budget_units);
      continue;
    }
    ++checked;
    ASSERT_LE(plan.spend, p.budget_units + 1e-9);
    ASSERT_GE(plan.full, 0);
    ASSERT_GE(plan.weak, 0);
    ASSERT_GE(plan.unlabeled, 0);
    ASSERT_EQ(plan.full + plan.weak + plan.unlabeled, n);
    if (p.name == BudgetPolicyName::Full && plan.full < n) ASSERT_GT(plan.spend, p.budget_units - p.cost_full);
  }
  EXPECT_GT(checked, 1000);
}

TEST(Budget, JsonCarriesCounts) {
  const auto p = table_policy(BudgetPolicyName::Weak);
  const auto j = nlohmann::json::parse(plan_to_json(plan_budget(p, 200), p, 200));
  EXPECT_EQ(j["full"], 15);
  EXPECT_EQ(j["weak"], 185);
  EXPECT_TRUE(j.contains("discrepancy"));
}

TEST(Grid, ParseSectionsAndSeeds) {
  const auto rows = parse_grid(
      "train.steps = 3\n"
      "grid.seeds = 1, 2\n"
      "[sup]\n"
      "[ufa]\n"
      "model.attention = ufa\n");
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].name, "sup");
  EXPECT_EQ(rows[0].config.seed, 1u);
  EXPECT_EQ(rows[1].config.seed, 2u);
  EXPECT_EQ(rows[1].config.data.seed, 2u);
  EXPECT_EQ(rows[2].name, "ufa");
  EXPECT_EQ(rows[2].config.attention, AttentionMode::Ufa);
  EXPECT_EQ(rows[0].config.steps, 3);
  EXPECT_EQ(rows[3].config.steps, 3);
  EXPECT_THROW(parse_grid("[broken\n"), ConfigError);
  EXPECT_THROW(parse_grid("[a]\nno.such = 1\n"), ConfigError);
}

TEST(Grid, RowJsonRoundTrip) {
  GridRow r;
  r.name = "a,b";
  r.hash = "abc";
  r.seed = 9;
  r.split = "0.5/0/0.5";
  r.method = "mixmatch";
  r.attention = "ufa";
  r.ib = true;
  r.map = {0.1, 0.2, 0.3, 0.4, 0.5};
  r.map_avg = 0.3;
  r.errors.bkgd = 0.25;
  const auto back = grid_row_from_json(to_json(r));
  EXPECT_EQ(back.name, r.name);
  EXPECT_EQ(back.map, r.map);
  EXPECT_EQ(back.ib, true);
  EXPECT_DOUBLE_EQ(back.errors.bkgd, 0.25);
  EXPECT_EQ(to_csv(r).rfind("\"a,b\",abc,ok,9,", 0), 0u);
}

TEST(Grid, SingleSupervisedRow) {
  const auto dir = temp_dir("single");
  const auto rows = run_experiment_grid({{"sup", tiny()}}, {dir, 1});
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].status, "ok") << rows[0].error;
  EXPECT_EQ(rows[0].method, "none");
  EXPECT_EQ(rows[0].map.size(), grid_thresholds().size());
  EXPECT_EQ(rows[0].seed, 5u);
  EXPECT_EQ(line_count(dir / "results.csv"), 2u);
  std::ifstream csv(dir / "results.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, grid_csv_header());
  const auto j = nlohmann::json::parse(std::ifstream(dir / "results.json"));
  EXPECT_EQ(j.size(), 1u);
}

TEST(Grid, UfaRowDiffersOnlyInAttentionAndMetrics) {
  auto ufa = tiny();
  ufa.attention = AttentionMode::Ufa;
  const auto rows = run_experiment_grid({{"sup", tiny()}, {"ufa", ufa}}, {});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].seed, rows[1].seed);
  EXPECT_EQ(rows[0].split, rows[1].split);
  EXPECT_EQ(rows[0].method, rows[1].method);
  EXPECT_EQ(rows[0].ib, rows[1].ib);
  EXPECT_NE(rows[0].attention, rows[1].attention);
  EXPECT_NE(rows[0].hash, rows[1].hash);
}

TEST(Grid, FailedRowRecordedAndGridContinues) {
  const auto dir = temp_dir("failed");
  fs::create_directories(dir);
  std::ofstream(dir / "garbage.osad") << "not a corpus";
  auto bad = tiny();
  bad.corpus_path = (dir / "garbage.osad").string();
  const auto rows = run_experiment_grid({{"bad", bad}, {"sup", tiny()}}, {});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].status, "error");
  EXPECT_FALSE(rows[0].error.empty());
  EXPECT_EQ(rows[1].status, "ok");
}

TEST(Grid, ResumesByHash) {
  const auto dir = temp_dir("resume");
  auto second = tiny();
  second.seed = 6;
  run_experiment_grid({{"a", tiny()}}, {dir, 1});
  EXPECT_EQ(line_count(dir / "results.jsonl"), 1u);
  const auto rows = run_experiment_grid({{"a", tiny()}, {"b", second}}, {dir, 1});
  EXPECT_EQ(line_count(dir / "results.jsonl"), 2u);  // only the new row was run
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1].seed, 6u);
  EXPECT_EQ(line_count(dir / "results.csv"), 3u);
}

TEST(Grid, ParallelJobsMatchSequential) {
  auto other = tiny();
  other.seed = 8;
  const std::vector<NamedConfig> rows{{"a", tiny()}, {"b", other}};
  const auto seq = run_experiment_grid(rows, {});
  const auto par = run_experiment_grid(rows, {temp_dir("parallel"), 2});
  ASSERT_EQ(par.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(par[i].status, "ok") << par[i].error;
    EXPECT_EQ(par[i].hash, seq[i].hash);
    EXPECT_EQ(par[i].map, seq[i].map);
  }
}
