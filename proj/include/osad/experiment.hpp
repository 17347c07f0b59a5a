#pragma once

// Annotation-budget planning and resumable experiment grids.

#include <array>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "osad/trainer.hpp"

namespace osad {

enum class BudgetPolicyName { Full, Weak, Mixed };
std::string to_string(BudgetPolicyName p);
BudgetPolicyName budget_policy_from_string(const std::string& s);

struct BudgetPolicy {
  BudgetPolicyName name = BudgetPolicyName::Full;
  double budget_units = 0.0;
  double cost_full = 8.0;  // units per fully labeled video
  double cost_weak = 1.0;  // units per weakly labeled video
  std::optional<double> mixed_full_fraction;
};

struct BudgetError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct BudgetPlan {
  int full = 0;
  int weak = 0;
  int unlabeled = 0;
  double spend = 0.0;
  std::array<double, 3> ratios{0.0, 0.0, 0.0};  // full, weak, unlabeled
  /// Set when the split does not land on whole percentages; describes the
  /// whole-percent reading and the counts and spend it would imply.
  std::optional<std::string> discrepancy;
};

/// Video counts are floored so the spend never exceeds the budget.
/// WEAK labels every video it can afford weakly, then upgrades weak videos to full with what is left.
BudgetPlan plan_budget(const BudgetPolicy& policy, int n_videos);
std::string plan_to_json(const BudgetPlan& plan, const BudgetPolicy& policy, int n_videos);

struct GridRow {
  std::string name;
  std::string hash;
  std::string status = "ok";  // ok | error
  std::string error;
  std::uint64_t seed = 0;
  std::string split;  // "full/weak/unlabeled"
  std::string method;
  std::string attention;
  bool ib = false;
  std::vector<double> map;  // at grid_thresholds()
  double map_avg = 0.0;
  ErrorBreakdown errors;
  double seconds = 0.0;
};

/// tIoU thresholds reported per row: 0.3 ... 0.7.
std::vector<double> grid_thresholds();
std::string grid_csv_header();
std::string to_csv(const GridRow& row);
std::string to_json(const GridRow& row);
GridRow grid_row_from_json(const std::string& line);

struct NamedConfig {
  std::string name;
  ExperimentConfig config;
};

/// Grid file: keys before the first `[name]` header apply to every row; each
/// section adds a row with its own overrides. `grid.seeds = a,b,...` repeats
/// every row once per seed (setting `seed` and `data.seed`).
std::vector<NamedConfig> parse_grid(const std::string& text);

struct GridOptions {
  std::filesystem::path out_dir;  // results.jsonl, results.csv, results.json
  int jobs = 1;                   // > 1 runs rows in forked worker processes
};

/// Trains and evaluates one config on its test corpus. Never throws; failures become error rows.
GridRow run_grid_row(const NamedConfig& row);

/// Runs rows whose config hash has no successful entry in out_dir yet, appends them to
/// results.jsonl, then rewrites results.csv and results.json from every recorded row.
std::vector<GridRow> run_experiment_grid(const std::vector<NamedConfig>& rows, const GridOptions& options);

}  // namespace osad
