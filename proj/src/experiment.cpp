#include "osad/experiment.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

namespace osad {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string to_string(BudgetPolicyName p) {
  switch (p) {
    case BudgetPolicyName::Full: return "full";
    case BudgetPolicyName::Weak: return "weak";
    case BudgetPolicyName::Mixed: return "mixed";
  }
  return "?";
}

BudgetPolicyName budget_policy_from_string(const std::string& s) {
  std::string l;
  for (char c : s) l += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (l == "full") return BudgetPolicyName::Full;
  if (l == "weak") return BudgetPolicyName::Weak;
  if (l == "mixed") return BudgetPolicyName::Mixed;
  throw BudgetError("unknown budget policy: " + s);
}

namespace {

int floor_count(double x) { return static_cast<int>(std::floor(x + 1e-9)); }

std::string pct(double x) {
  std::ostringstream os;
  os << std::setprecision(6) << 100.0 * x << "%";
  return os.str();
}

}  // namespace

BudgetPlan plan_budget(const BudgetPolicy& p, int n) {
  if (n < 0) throw BudgetError("video count must be >= 0");
  if (!(p.budget_units >= 0.0)) throw BudgetError("budget must be >= 0");
  if (!(p.cost_full > 0.0) || !(p.cost_weak > 0.0)) throw BudgetError("annotation costs must be > 0");
  BudgetPlan plan;
  switch (p.name) {
    case BudgetPolicyName::Full:
      plan.full = std::min(n, floor_count(p.budget_units / p.cost_full));
      break;
    case BudgetPolicyName::Weak: {
      const int labeled = std::min(n, floor_count(p.budget_units / p.cost_weak));
      const double left = p.budget_units - labeled * p.cost_weak;
      plan.full = std::min(labeled, floor_count(left / p.cost_full));
      plan.weak = labeled - plan.full;
      break;
    }
    case BudgetPolicyName::Mixed: {
      if (!p.mixed_full_fraction) throw BudgetError("mixed policy needs a full fraction");
      const double f = *p.mixed_full_fraction;
      if (!(f >= 0.0 && f <= 1.0)) throw BudgetError("mixed full fraction must be in [0, 1]");
      plan.full = floor_count(f * n);
      const double full_cost = plan.full * p.cost_full;
      if (full_cost > p.budget_units + 1e-9)
        throw BudgetError("mixed full fraction costs " + std::to_string(full_cost) + " units, over the budget");
      plan.weak = std::min(n - plan.full, floor_count((p.budget_units - full_cost) / p.cost_weak));
      break;
    }
  }
  plan.unlabeled = n - plan.full - plan.weak;
  const int upgraded = p.name == BudgetPolicyName::Weak ? plan.full : 0;
  plan.spend = plan.full * p.cost_full + (plan.weak + upgraded) * p.cost_weak;
  if (n > 0) plan.ratios = {double(plan.full) / n, double(plan.weak) / n, double(plan.unlabeled) / n};

  // Report how a whole-percent rounding of this split would read.
  bool whole = true;
  for (double r : plan.ratios) whole = whole && std::abs(r * 100.0 - std::round(r * 100.0)) < 1e-9;
  if (!whole && n > 0) {
    std::array<int, 3> rounded{};
    rounded[0] = static_cast<int>(std::lround(plan.ratios[0] * 100.0));
    rounded[2] = static_cast<int>(std::lround(plan.ratios[2] * 100.0));
    rounded[1] = 100 - rounded[0] - rounded[2];
    const int full_r = static_cast<int>(std::lround(rounded[0] / 100.0 * n));
    const int weak_r = static_cast<int>(std::lround(rounded[1] / 100.0 * n));
    const double spend_r = full_r * p.cost_full + weak_r * p.cost_weak;
    std::ostringstream os;
    os << "split " << pct(plan.ratios[0]) << "/" << pct(plan.ratios[1]) << "/" << pct(plan.ratios[2])
       << " is not whole-percent; rounded to " << rounded[0] << "%/" << rounded[1] << "%/" << rounded[2]
       << "% it reads as " << full_r << " full + " << weak_r << " weak (" << spend_r << " units), while this plan has "
       << plan.full << " full + " << plan.weak << " weak (" << plan.spend << " units)";
    plan.discrepancy = os.str();
  }
  return plan;
}

std::string plan_to_json(const BudgetPlan& plan, const BudgetPolicy& p, int n) {
  json j;
  j["policy"] = to_string(p.name);
  j["videos"] = n;
  j["budget"] = p.budget_units;
  j["cost_full"] = p.cost_full;
  j["cost_weak"] = p.cost_weak;
  if (p.mixed_full_fraction) j["mixed_full_fraction"] = *p.mixed_full_fraction;
  j["full"] = plan.full;
  j["weak"] = plan.weak;
  j["unlabeled"] = plan.unlabeled;
  j["spend"] = plan.spend;
  j["ratios"] = plan.ratios;
  if (plan.discrepancy) j["discrepancy"] = *plan.discrepancy;
  return j.dump();
}

// ---------------------------------------------------------------------------

std::vector<double> grid_thresholds() { return thumos_thresholds(); }

std::string grid_csv_header() {
  std::string h = "name,hash,status,seed,split,method,attention,ib";
  for (double t : grid_thresholds()) {
    std::ostringstream os;
    os << ",map@" << t;
    h += os.str();
  }
  return h + ",map_avg,miss,cls,bkgd,seconds,error";
}

namespace {

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c == '\n' ? ' ' : c);
  return out + "\"";
}

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

}  // namespace

std::string to_csv(const GridRow& r) {
  std::string s = csv_escape(r.name) + "," + r.hash + "," + r.status + "," + std::to_string(r.seed) + "," + r.split +
                  "," + r.method + "," + r.attention + "," + (r.ib ? "true" : "false");
  for (std::size_t i = 0; i < grid_thresholds().size(); ++i) s += "," + (i < r.map.size() ? num(r.map[i]) : "");
  s += "," + num(r.map_avg) + "," + num(r.errors.miss) + "," + num(r.errors.cls) + "," + num(r.errors.bkgd) + "," +
       num(r.seconds) + "," + csv_escape(r.error);
  return s;
}

std::string to_json(const GridRow& r) {
  json j;
  j["name"] = r.name;
  j["hash"] = r.hash;
  j["status"] = r.status;
  j["error"] = r.error;
  j["seed"] = r.seed;
  j["split"] = r.split;
  j["method"] = r.method;
  j["attention"] = r.attention;
  j["ib"] = r.ib;
  j["thresholds"] = grid_thresholds();
  j["map"] = r.map;
  j["map_avg"] = r.map_avg;
  j["miss"] = r.errors.miss;
  j["cls"] = r.errors.cls;
  j["bkgd"] = r.errors.bkgd;
  j["correct"] = r.errors.correct;
  j["seconds"] = r.seconds;
  return j.dump();
}

GridRow grid_row_from_json(const std::string& line) {
  const auto j = json::parse(line);
  GridRow r;
  r.name = j.at("name");
  r.hash = j.at("hash");
  r.status = j.at("status");
  r.error = j.value("error", "");
  r.seed = j.at("seed");
  r.split = j.at("split");
  r.method = j.at("method");
  r.attention = j.at("attention");
  r.ib = j.at("ib");
  r.map = j.at("map").get<std::vector<double>>();
  r.map_avg = j.at("map_avg");
  r.errors.miss = j.at("miss");
  r.errors.cls = j.at("cls");
  r.errors.bkgd = j.at("bkgd");
  r.errors.correct = j.value("correct", 0.0);
  r.seconds = j.at("seconds");
  return r;
}

std::vector<NamedConfig> parse_grid(const std::string& text) {
  std::string base;
  std::vector<std::pair<std::string, std::string>> sections;
  std::vector<std::uint64_t> seeds;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::string t = line.substr(0, line.find('#'));
    const auto b = t.find_first_not_of(" \t\r");
    t = b == std::string::npos ? "" : t.substr(b, t.find_last_not_of(" \t\r") - b + 1);
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']' || t.size() < 3) throw ConfigError("bad grid section header: " + t);
      sections.emplace_back(t.substr(1, t.size() - 2), "");
      continue;
    }
    if (t.rfind("grid.seeds", 0) == 0) {
      const auto eq = t.find('=');
      if (eq == std::string::npos) throw ConfigError("grid.seeds needs a value");
      std::stringstream ss(t.substr(eq + 1));
      std::string item;
      while (std::getline(ss, item, ',')) {
        try {
          seeds.push_back(std::stoull(item));
        } catch (const std::exception&) {
          throw ConfigError("bad grid seed: " + item);
        }
      }
      continue;
    }
    (sections.empty() ? base : sections.back().second) += t + "\n";
  }
  if (sections.empty()) sections.emplace_back("default", "");
  std::vector<NamedConfig> rows;
  for (const auto& [name, body] : sections) {
    if (seeds.empty()) {
      rows.push_back({name, ExperimentConfig::parse(base + body)});
      continue;
    }
    for (auto s : seeds) {
      auto c = ExperimentConfig::parse(base + body);
      c.seed = s;
      c.data.seed = s;
      c.split_seed = s;
      rows.push_back({name, c});
    }
  }
  return rows;
}

GridRow run_grid_row(const NamedConfig& nc) {
  const auto& c = nc.config;
  GridRow r;
  r.name = nc.name;
  r.hash = c.hash();
  r.seed = c.seed;
  {
    std::ostringstream os;
    os << c.split[0] << "/" << c.split[1] << "/" << c.split[2];
    r.split = os.str();
  }
  r.method = to_string(c.ssl.method);
  r.attention = to_string(c.attention);
  r.ib = c.ib_enabled;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    const Dataset d = prepare_data(c);
    const auto res = train(c, d.train);
    const auto dets = detect(res.model, d.test, EvalOptions::from(c));
    const auto gt = ground_truth(d.test);
    const auto m = mean_ap(dets, gt, grid_thresholds());
    r.map = m.map;
    r.map_avg = m.map_avg;
    r.errors = error_decomposition(dets, gt, {c.error_tiou, c.error_min_score});
  } catch (const std::exception& e) {
    r.status = "error";
    r.error = e.what();
    r.map.assign(grid_thresholds().size(), 0.0);
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

namespace {

std::vector<GridRow> read_rows(const fs::path& file) {
  std::vector<GridRow> rows;
  std::ifstream in(file);
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    try {
      rows.push_back(grid_row_from_json(line));
    } catch (const std::exception&) {
      // A torn final line from an interrupted run; the row is simply redone.
    }
  }
  return rows;
}

// Runs rows in up to `jobs` forked children; each child writes its row to a file.
std::vector<GridRow> run_parallel(const std::vector<const NamedConfig*>& todo, int jobs, const fs::path& scratch) {
  fs::create_directories(scratch);
  std::vector<GridRow> out(todo.size());
  std::map<pid_t, std::size_t> running;
  std::size_t next = 0;
  auto reap = [&](pid_t pid, int status) {
    const std::size_t i = running.at(pid);
    running.erase(pid);
    const fs::path f = scratch / (std::to_string(i) + ".json");
    std::ifstream in(f);
    std::string line;
    if (WIFEXITED(status) && WEXITSTATUS(status) == 0 && std::getline(in, line)) {
      out[i] = grid_row_from_json(line);
    } else {
      out[i] = GridRow{};
      out[i].name = todo[i]->name;
      out[i].hash = todo[i]->config.hash();
      out[i].seed = todo[i]->config.seed;
      out[i].status = "error";
      out[i].error = "worker process failed";
      out[i].map.assign(grid_thresholds().size(), 0.0);
    }
    fs::remove(f);
  };
  while (next < todo.size() || !running.empty()) {
    while (next < todo.size() && static_cast<int>(running.size()) < jobs) {
      const pid_t pid = fork();
      if (pid < 0) throw std::runtime_error("fork failed");
      if (pid == 0) {
        const GridRow r = run_grid_row(*todo[next]);
        std::ofstream(scratch / (std::to_string(next) + ".json")) << to_json(r) << '\n';
        _exit(0);
      }
      running[pid] = next++;
    }
    int status = 0;
    const pid_t pid = waitpid(-1, &status, 0);
    if (pid > 0 && running.count(pid)) reap(pid, status);
  }
  fs::remove_all(scratch);
  return out;
}

}  // namespace

std::vector<GridRow> run_experiment_grid(const std::vector<NamedConfig>& rows, const GridOptions& o) {
  if (o.jobs < 1) throw ConfigError("jobs must be >= 1");
  for (const auto& r : rows) r.config.validate();
  const bool write = !o.out_dir.empty();
  const fs::path jsonl = o.out_dir / "results.jsonl";
  std::set<std::string> done;
  if (write) {
    fs::create_directories(o.out_dir);
    for (const auto& r : read_rows(jsonl))
      if (r.status == "ok") done.insert(r.hash);
  }

  std::vector<const NamedConfig*> todo;
  std::set<std::string> queued;
  for (const auto& r : rows) {
    const auto h = r.config.hash();
    if (done.count(h) || queued.count(h)) continue;
    queued.insert(h);
    todo.push_back(&r);
  }

  std::ofstream log;
  if (write) log.open(jsonl, std::ios::app);
  std::vector<GridRow> fresh;
  if (o.jobs == 1 || todo.size() <= 1) {
    for (const auto* r : todo) {
      fresh.push_back(run_grid_row(*r));
      if (write) log << to_json(fresh.back()) << '\n' << std::flush;
    }
  } else {
    const fs::path scratch = (write ? o.out_dir : fs::temp_directory_path()) / (".grid_work_" + std::to_string(getpid()));
    fresh = run_parallel(todo, o.jobs, scratch);
    if (write)
      for (const auto& r : fresh) log << to_json(r) << '\n' << std::flush;
  }
  if (!write) return fresh;
  log.close();

  // Latest entry per hash, in first-seen order.
  std::vector<GridRow> all;
  std::map<std::string, std::size_t> where;
  for (auto& r : read_rows(jsonl)) {
    auto it = where.find(r.hash);
    if (it == where.end()) {
      where[r.hash] = all.size();
      all.push_back(r);
    } else if (r.status == "ok" || all[it->second].status != "ok") {
      all[it->second] = r;
    }
  }
  std::ofstream csv(o.out_dir / "results.csv");
  csv << grid_csv_header() << '\n';
  for (const auto& r : all) csv << to_csv(r) << '\n';
  json arr = json::array();
  for (const auto& r : all) arr.push_back(json::parse(to_json(r)));
  std::ofstream(o.out_dir / "results.json") << arr.dump(2) << '\n';

  // Rows requested in this call, in request order.
  std::vector<GridRow> result;
  for (const auto& r : rows) {
    auto it = where.find(r.config.hash());
    if (it != where.end()) {
      GridRow row = all[it->second];
      row.name = r.name;
      result.push_back(row);
    }
  }
  return result;
}

}  // namespace osad
