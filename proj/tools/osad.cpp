// Command-line entry point: data generation, splitting, training, evaluation,
// error analysis, budget planning and experiment grids.
//
// Exit codes: 0 success, 2 configuration error, 3 run failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "osad/experiment.hpp"

using namespace osad;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kRunFailure = 3;

const char* kGridHelp =
    "Grid file: `key = value` lines before the first `[name]` header apply to every row;\n"
    "each `[name]` section adds one row with its own overrides. `grid.seeds = 1,2,3`\n"
    "repeats every row once per seed. Rows whose config hash already has an ok entry\n"
    "in OUT/results.jsonl are skipped.\n\n"
    "results.csv columns:\n"
    "  name       section name\n"
    "  hash       config hash (every key except output)\n"
    "  status     ok | error\n"
    "  seed       run seed\n"
    "  split      full/weak/unlabeled ratios\n"
    "  method     none | mean_teacher | mixmatch | fixmatch\n"
    "  attention  none | gaussian | ufa\n"
    "  ib         true | false\n"
    "  map@T      mAP at tIoU T for T in 0.3 0.4 0.5 0.6 0.7\n"
    "  map_avg    mAP averaged over tIoU 0.5:0.05:0.95\n"
    "  miss       share of GT duration not covered by a same-class detection\n"
    "  cls        share of detection duration on a matched GT of another class\n"
    "  bkgd       share of detection duration outside every GT\n"
    "  seconds    wall time of the row\n"
    "  error      failure message for error rows\n"
    "results.json holds the same rows as a JSON array; results.jsonl is the append-only log.";

// `--<key>` flags for every config key not already taken by the command, collected as raw strings.
struct ConfigFlags {
  std::map<std::string, std::string> values;
  std::string file;
  bool override_file = false;

  void add_to(CLI::App& app) {
    app.add_option("--config", file, "Config file of `key = value` lines")->check(CLI::ExistingFile);
    app.add_flag("--override", override_file, "Command-line keys take precedence over the config file");
    for (const auto& key : ExperimentConfig::keys())
      if (!app.get_option_no_throw("--" + key)) app.add_option("--" + key, values[key], "config key " + key);
  }

  ExperimentConfig build() const {
    ExperimentConfig c;
    std::string text;
    if (!file.empty()) {
      std::ifstream in(file);
      if (!in) throw ConfigError("cannot read config " + file);
      std::stringstream ss;
      ss << in.rdbuf();
      text = ss.str();
    }
    auto apply_flags = [&] {
      for (const auto& [k, v] : values)
        if (!v.empty()) c.set(k, v);
    };
    if (override_file) {
      c.apply(text);
      apply_flags();
    } else {
      apply_flags();
      c.apply(text);
    }
    return c;
  }
};

void print_json(const nlohmann::ordered_json& j) { std::cout << j.dump(2) << std::endl; }

nlohmann::ordered_json errors_json(const ErrorBreakdown& e) {
  return {{"miss", e.miss}, {"cls", e.cls}, {"bkgd", e.bkgd}, {"correct", e.correct}};
}

Corpus corpus_for_eval(const std::string& path, const ExperimentConfig& c) {
  if (!path.empty()) return load_corpus(path);
  return prepare_data(c).test;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Omni-supervised temporal action detection toolkit"};
  app.require_subcommand(1);
  app.footer(kGridHelp);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic corpus");
  ConfigFlags gen_flags;
  std::string gen_out;
  gen->add_option("--out", gen_out, "Corpus directory")->required();
  gen_flags.add_to(*gen);

  // split
  auto* split = app.add_subcommand("split", "Assign supervision levels to a stored corpus");
  std::string split_corpus, split_out;
  std::vector<double> split_ratios;
  std::uint64_t split_seed = 0;
  split->add_option("--corpus", split_corpus, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  split->add_option("--ratios", split_ratios, "full,weak,unlabeled")->required()->delimiter(',')->expected(3);
  split->add_option("--seed", split_seed, "Split seed");
  split->add_option("--out", split_out, "Output corpus directory (default: in place)");

  // train
  auto* tr = app.add_subcommand("train", "Train a model");
  ConfigFlags train_flags;
  train_flags.add_to(*tr);

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ConfigFlags eval_flags;
  std::string eval_ckpt, eval_corpus, eval_out;
  ev->add_option("--checkpoint", eval_ckpt, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--corpus", eval_corpus, "Corpus directory (default: the config's test corpus)");
  ev->add_option("--out", eval_out, "Directory for detections.txt, map.csv and summary.json");
  eval_flags.add_to(*ev);

  // error-analysis
  auto* ea = app.add_subcommand("error-analysis", "Miss / cls / bkgd breakdown of a detection file");
  std::string ea_dets, ea_corpus;
  ErrorOptions ea_opts{0.5, 0.3};
  ea->add_option("--detections", ea_dets, "Detection file")->required()->check(CLI::ExistingFile);
  ea->add_option("--corpus", ea_corpus, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  ea->add_option("--tiou", ea_opts.tiou_threshold, "Matching tIoU")->capture_default_str();
  ea->add_option("--min-score", ea_opts.min_score, "Ignore detections below this score")->capture_default_str();

  // budget-plan
  auto* bp = app.add_subcommand("budget-plan", "Split a video set under an annotation budget");
  std::string bp_policy;
  BudgetPolicy policy;
  int bp_videos = 0;
  double bp_fraction = -1.0;
  bp->add_option("--policy", bp_policy, "full | weak | mixed")->required();
  bp->add_option("--budget", policy.budget_units, "Budget in units")->required();
  bp->add_option("--videos", bp_videos, "Number of videos")->required();
  bp->add_option("--cost-full", policy.cost_full, "Units per fully labeled video")->capture_default_str();
  bp->add_option("--cost-weak", policy.cost_weak, "Units per weakly labeled video")->capture_default_str();
  bp->add_option("--full-fraction", bp_fraction, "Fully labeled fraction for the mixed policy");

  // grid
  auto* gr = app.add_subcommand("grid", "Run a resumable experiment grid (CSV schema below)");
  std::string grid_file;
  GridOptions grid_opts;
  gr->add_option("--grid", grid_file, "Grid file")->required()->check(CLI::ExistingFile);
  gr->add_option("--out", grid_opts.out_dir, "Results directory")->required();
  gr->add_option("--jobs", grid_opts.jobs, "Parallel worker processes")->capture_default_str();
  gr->footer(kGridHelp);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*gen) {
      const auto c = gen_flags.build();
      c.data.validate();
      Corpus corpus = generate_corpus(c.data, c.videos);
      if (c.split != std::array<double, 3>{1.0, 0.0, 0.0}) apply_split(corpus, make_split(corpus, c.split, c.split_seed));
      save_corpus(corpus, gen_out);
      print_json({{"out", gen_out}, {"videos", corpus.size()}});
    } else if (*split) {
      Corpus corpus = load_corpus(split_corpus);
      const std::array<double, 3> r{split_ratios[0], split_ratios[1], split_ratios[2]};
      const auto manifest = make_split(corpus, r, split_seed);
      apply_split(corpus, manifest);
      save_corpus(corpus, split_out.empty() ? split_corpus : split_out);
      int counts[3] = {0, 0, 0};
      for (const auto& [id, s] : manifest.assignment) ++counts[static_cast<int>(s)];
      print_json({{"full", counts[static_cast<int>(Supervision::Full)]},
                  {"weak", counts[static_cast<int>(Supervision::Weak)]},
                  {"unlabeled", counts[static_cast<int>(Supervision::Unlabeled)]}});
    } else if (*tr) {
      const auto c = train_flags.build();
      c.validate();
      std::optional<TrainResult> trained;
      try {
        trained.emplace(train(c));
      } catch (const DivergenceError& e) {
        std::cerr << "diverged at step " << e.step << ": " << e.last_report << std::endl;
        return kRunFailure;
      }
      const TrainResult& res = *trained;
      nlohmann::ordered_json j{{"steps", res.log.size()}, {"hash", c.hash()}, {"best_loss", res.best_loss}};
      if (!res.log.empty()) j["final"] = nlohmann::json::parse(res.log.back())["total"];
      if (!res.final_checkpoint.empty()) j["final_checkpoint"] = res.final_checkpoint.string();
      if (!res.best_checkpoint.empty()) j["best_checkpoint"] = res.best_checkpoint.string();
      print_json(j);
    } else if (*ev) {
      const auto c = eval_flags.build();
      const Corpus corpus = corpus_for_eval(eval_corpus, c);
      const auto dets = evaluate_checkpoint(eval_ckpt, corpus, EvalOptions::from(c));
      const auto gt = ground_truth(corpus);
      const auto m = mean_ap(dets, gt, thumos_thresholds());
      const auto errors = error_decomposition(dets, gt, {c.error_tiou, c.error_min_score});
      auto summary_json = nlohmann::ordered_json::parse(map_summary_json(m, &errors));
      const Model model = Model::load(eval_ckpt);
      if (model.config().attention == AttentionMode::Ufa) {
        const auto mask = attention_mask_iou(model, corpus);
        summary_json["attention_mask_iou"] = {{"iou", mask.iou}, {"baseline", mask.baseline}};
      }
      const auto summary = summary_json.dump();
      if (!eval_out.empty()) {
        fs::create_directories(eval_out);
        write_detections(dets, fs::path(eval_out) / "detections.txt");
        write_map_csv(m, fs::path(eval_out) / "map.csv");
        std::ofstream(fs::path(eval_out) / "summary.json") << summary << '\n';
      }
      std::cout << summary << std::endl;
    } else if (*ea) {
      const auto dets = read_detections(ea_dets);
      const auto e = error_decomposition(dets, ground_truth(load_corpus(ea_corpus)), ea_opts);
      print_json(errors_json(e));
    } else if (*bp) {
      policy.name = budget_policy_from_string(bp_policy);
      if (bp_fraction >= 0.0 || policy.name == BudgetPolicyName::Mixed) {
        if (bp_fraction < 0.0) throw BudgetError("mixed policy needs --full-fraction");
        policy.mixed_full_fraction = bp_fraction;
      }
      const auto plan = plan_budget(policy, bp_videos);
      std::cout << nlohmann::ordered_json::parse(plan_to_json(plan, policy, bp_videos)).dump(2) << std::endl;
    } else if (*gr) {
      std::ifstream in(grid_file);
      std::stringstream ss;
      ss << in.rdbuf();
      const auto rows = run_experiment_grid(parse_grid(ss.str()), grid_opts);
      int failed = 0;
      std::cout << grid_csv_header() << '\n';
      for (const auto& r : rows) {
        std::cout << to_csv(r) << '\n';
        failed += r.status != "ok";
      }
      std::cout << std::flush;
      if (failed > 0) {
        std::cerr << failed << " grid row(s) failed" << std::endl;
        return kRunFailure;
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return kConfigError;
  } catch (const BudgetError& e) {
    std::cerr << "budget error: " << e.what() << std::endl;
    return kConfigError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << std::endl;
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "run failed: " << e.what() << std::endl;
    return kRunFailure;
  }
  return kOk;
}
