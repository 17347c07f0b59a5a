#pragma once

// Experiment configuration, the optimization loop, and checkpoint evaluation.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "osad/corpus.hpp"
#include "osad/eval.hpp"
#include "osad/losses.hpp"
#include "osad/model.hpp"
#include "osad/proposals.hpp"
#include "osad/ssl.hpp"

namespace osad {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Total loss became non-finite.
struct DivergenceError : std::runtime_error {
  DivergenceError(long step, std::string last_report);
  long step;
  std::string last_report;
};

struct ExperimentConfig {
  // Data. An empty corpus path generates `videos` clips from `data`.
  std::string corpus_path;
  int videos = 20;
  std::string test_corpus_path;
  int test_videos = 20;
  GeneratorSpec data;
  std::array<double, 3> split{1.0, 0.0, 0.0};  // full, weak, unlabeled
  std::uint64_t split_seed = 0;

  SslConfig ssl;
  LossWeights weights;
  AttentionMode attention = AttentionMode::None;
  MotionMode motion = MotionMode::Flow;
  bool ib_enabled = false;
  bool ufa_all_videos = true;  // false: UFA only on labeled videos
  std::vector<int> conv_channels{16, 32, 32};
  std::vector<int> conv_strides{2, 2, 1};
  int predictor_hidden = 64;
  double gaussian_sigma = 0.0;

  // Optimization.
  double lr = 0.1;
  double momentum = 0.9;
  int steps = 500;
  int batch_full = 2;
  int batch_unlabeled = 2;
  int batch_weak = 2;
  double grad_clip = 10.0;  // per parameter-group norm, 0 disables
  double ramp_fraction = 0.1;

  // Proposals.
  std::vector<int> scales = default_scales();
  double stride_ratio = 0.25;
  int samples = 5;  // L
  int context = 2;
  BalanceCounts balance;
  int unlabeled_windows = 8;
  int weak_windows = 24;

  // Evaluation.
  double nms_threshold = 0.4;
  double error_min_score = 0.3;
  double error_tiou = 0.5;

  // Output.
  std::string output_dir;  // empty: nothing written
  int checkpoint_every = 50;
  std::uint64_t seed = 0;

  void validate() const;
  ModelConfig model_config(const GeneratorSpec& data_spec) const;

  /// Flat `key = value` lines in a fixed order.
  std::string to_text() const;
  /// Stable hash of every setting except the output directory.
  std::string hash() const;
  /// Sets one key; throws ConfigError for unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  static std::vector<std::string> keys();
  /// Sets every `key = value` line of `text` on top of the current values.
  void apply(const std::string& text);
  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& file);

  bool operator==(const ExperimentConfig&) const = default;
};

/// Training and test corpora for a config (loaded or generated), with the split applied to training.
struct Dataset {
  Corpus train;
  Corpus test;
};
Dataset prepare_data(const ExperimentConfig& config);

/// Per-step loss assembly and parameter updates over a split corpus.
class Trainer {
 public:
  Trainer(ExperimentConfig config, const Corpus& corpus);

  /// Loss graph for `step` (no parameter change). Deterministic in (seed, step).
  LossReport forward(long step);
  /// forward + backward + momentum SGD + EMA; returns the step's report.
  LossReport step();

  long current_step() const { return step_; }
  double learning_rate(long step) const;
  double unlabeled_weight(long step) const;
  const Model& model() const { return model_; }
  Model& model() { return model_; }
  const ExperimentConfig& config() const { return config_; }

 private:
  struct Prepared {
    const VideoSample* video;
    Tensor frames;
    std::vector<Window> windows;
    std::vector<ProposalTargets> targets;  // FULL only
    std::vector<int> labels;               // WEAK only
  };

  std::vector<std::size_t> draw(const std::vector<std::size_t>& pool, int count, Rng& rng) const;
  std::vector<Window> subset(const std::vector<Window>& windows, int count, Rng& rng) const;

  ExperimentConfig config_;
  ModelConfig model_config_;
  Model model_;
  std::vector<Prepared> videos_;
  std::vector<std::size_t> full_, weak_, unlabeled_;
  std::vector<Tensor> velocity_;
  long step_ = 0;
};

struct TrainResult {
  Model model;
  std::vector<std::string> log;  // one JSON object per step
  std::filesystem::path final_checkpoint;
  std::filesystem::path best_checkpoint;
  double best_loss = 0.0;
};

/// Runs config.steps steps. With an output directory, writes train_log.jsonl,
/// config.txt, and the final/ and best/ checkpoints.
TrainResult train(const ExperimentConfig& config, const Corpus& corpus);
TrainResult train(const ExperimentConfig& config);

struct EvalOptions {
  std::vector<int> scales = default_scales();
  double stride_ratio = 0.25;
  int samples = 5;
  int context = 2;
  double nms_threshold = 0.4;
  static EvalOptions from(const ExperimentConfig& config);
};

/// Per proposal: class argmax over 1..C, score cls * comp at that class, regressed segment; then NMS.
std::vector<Detection> detect(const Model& model, const std::vector<const VideoSample*>& videos,
                              const EvalOptions& options = {});
std::vector<Detection> detect(const Model& model, const Corpus& corpus, const EvalOptions& options = {});
std::vector<Detection> evaluate_checkpoint(const std::filesystem::path& checkpoint, const Corpus& corpus,
                                           const EvalOptions& options = {});
std::vector<GroundTruth> ground_truth(const Corpus& corpus);

struct EvalSummary {
  MapResult map;
  ErrorBreakdown errors;
  std::size_t detections = 0;
};
EvalSummary summarize(const std::vector<Detection>& detections, const Corpus& corpus, const ErrorOptions& errors);

struct MaskIou {
  double iou = 0.0;       // mean over frames with a visible sprite
  double baseline = 0.0;  // mean sprite area fraction over the same frames
};
/// Attention upsampled to the frame grid, thresholded at 0.5, against the sprite masks.
MaskIou attention_mask_iou(const Model& model, const Corpus& corpus);

}  // namespace osad
