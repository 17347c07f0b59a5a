#pragma once

// Augmentations and the three semi-supervised adapters (Mean Teacher,
// MixMatch, FixMatch) that produce the unlabeled loss terms.

#include <string>
#include <vector>

#include "osad/losses.hpp"
#include "osad/model.hpp"
#include "osad/proposals.hpp"
#include "osad/random.hpp"

namespace osad {

enum class SslMethod { None, MeanTeacher, MixMatch, FixMatch };
std::string to_string(SslMethod m);
SslMethod ssl_method_from_string(const std::string& s);

enum class AugKind { Noise, HFlip, TResample, TResolution, TFlip };
enum class Strength { Weak, Strong };

struct AugmentationSpec {
  std::vector<AugKind> kinds;
  double noise_std = 0.05;
  double resolution_factor = 2.0;  // 2 or 0.5, used by TResolution
  Strength strength = Strength::Weak;
};

/// Weak: noise plus a coin-flip mirror. Strong: weak plus one temporal augmentation.
AugmentationSpec draw_augmentation(Strength strength, double noise_std, Rng& rng);

/// Frame-level part of an augmentation (noise, mirror) on [T, C, H, W].
Tensor augment_frames(const Tensor& frames, const AugmentationSpec& spec, Rng& rng);

/// Sampling-level part (resample, resolution, reversal). Sets *fallback when a
/// halved resolution had to use one frame.
FrameSample augment_samples(const FrameSample& base, const Window& w, int T, const AugmentationSpec& spec, Rng& rng,
                            int L, bool* fallback = nullptr);

/// Row-wise p^(1/T) renormalized.
Tensor sharpen(const Tensor& simplex_rows, double temperature);
/// Bernoulli probabilities sharpened as two-way simplices.
Tensor sharpen_binary(const Tensor& probs, double temperature);
Tensor mixup(const Tensor& a, const Tensor& b, double lambda);
ad::Var mixup(const ad::Var& a, const ad::Var& b, double lambda);

/// Head outputs as plain values, used as fixed targets.
struct PseudoLabel {
  Tensor cls;   // [N, C+1]
  Tensor comp;  // [N, C]
  Tensor reg;   // [N, 2C]
  std::vector<double> confidence() const;  // max cls prob per row
};
PseudoLabel values_of(const HeadOutputs& h);

// Loss cores on head outputs; each returns terms cls / comp [/ reg] weighted for L^U.

/// KL(teacher || student) on cls, mean Bernoulli KL on comp, L1 on reg.
LossReport mean_teacher_loss(const HeadOutputs& student, const PseudoLabel& teacher, double comp_w, double reg_w);
/// Squared error on cls and comp simplices, L1 on reg.
LossReport mixmatch_loss(const HeadOutputs& student, const PseudoLabel& target, double comp_w, double reg_w);

struct FixMatchStats {
  double cls_mask_fraction = 0.0;
  double comp_mask_fraction = 0.0;
};
/// Cross-entropy to confident hard labels (divided by N); comp masked by its own confidence; no reg term.
LossReport fixmatch_loss(const HeadOutputs& student, const PseudoLabel& weak_view, double tau, double comp_w,
                         FixMatchStats* stats = nullptr);

struct SslConfig {
  SslMethod method = SslMethod::None;
  int mixmatch_k = 2;
  double sharpen_temperature = 0.5;
  double beta_alpha = 0.75;
  double tau = 0.95;
  double noise_std = 0.05;
  double ema_decay = 0.999;
  int samples_per_proposal = 5;  // L
  int context_frames = 2;
  bool augment = true;  // false: every view uses the plain sampled frames
  bool operator==(const SslConfig&) const = default;
};

/// One unlabeled video for a step: frames and the proposals drawn for it.
struct UnlabeledInput {
  const Tensor* frames = nullptr;  // [T, C, H, W]
  std::vector<Window> windows;
};

struct AdapterOutput {
  LossReport report;
  /// Live-weight features of each video's student view, reusable by other losses.
  std::vector<FrameFeatures> student_features;
  FixMatchStats fixmatch;
};

/// Runs the configured adapter on a batch. `teacher` is used by Mean Teacher,
/// `frozen` (current live values as constants) by MixMatch/FixMatch pseudo labels.
AdapterOutput run_adapter(const SslConfig& config, const std::vector<UnlabeledInput>& batch,
                          const ModelConfig& model_config, const Weights& live, const Weights& teacher,
                          const Weights& frozen, const LossWeights& weights, Rng& rng);

}  // namespace osad
