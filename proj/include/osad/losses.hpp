#pragma once

// Training objectives: supervised proposal losses, the foreground-attention
// objective, the weak video-level loss with its bottleneck penalty, and the
// named-term report that assembles the total.

#include <string>
#include <vector>

#include "osad/autograd.hpp"
#include "osad/model.hpp"
#include "osad/proposals.hpp"

namespace osad {

struct LossWeights {
  double comp_s = 0.1;
  double reg_s = 0.1;
  double comp_u = 0.1;
  double reg_u = 0.1;
  double unlabeled = 1.0;
  double weak = 0.5;
  double ib = 0.1;
  double ufa = 0.1;
  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

struct LossTerm {
  std::string name;
  ad::Var value;  // scalar
  double weight = 1.0;
};

/// Named scalar terms; total() is their weighted sum.
class LossReport {
 public:
  void add(std::string name, ad::Var value, double weight = 1.0);
  void flag(std::string message) { flags_.push_back(std::move(message)); }
  /// Adds every term of `other` as prefix + name with weight scaled by `scale`.
  void merge(const LossReport& other, const std::string& prefix, double scale);

  ad::Var total() const;
  double value(const std::string& name) const;
  bool has(const std::string& name) const;
  const std::vector<LossTerm>& terms() const { return terms_; }
  const std::vector<std::string>& flags() const { return flags_; }
  bool empty() const { return terms_.empty(); }

  /// One JSON object per step for the training log.
  std::string to_json_line(long step, double lr) const;

 private:
  std::vector<LossTerm> terms_;
  std::vector<std::string> flags_;
};

/// Rows of x [N, ...] at `rows`, in order (duplicates allowed).
ad::Var select_rows(const ad::Var& x, const std::vector<std::size_t>& rows);

/// cls over FOREGROUND + BACKGROUND, comp over FOREGROUND + INCOMPLETE, reg over FOREGROUND.
LossReport supervised_loss(const HeadOutputs& heads, const std::vector<ProposalTargets>& targets,
                           double comp_weight, double reg_weight);

struct UfaResult {
  ad::Var objective;  // log(mse_zeta) - log(mse_psi); gradient only through f, b, f_next
  ad::Var mse_psi;    // gradient only into u_psi
  ad::Var mse_zeta;   // gradient only into u_zeta
  bool clamped = false;
};

/// `seq` rows may carry gradient to attention; predictor fits see detached copies.
UfaResult ufa_loss(const MotionSequence& seq, const PredictorWeights& trainable, const PredictorWeights& frozen,
                   double eps = 1e-12);

struct WeakScore {
  ad::Var score;  // [C] over classes 1..C, sums to 1
  bool fallback = false;
};

/// sum_i lambda_i s_i / sum_i lambda_i over rows of `scores` [N, K]; uniform mean if sum lambda < 1e-8.
WeakScore weighted_video_score(const ad::Var& lambda, const ad::Var& scores);
/// lambda_i = 1 - P(background | p_i); averaged class scores renormalized over 1..C.
WeakScore weak_video_score(const ad::Var& cls_prob);

struct IbResult {
  ad::Var penalty;
  bool degenerate = false;
};

/// Normalized lambda_bar-weighted variance of proposal features p [N, c].
IbResult ib_penalty(const ad::Var& p, const ad::Var& lambda_bar, double eps = 1e-8);

/// Video-level loss for a weakly labeled video: mean -log score over its classes,
/// plus the bottleneck term on background-leaning proposals when ib_weight > 0.
LossReport weak_loss(const HeadOutputs& heads, const ad::Var& p, const std::vector<int>& labels, double ib_weight);

/// Per-pool means of per-video reports combined with the pool weights.
LossReport total_loss(const std::vector<LossReport>& supervised, const std::vector<LossReport>& unlabeled,
                      const std::vector<LossReport>& weak, const LossWeights& weights);

}  // namespace osad
