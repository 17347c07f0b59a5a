#pragma once

// Sliding-window proposals, per-proposal frame sampling, and target assignment.
// Frame indices are 1-based and inclusive throughout.

#include <array>
#include <optional>
#include <vector>

#include "osad/autograd.hpp"
#include "osad/corpus.hpp"
#include "osad/random.hpp"

namespace osad {

struct Window {
  int start = 1;
  int end = 1;
  int length() const { return end - start + 1; }
  bool operator==(const Window&) const = default;
};

/// Windows of each scale with stride max(1, floor(scale * stride_ratio)),
/// starting at frame 1 and clipped to [1, T]. Scales longer than T give nothing.
std::vector<Window> generate_windows(int T, const std::vector<int>& scales, double stride_ratio);

/// Default multi-scale window set for clips of the synthetic corpus.
std::vector<int> default_scales();

struct FrameSample {
  std::vector<int> frames;         // L frames, one per segment, in temporal order
  std::vector<int> left_context;   // drawn from the left half-span extension
  std::vector<int> right_context;  // drawn from the right half-span extension
};

/// One uniform draw inside each of L equal segments, plus `context` draws on each side.
FrameSample sample_frames(const Window& w, int T, Rng& rng, int L = 5, int context = 2);
/// Segment midpoints; used at inference.
FrameSample center_frames(const Window& w, int T, int L = 5, int context = 2);

/// Inclusive-frame temporal IoU.
double frame_tiou(const Window& a, const Window& b);
/// Fraction of `w`'s frames inside `gt`.
double own_overlap(const Window& w, const Window& gt);

enum class ProposalKind { Foreground, Incomplete, Background, Ignored };

struct AssignmentThresholds {
  double fg_tiou = 0.7;
  double bg_tiou = 0.1;
  double incomplete_overlap = 0.8;
  double incomplete_tiou = 0.3;
};

struct ProposalTargets {
  ProposalKind kind = ProposalKind::Ignored;
  int label = 0;          // 0 background, else class (for INCOMPLETE: the overlapped GT's class)
  int completeness = 0;   // 1 for FOREGROUND, 0 for INCOMPLETE
  std::array<double, 2> reg{0.0, 0.0};
  std::optional<std::size_t> matched_gt;
};

ProposalTargets assign_targets(const Window& w, const std::vector<Segment>& gt,
                               const AssignmentThresholds& th = {});

/// (dcenter, dloglen) with centre (s+e)/2 and length e-s+1.
std::array<double, 2> regression_targets(const Window& w, const Segment& gt);

/// Continuous-valued frame interval; start/end on the same inclusive-frame scale as Window.
struct RealSegment {
  double start = 0.0;
  double end = 0.0;
};
RealSegment apply_regression(const Window& w, const std::array<double, 2>& r);

/// Proposal pooling: p = mean of sampled z rows; context = [left mean, p, right mean].
struct ProposalFeatures {
  ad::Var p;        // [N, c]
  ad::Var context;  // [N, 3c]
};
ProposalFeatures pool_proposals(const ad::Var& z, const std::vector<FrameSample>& samples);

struct BalanceCounts {
  int foreground = 4;
  int incomplete = 4;
  int background = 8;
  bool operator==(const BalanceCounts&) const = default;
};

/// Indices of a class-balanced subset; kinds with too few members contribute all they have.
std::vector<std::size_t> balance_proposals(const std::vector<ProposalTargets>& targets, const BalanceCounts& counts,
                                           Rng& rng);

}  // namespace osad
