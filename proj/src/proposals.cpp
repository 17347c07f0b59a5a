#include "osad/proposals.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace osad {

std::vector<Window> generate_windows(int T, const std::vector<int>& scales, double stride_ratio) {
  if (scales.empty()) throw std::invalid_argument("generate_windows: no scales");
  if (!(stride_ratio > 0.0 && stride_ratio <= 1.0)) throw std::invalid_argument("stride_ratio must be in (0, 1]");
  std::vector<Window> out;
  for (int scale : scales) {
    if (scale < 1) throw std::invalid_argument("window scale must be >= 1");
    if (T < scale) continue;
    const int stride = std::max(1, static_cast<int>(std::floor(scale * stride_ratio)));
    for (int s = 1;; s += stride) {
      const int e = std::min(T, s + scale - 1);
      out.push_back({s, e});
      if (e == T) break;
    }
  }
  return out;
}

std::vector<int> default_scales() { return {4, 8, 12, 16, 20, 24, 32}; }

namespace {

void check_window(const Window& w, int T) {
  if (w.start < 1 || w.end < w.start || w.end > T) throw std::invalid_argument("window outside clip");
}

// Inclusive bounds of segment k of L over [s, e].
std::pair<int, int> segment_bounds(const Window& w, int k, int L) {
  const int len = w.length();
  const int lo = w.start + (k * len) / L;
  const int hi = std::max(lo, w.start + ((k + 1) * len) / L - 1);
  return {lo, hi};
}

std::pair<int, int> left_extension(const Window& w) {
  const int half = (w.end - w.start) / 2;
  return {std::max(1, w.start - half), w.start};
}

std::pair<int, int> right_extension(const Window& w, int T) {
  const int half = (w.end - w.start) / 2;
  return {w.end, std::min(T, w.end + half)};
}

}  // namespace

FrameSample sample_frames(const Window& w, int T, Rng& rng, int L, int context) {
  check_window(w, T);
  if (L < 1 || context < 0) throw std::invalid_argument("sample_frames: bad L or context count");
  FrameSample out;
  for (int k = 0; k < L; ++k) {
    auto [lo, hi] = segment_bounds(w, k, L);
    out.frames.push_back(uniform_int(rng, lo, hi));
  }
  auto [l0, l1] = left_extension(w);
  auto [r0, r1] = right_extension(w, T);
  for (int k = 0; k < context; ++k) out.left_context.push_back(uniform_int(rng, l0, l1));
  for (int k = 0; k < context; ++k) out.right_context.push_back(uniform_int(rng, r0, r1));
  return out;
}

FrameSample center_frames(const Window& w, int T, int L, int context) {
  check_window(w, T);
  if (L < 1 || context < 0) throw std::invalid_argument("center_frames: bad L or context count");
  FrameSample out;
  for (int k = 0; k < L; ++k) {
    auto [lo, hi] = segment_bounds(w, k, L);
    out.frames.push_back((lo + hi) / 2);
  }
  auto spread = [context](int a, int b, std::vector<int>& dst) {
    for (int k = 0; k < context; ++k) {
      const int lo = a + (k * (b - a + 1)) / context;
      const int hi = std::max(lo, a + ((k + 1) * (b - a + 1)) / context - 1);
      dst.push_back((lo + hi) / 2);
    }
  };
  auto [l0, l1] = left_extension(w);
  auto [r0, r1] = right_extension(w, T);
  spread(l0, l1, out.left_context);
  spread(r0, r1, out.right_context);
  return out;
}

double frame_tiou(const Window& a, const Window& b) {
  const int inter = std::min(a.end, b.end) - std::max(a.start, b.start) + 1;
  if (inter <= 0) return 0.0;
  const int uni = std::max(a.end, b.end) - std::min(a.start, b.start) + 1;
  return static_cast<double>(inter) / uni;
}

double own_overlap(const Window& w, const Window& gt) {
  const int inter = std::min(w.end, gt.end) - std::max(w.start, gt.start) + 1;
  return inter <= 0 ? 0.0 : static_cast<double>(inter) / w.length();
}

ProposalTargets assign_targets(const Window& w, const std::vector<Segment>& gt, const AssignmentThresholds& th) {
  ProposalTargets t;
  double best_iou = 0.0, max_overlap = 0.0;
  std::optional<std::size_t> best, incomplete;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const Window g{gt[i].start, gt[i].end};
    const double iou = frame_tiou(w, g);
    const double ov = own_overlap(w, g);
    if (iou > best_iou) {
      best_iou = iou;
      best = i;
    }
    max_overlap = std::max(max_overlap, ov);
    if (!incomplete && ov > th.incomplete_overlap && iou < th.incomplete_tiou) incomplete = i;
  }
  if (best && best_iou >= th.fg_tiou) {
    t.kind = ProposalKind::Foreground;
    t.label = gt[*best].label;
    t.completeness = 1;
    t.reg = regression_targets(w, gt[*best]);
    t.matched_gt = best;
  } else if (incomplete) {
    t.kind = ProposalKind::Incomplete;
    t.label = gt[*incomplete].label;
    t.completeness = 0;
    t.matched_gt = incomplete;
  } else if (best_iou <= th.bg_tiou && max_overlap <= th.incomplete_overlap) {
    t.kind = ProposalKind::Background;
  }
  return t;
}

std::array<double, 2> regression_targets(const Window& w, const Segment& gt) {
  if (w.end < w.start || gt.end < gt.start) throw std::invalid_argument("regression_targets: empty segment");
  const double len_p = w.length();
  const double len_g = gt.end - gt.start + 1;
  const double c_p = 0.5 * (w.start + w.end);
  const double c_g = 0.5 * (gt.start + gt.end);
  return {(c_g - c_p) / len_p, std::log(len_g / len_p)};
}

RealSegment apply_regression(const Window& w, const std::array<double, 2>& r) {
  if (w.end < w.start) throw std::invalid_argument("apply_regression: empty proposal");
  const double len_p = w.length();
  const double c = 0.5 * (w.start + w.end) + r[0] * len_p;
  const double len = len_p * std::exp(r[1]);
  return {c - 0.5 * (len - 1.0), c + 0.5 * (len - 1.0)};
}

ProposalFeatures pool_proposals(const ad::Var& z, const std::vector<FrameSample>& samples) {
  const std::size_t T = z->value.dim(0);
  const std::size_t N = samples.size();
  if (N == 0) throw std::invalid_argument("pool_proposals: no proposals");
  Tensor mp({N, T}), ml({N, T}), mr({N, T});
  auto fill = [T](Tensor& m, std::size_t row, const std::vector<int>& frames) {
    if (frames.empty()) throw std::invalid_argument("pool_proposals: empty frame list");
    const double w = 1.0 / static_cast<double>(frames.size());
    for (int f : frames) {
      if (f < 1 || static_cast<std::size_t>(f) > T) throw std::out_of_range("pool_proposals: frame outside clip");
      m.data[row * T + (f - 1)] += w;
    }
  };
  for (std::size_t i = 0; i < N; ++i) {
    fill(mp, i, samples[i].frames);
    fill(ml, i, samples[i].left_context);
    fill(mr, i, samples[i].right_context);
  }
  ProposalFeatures out;
  out.p = ad::combine_rows(mp, z);
  const ad::Var parts[] = {ad::combine_rows(ml, z), out.p, ad::combine_rows(mr, z)};
  out.context = ad::concat_cols(parts);
  return out;
}

std::vector<std::size_t> balance_proposals(const std::vector<ProposalTargets>& targets, const BalanceCounts& counts,
                                           Rng& rng) {
  std::vector<std::size_t> fg, inc, bg;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    switch (targets[i].kind) {
      case ProposalKind::Foreground: fg.push_back(i); break;
      case ProposalKind::Incomplete: inc.push_back(i); break;
      case ProposalKind::Background: bg.push_back(i); break;
      case ProposalKind::Ignored: break;
    }
  }
  std::vector<std::size_t> out;
  auto take = [&](std::vector<std::size_t>& pool, int n) {
    std::shuffle(pool.begin(), pool.end(), rng);
    const auto k = std::min<std::size_t>(pool.size(), static_cast<std::size_t>(std::max(0, n)));
    out.insert(out.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
  };
  take(fg, counts.foreground);
  take(inc, counts.incomplete);
  take(bg, counts.background);
  return out;
}

}  // namespace osad
