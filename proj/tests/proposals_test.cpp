#include "osad/proposals.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "gradcheck.hpp"

using namespace osad;
namespace oracle = osad::testing;

namespace {

// Enumerates every start position and keeps the ones a stride walk from 1 visits
// before some earlier window already reached T.
std::vector<Window> brute_windows(int T, const std::vector<int>& scales, double ratio) {
  std::vector<Window> out;
  for (int scale : scales) {
    if (T < scale) continue;
    const int stride = std::max(1, static_cast<int>(scale * ratio));
    bool reached = false;
    for (int s = 1; s <= T && !reached; ++s) {
      if ((s - 1) % stride != 0) continue;
      const int e = std::min(T, s + scale - 1);
      out.push_back({s, e});
      reached = e == T;
    }
  }
  return out;
}

// Frame-set based reference for the assignment rule.
ProposalKind brute_kind(const Window& w, const std::vector<Segment>& gt) {
  double best = 0, max_ov = 0;
  bool inc = false;
  for (const auto& g : gt) {
    std::set<int> a, b, u;
    for (int f = w.start; f <= w.end; ++f) a.insert(f);
    for (int f = g.start; f <= g.end; ++f) b.insert(f);
    int inter = 0;
    for (int f : a) inter += b.count(f);
    u = a;
    u.insert(b.begin(), b.end());
    const double iou = static_cast<double>(inter) / u.size();
    const double ov = static_cast<double>(inter) / a.size();
    best = std::max(best, iou);
    max_ov = std::max(max_ov, ov);
    if (ov > 0.8 && iou < 0.3) inc = true;
  }
  if (best >= 0.7) return ProposalKind::Foreground;
  if (inc) return ProposalKind::Incomplete;
  if (best <= 0.1 && max_ov <= 0.8) return ProposalKind::Background;
  return ProposalKind::Ignored;
}

}  // namespace

TEST(Windows, Examples) {
  EXPECT_EQ(generate_windows(10, {10}, 1.0), (std::vector<Window>{{1, 10}}));
  EXPECT_EQ(generate_windows(10, {5}, 0.5), (std::vector<Window>{{1, 5}, {3, 7}, {5, 9}, {7, 10}}));
  EXPECT_TRUE(generate_windows(4, {5}, 0.5).empty());
  EXPECT_THROW(generate_windows(10, {}, 0.5), std::invalid_argument);
  EXPECT_THROW(generate_windows(10, {5}, 0.0), std::invalid_argument);
  EXPECT_THROW(generate_windows(10, {5}, 1.5), std::invalid_argument);
}

TEST(Windows, MatchBruteForceEnumeration) {
  Rng rng = make_rng(1);
  for (int trial = 0; trial < 500; ++trial) {
    const int T = uniform_int(rng, 1, 80);
    std::vector<int> scales;
    const int n = uniform_int(rng, 1, 4);
    for (int i = 0; i < n; ++i) scales.push_back(uniform_int(rng, 1, 40));
    const double ratio = std::vector<double>{0.25, 0.5, 0.75, 1.0}[uniform_int(rng, 0, 3)];
    const auto got = generate_windows(T, scales, ratio);
    ASSERT_EQ(got, brute_windows(T, scales, ratio)) << "T=" << T;
    for (const auto& w : got) {
      ASSERT_GE(w.start, 1);
      ASSERT_LE(w.end, T);
      ASSERT_LE(w.start, w.end);
    }
  }
}

TEST(Sampling, Examples) {
  Rng rng = make_rng(2);
  auto s = sample_frames({1, 5}, 20, rng);
  EXPECT_EQ(s.frames, (std::vector<int>{1, 2, 3, 4, 5}));
  auto d = sample_frames({1, 1}, 20, rng);
  EXPECT_EQ(d.frames, (std::vector<int>(5, 1)));
  EXPECT_EQ(d.left_context, (std::vector<int>(2, 1)));
  EXPECT_EQ(d.right_context, (std::vector<int>(2, 1)));
}

TEST(Sampling, SegmentsStayInTheirFifth) {
  Rng rng = make_rng(3);
  std::vector<std::set<int>> seen(5);
  for (int i = 0; i < 10000; ++i) {
    auto s = sample_frames({1, 10}, 10, rng);
    ASSERT_EQ(s.frames.size(), 5u);
    for (int k = 0; k < 5; ++k) {
      ASSERT_GE(s.frames[k], 1 + 2 * k);
      ASSERT_LE(s.frames[k], 2 + 2 * k);
      seen[k].insert(s.frames[k]);
    }
    for (int f : s.left_context) ASSERT_EQ(f, 1);
    for (int f : s.right_context) ASSERT_EQ(f, 10);
  }
  for (const auto& s : seen) EXPECT_EQ(s.size(), 2u);
}

TEST(Sampling, ContextInHalfSpanExtensions) {
  Rng rng = make_rng(4);
  for (int i = 0; i < 2000; ++i) {
    auto s = sample_frames({21, 30}, 60, rng);
    for (int f : s.left_context) ASSERT_TRUE(f >= 17 && f <= 21) << f;
    for (int f : s.right_context) ASSERT_TRUE(f >= 30 && f <= 34) << f;
  }
  auto c = center_frames({21, 30}, 60);
  EXPECT_EQ(c.frames.size(), 5u);
  for (int f : c.left_context) EXPECT_TRUE(f >= 17 && f <= 21);
  for (int f : c.right_context) EXPECT_TRUE(f >= 30 && f <= 34);
}

TEST(Sampling, DeterministicUnderFixedRng) {
  Rng a = make_rng(5), b = make_rng(5);
  for (int i = 0; i < 20; ++i) {
    auto x = sample_frames({3, 27}, 40, a);
    auto y = sample_frames({3, 27}, 40, b);
    ASSERT_EQ(x.frames, y.frames);
    ASSERT_EQ(x.left_context, y.left_context);
  }
}

TEST(Assignment, Examples) {
  const std::vector<Segment> gt{{10, 20, 2}};
  auto inc = assign_targets({10, 12}, gt);
  EXPECT_EQ(inc.kind, ProposalKind::Incomplete);
  EXPECT_EQ(inc.label, 2);
  EXPECT_EQ(inc.completeness, 0);

  auto fg = assign_targets({10, 20}, gt);
  EXPECT_EQ(fg.kind, ProposalKind::Foreground);
  EXPECT_EQ(fg.label, 2);
  EXPECT_EQ(fg.completeness, 1);
  EXPECT_EQ(fg.reg[0], 0.0);
  EXPECT_EQ(fg.reg[1], 0.0);

  auto bg = assign_targets({40, 50}, gt);
  EXPECT_EQ(bg.kind, ProposalKind::Background);
  EXPECT_EQ(bg.label, 0);
  EXPECT_FALSE(bg.matched_gt.has_value());
}

TEST(Assignment, MatchesFrameSetReference) {
  Rng rng = make_rng(6);
  int counts[4] = {0, 0, 0, 0};
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<Segment> gt;
    int cursor = 1;
    const int n = uniform_int(rng, 1, 3);
    for (int i = 0; i < n; ++i) {
      const int s = cursor + uniform_int(rng, 0, 10);
      const int e = s + uniform_int(rng, 0, 15);
      gt.push_back({s, e, uniform_int(rng, 1, 4)});
      cursor = e + 1;
    }
    const int ps = uniform_int(rng, 1, cursor + 5);
    const Window w{ps, ps + uniform_int(rng, 0, 20)};
    const auto t = assign_targets(w, gt);
    ASSERT_EQ(t.kind, brute_kind(w, gt)) << w.start << "," << w.end;
    ASSERT_FALSE(t.kind == ProposalKind::Foreground && t.completeness != 1);
    ++counts[static_cast<int>(t.kind)];
  }
  for (int k = 0; k < 4; ++k) EXPECT_GT(counts[k], 0) << "kind " << k << " never exercised";
}

TEST(Regression, ExamplesAndRoundTrip) {
  auto r = regression_targets({10, 20}, {10, 20, 1});
  EXPECT_EQ(r[0], 0.0);
  EXPECT_EQ(r[1], 0.0);
  auto r2 = regression_targets({10, 20}, {12, 22, 1});
  EXPECT_NEAR(r2[0], 2.0 / 11.0, 1e-15);
  EXPECT_NEAR(r2[1], 0.0, 1e-15);
  auto back = apply_regression({10, 20}, r2);
  EXPECT_NEAR(back.start, 12.0, 1e-12);
  EXPECT_NEAR(back.end, 22.0, 1e-12);
  EXPECT_THROW(regression_targets({5, 4}, {1, 2, 1}), std::invalid_argument);
  EXPECT_THROW(apply_regression({5, 4}, {0.0, 0.0}), std::invalid_argument);

  Rng rng = make_rng(7);
  for (int i = 0; i < 5000; ++i) {
    const int ps = uniform_int(rng, 1, 100), gs = uniform_int(rng, 1, 100);
    const Window w{ps, ps + uniform_int(rng, 0, 50)};
    const Segment g{gs, gs + uniform_int(rng, 0, 50), 1};
    const auto seg = apply_regression(w, regression_targets(w, g));
    ASSERT_NEAR(seg.start, g.start, 1e-9);
    ASSERT_NEAR(seg.end, g.end, 1e-9);
  }
}

TEST(Pooling, MeanOfSampledRowsAndContext) {
  Rng rng = make_rng(8);
  auto z = ad::constant(oracle::random_tensor({12, 3}, rng, 1.0));
  FrameSample s{{2, 4, 4}, {1}, {7, 9}};
  auto f = pool_proposals(z, {s});
  ASSERT_EQ(f.p->value.shape, (Shape{1, 3}));
  ASSERT_EQ(f.context->value.shape, (Shape{1, 9}));
  for (std::size_t k = 0; k < 3; ++k) {
    const double p = (z->value.at(1, k) + 2 * z->value.at(3, k)) / 3.0;
    EXPECT_NEAR(f.p->value.at(0, k), p, 1e-14);
    EXPECT_NEAR(f.context->value.at(0, k), z->value.at(0, k), 1e-14);
    EXPECT_NEAR(f.context->value.at(0, 3 + k), p, 1e-14);
    EXPECT_NEAR(f.context->value.at(0, 6 + k), 0.5 * (z->value.at(6, k) + z->value.at(8, k)), 1e-14);
  }
  EXPECT_THROW(pool_proposals(z, {FrameSample{{13}, {1}, {1}}}), std::out_of_range);
}

TEST(Pooling, FullLengthSamplingIsExactMean) {
  Rng rng = make_rng(9);
  auto z = ad::constant(oracle::random_tensor({20, 4}, rng, 1.0));
  const Window w{6, 10};
  auto f = pool_proposals(z, {sample_frames(w, 20, rng, w.length())});
  for (std::size_t k = 0; k < 4; ++k) {
    double m = 0;
    for (int t = w.start; t <= w.end; ++t) m += z->value.at(t - 1, k);
    EXPECT_NEAR(f.p->value.at(0, k), m / w.length(), 1e-14);
  }
}

TEST(Pooling, ResamplingIsUnbiased) {
  Rng rng = make_rng(10);
  auto z = ad::constant(oracle::random_tensor({30, 1}, rng, 1.0));
  const Window w{3, 22};  // 20 frames, 4 per segment
  double exact = 0;
  for (int t = w.start; t <= w.end; ++t) exact += z->value.at(t - 1, 0);
  exact /= w.length();
  const int n = 1000;
  double sum = 0, sum2 = 0;
  for (int i = 0; i < n; ++i) {
    const double v = pool_proposals(z, {sample_frames(w, 30, rng)}).p->value[0];
    sum += v;
    sum2 += v * v;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sum2 / n - mean * mean) / n);
  EXPECT_LT(std::abs(mean - exact), 3 * se);
}

TEST(Balance, RespectsQuotas) {
  std::vector<ProposalTargets> t(40);
  for (std::size_t i = 0; i < t.size(); ++i) t[i].kind = static_cast<ProposalKind>(i % 4);
  Rng rng = make_rng(11);
  auto idx = balance_proposals(t, {4, 4, 8}, rng);
  int c[4] = {0, 0, 0, 0};
  for (auto i : idx) ++c[static_cast<int>(t[i].kind)];
  EXPECT_EQ(c[0], 4);
  EXPECT_EQ(c[1], 4);
  EXPECT_EQ(c[2], 8);
  EXPECT_EQ(c[3], 0);
  std::vector<ProposalTargets> few(3);
  few[0].kind = ProposalKind::Foreground;
  few[1].kind = ProposalKind::Background;
  few[2].kind = ProposalKind::Ignored;
  EXPECT_EQ(balance_proposals(few, {4, 4, 8}, rng).size(), 2u);
}
