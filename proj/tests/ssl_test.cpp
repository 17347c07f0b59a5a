#include "osad/ssl.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "osad/random.hpp"

using namespace osad;
namespace oracle = osad::testing;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.num_classes = 3;
  c.attention = AttentionMode::Ufa;
  c.conv_channels = {4, 6, 5};
  c.predictor_hidden = 8;
  c.seed = 5;
  return c;
}

Tensor random_frames(std::size_t T, const ModelConfig& c, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  return oracle::random_tensor({T, static_cast<std::size_t>(c.in_channels), static_cast<std::size_t>(c.height),
                                 static_cast<std::size_t>(c.width)},
                                rng, 1.0);
}

Tensor random_simplex_rows(std::size_t n, std::size_t k, Rng& rng) {
  Tensor t({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    double z = 0;
    for (std::size_t j = 0; j < k; ++j) z += t.at(i, j) = std::exp(2.0 * normal(rng));
    for (std::size_t j = 0; j < k; ++j) t.at(i, j) /= z;
  }
  return t;
}

Tensor random_probs(Shape s, Rng& rng) {
  Tensor t(std::move(s));
  for (auto& v : t.data) v = 0.02 + 0.96 * uniform01(rng);
  return t;
}

PseudoLabel random_label(std::size_t n, int C, Rng& rng) {
  const auto cc = static_cast<std::size_t>(C);
  return {random_simplex_rows(n, cc + 1, rng), random_probs({n, cc}, rng),
          oracle::random_tensor({n, 2 * cc}, rng, 1.0)};
}

// Head outputs on random proposal features.
struct HeadFixture {
  ModelConfig config = small_config();
  Model model{config};
  ad::Var p, ctx;
  explicit HeadFixture(std::size_t n, std::uint64_t seed = 3) {
    Rng rng = make_rng(seed);
    const auto c = static_cast<std::size_t>(config.feature_dim());
    p = ad::constant(oracle::random_tensor({n, c}, rng, 1.5));
    ctx = ad::constant(oracle::random_tensor({n, 3 * c}, rng, 1.5));
  }
  HeadOutputs heads() const { return apply_heads(model.live(), p, ctx); }
  std::vector<ad::Var> head_params() const {
    std::vector<ad::Var> out;
    for (const auto& np : model.parameters())
      if (np.group == ParamGroup::Head) out.push_back(np.var);
    return out;
  }
};

double bern_kl(double t, double q) {
  double s = 0;
  if (t > 0) s += t * std::log(t / q);
  if (t < 1) s += (1 - t) * std::log((1 - t) / (1 - q));
  return s;
}

struct Videos {
  ModelConfig config = small_config();
  std::vector<Tensor> frames;
  std::vector<UnlabeledInput> batch;
  Videos(std::size_t count, std::size_t T = 12) {
    for (std::size_t v = 0; v < count; ++v) frames.push_back(random_frames(T, config, 100 + v));
    for (std::size_t v = 0; v < count; ++v) {
      const int t = static_cast<int>(T);
      batch.push_back({&frames[v], {Window{1, 4}, Window{3, 9}, Window{6, t}}});
    }
  }
};

AdapterOutput run(const SslConfig& cfg, const Videos& vids, const Model& m, const Weights& teacher,
                  const Weights& frozen, std::uint64_t seed = 9, std::vector<UnlabeledInput> batch = {}) {
  Rng rng = make_rng(seed);
  return run_adapter(cfg, batch.empty() ? vids.batch : batch, vids.config, m.live(), teacher, frozen, LossWeights{},
                     rng);
}

std::vector<ad::Var> all_live(const Model& m) {
  std::vector<ad::Var> out;
  for (const auto& np : m.parameters())
    if (np.group != ParamGroup::PredictorPsi && np.group != ParamGroup::PredictorZeta) out.push_back(np.var);
  return out;
}

}  // namespace

TEST(Augment, HFlipTwiceIsIdentity) {
  const auto c = small_config();
  const Tensor f = random_frames(4, c, 1);
  AugmentationSpec spec{{AugKind::HFlip}, 0.0, 2.0, Strength::Weak};
  Rng rng = make_rng(1);
  const Tensor once = augment_frames(f, spec, rng);
  EXPECT_NE(once.data, f.data);
  EXPECT_EQ(once.at(0, 0), f[c.width - 1]);
  const Tensor twice = augment_frames(once, spec, rng);
  EXPECT_EQ(twice.data, f.data);
  Model m(c);
  auto a = extract_features(c, m.live(), ad::constant(f));
  auto b = extract_features(c, m.live(), ad::constant(twice));
  EXPECT_EQ(a.z->value.data, b.z->value.data);
}

TEST(Augment, NoiseWithZeroStdIsIdentity) {
  const auto c = small_config();
  const Tensor f = random_frames(3, c, 2);
  Rng rng = make_rng(2);
  EXPECT_EQ(augment_frames(f, {{AugKind::Noise}, 0.0, 2.0, Strength::Weak}, rng).data, f.data);
}

TEST(Augment, NoiseIsIidGaussianWithRequestedStd) {
  const Tensor f({40, 3, 16, 16});
  Rng rng = make_rng(3);
  const Tensor g = augment_frames(f, {{AugKind::Noise}, 0.3, 2.0, Strength::Weak}, rng);
  double s = 0, s2 = 0;
  for (double v : g.data) s += v, s2 += v * v;
  const double n = static_cast<double>(g.numel());
  EXPECT_NEAR(s / n, 0.0, 4 * 0.3 / std::sqrt(n));
  EXPECT_NEAR(std::sqrt(s2 / n), 0.3, 0.01);
}

TEST(Augment, TemporalFlipOnPalindromeKeepsPooledFeature) {
  const auto c = small_config();
  const int T = 9;
  Tensor f = random_frames(T, c, 4);
  const std::size_t per = f.numel() / T;
  for (int t = 0; t < T; ++t)
    for (std::size_t i = 0; i < per; ++i) f[t * per + i] = f[(T - 1 - t) * per + i];
  Model m(c);
  auto feats = extract_features(c, m.live(), ad::constant(f));
  const Window w{3, 7};
  const FrameSample base = center_frames(w, T, 5, 1);
  Rng rng = make_rng(4);
  const FrameSample flipped = augment_samples(base, w, T, {{AugKind::TFlip}, 0.0, 2.0, Strength::Strong}, rng, 5);
  EXPECT_EQ(flipped.frames, std::vector<int>(base.frames.rbegin(), base.frames.rend()));
  const auto a = pool_proposals(feats.z, {base});
  const auto b = pool_proposals(feats.z, {flipped});
  for (std::size_t i = 0; i < a.p->value.numel(); ++i) EXPECT_NEAR(a.p->value[i], b.p->value[i], 1e-12);
  for (std::size_t i = 0; i < a.context->value.numel(); ++i)
    EXPECT_NEAR(a.context->value[i], b.context->value[i], 1e-12);
}

TEST(Augment, TemporalFlipSwapsContexts) {
  const Window w{5, 14};
  Rng rng = make_rng(5);
  const FrameSample base = sample_frames(w, 30, rng, 5, 2);
  const FrameSample f = augment_samples(base, w, 30, {{AugKind::TFlip}, 0.0, 2.0, Strength::Strong}, rng, 5);
  EXPECT_EQ(f.left_context, std::vector<int>(base.right_context.rbegin(), base.right_context.rend()));
  EXPECT_EQ(f.right_context, std::vector<int>(base.left_context.rbegin(), base.left_context.rend()));
}

TEST(Augment, WeakIsSpatialOnlyAndStrongAddsOneTemporal) {
  Rng rng = make_rng(6);
  int hflips = 0;
  for (int i = 0; i < 500; ++i) {
    const auto weak = draw_augmentation(Strength::Weak, 0.05, rng);
    for (auto k : weak.kinds) EXPECT_TRUE(k == AugKind::Noise || k == AugKind::HFlip);
    hflips += weak.kinds.size() == 2;
    const auto strong = draw_augmentation(Strength::Strong, 0.05, rng);
    int temporal = 0;
    for (auto k : strong.kinds) temporal += k != AugKind::Noise && k != AugKind::HFlip;
    EXPECT_EQ(temporal, 1);
  }
  EXPECT_GT(hflips, 180);
  EXPECT_LT(hflips, 320);
}

TEST(Augment, ResolutionChangesOnlySampleCount) {
  const Window w{1, 20};
  Rng rng = make_rng(7);
  const FrameSample base = sample_frames(w, 40, rng, 5, 2);
  const FrameSample up = augment_samples(base, w, 40, {{AugKind::TResolution}, 0.0, 2.0, Strength::Strong}, rng, 5);
  const FrameSample down = augment_samples(base, w, 40, {{AugKind::TResolution}, 0.0, 0.5, Strength::Strong}, rng, 5);
  const FrameSample re = augment_samples(base, w, 40, {{AugKind::TResample}, 0.0, 2.0, Strength::Strong}, rng, 5);
  EXPECT_EQ(up.frames.size(), 10u);
  EXPECT_EQ(down.frames.size(), 2u);
  EXPECT_EQ(re.frames.size(), 5u);
  EXPECT_EQ(up.left_context.size(), 2u);
  for (const auto* s : {&up, &down, &re})
    for (int t : s->frames) EXPECT_TRUE(t >= w.start && t <= w.end);
}

TEST(Augment, HalvedResolutionOnSingleFrameFallsBack) {
  const Window w{4, 4};
  Rng rng = make_rng(8);
  const FrameSample base = sample_frames(w, 10, rng, 5, 2);
  bool fb = false;
  const auto s = augment_samples(base, w, 10, {{AugKind::TResolution}, 0.0, 0.5, Strength::Strong}, rng, 5, &fb);
  EXPECT_TRUE(fb);
  EXPECT_EQ(s.frames, std::vector<int>{4});
}

TEST(Sharpen, Examples) {
  const Tensor p({1, 2}, {0.6, 0.4});
  const Tensor id = sharpen(p, 1.0);
  EXPECT_NEAR(id[0], 0.6, 1e-15);
  EXPECT_NEAR(id[1], 0.4, 1e-15);
  const Tensor h = sharpen(p, 0.5);
  EXPECT_NEAR(h[0], 0.36 / 0.52, 1e-12);
  EXPECT_NEAR(h[1], 0.16 / 0.52, 1e-12);
  EXPECT_NEAR(h[0], 0.6923, 1e-4);
  const Tensor lim = sharpen(p, 1e-3);
  EXPECT_NEAR(lim[0], 1.0, 1e-12);
  EXPECT_NEAR(lim[1], 0.0, 1e-12);
  EXPECT_THROW(sharpen(p, 0.0), std::invalid_argument);
  const Tensor b = sharpen_binary(Tensor({1, 1}, {0.6}), 0.5);
  EXPECT_NEAR(b[0], 0.36 / 0.52, 1e-12);
}

TEST(Sharpen, KeepsSimplices) {
  Rng rng = make_rng(9);
  const Tensor p = random_simplex_rows(200, 5, rng);
  for (double T : {0.1, 0.5, 2.0}) {
    const Tensor s = sharpen(p, T);
    for (std::size_t i = 0; i < 200; ++i) {
      double z = 0;
      for (std::size_t j = 0; j < 5; ++j) z += s.at(i, j);
      EXPECT_NEAR(z, 1.0, 1e-12);
    }
  }
}

TEST(Mixup, Examples) {
  const Tensor a({2}, {1.0, 0.0}), b({2}, {0.0, 1.0});
  EXPECT_EQ(mixup(a, b, 1.0).data, a.data);
  const Tensor h = mixup(a, b, 0.5);
  EXPECT_EQ(h[0], 0.5);
  EXPECT_EQ(h[1], 0.5);
  auto va = ad::constant(a), vb = ad::constant(b);
  EXPECT_EQ(mixup(va, vb, 0.3)->value.data, mixup(a, b, 0.3).data);
}

TEST(Mixup, MixedSimplexSumsToOne) {
  Rng rng = make_rng(10);
  for (int i = 0; i < 1000; ++i) {
    const Tensor a = random_simplex_rows(1, 4, rng), b = random_simplex_rows(1, 4, rng);
    double lam = beta_sample(rng, 0.75, 0.75);
    lam = std::max(lam, 1 - lam);
    ASSERT_GE(lam, 0.5);
    ASSERT_LE(lam, 1.0);
    const Tensor m = mixup(a, b, lam);
    double z = 0;
    for (double v : m.data) {
      EXPECT_GE(v, 0.0);
      z += v;
    }
    EXPECT_NEAR(z, 1.0, 1e-12);
  }
}

TEST(MeanTeacherLoss, ZeroAgainstOwnOutputs) {
  HeadFixture fx(7);
  const auto h = fx.heads();
  const auto r = mean_teacher_loss(h, values_of(h), 0.1, 0.1);
  EXPECT_NEAR(r.value("cls"), 0.0, 1e-12);
  EXPECT_NEAR(r.value("comp"), 0.0, 1e-12);
  EXPECT_NEAR(r.value("reg"), 0.0, 1e-12);
}

TEST(MeanTeacherLoss, MatchesNaiveLoopAndIsNonNegative) {
  HeadFixture fx(9);
  const auto h = fx.heads();
  const auto& q = h.cls_prob->value;
  const auto& cq = h.comp_prob->value;
  const auto& rg = h.reg->value;
  const std::size_t n = 9, K = 4, C = 3;
  for (int trial = 0; trial < 50; ++trial) {
    Rng rng = make_rng(200 + trial);
    const auto t = random_label(n, 3, rng);
    const auto r = mean_teacher_loss(h, t, 0.1, 0.1);
    double cls = 0, comp = 0, reg = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < K; ++k) cls += t.cls.at(i, k) * std::log(t.cls.at(i, k) / q.at(i, k));
      for (std::size_t k = 0; k < C; ++k) comp += bern_kl(t.comp.at(i, k), cq.at(i, k));
      for (std::size_t k = 0; k < 2 * C; ++k) reg += std::abs(rg.at(i, k) - t.reg.at(i, k));
    }
    EXPECT_NEAR(r.value("cls"), cls / n, 1e-6);
    EXPECT_NEAR(r.value("comp"), comp / (n * C), 1e-6);
    EXPECT_NEAR(r.value("reg"), reg / (n * 2 * C), 1e-6);
    EXPECT_GE(r.value("cls"), -1e-12);
    EXPECT_GE(r.value("comp"), -1e-12);
  }
}

TEST(MeanTeacherLoss, GradientMatchesFiniteDifferences) {
  HeadFixture fx(6);
  Rng rng = make_rng(11);
  const auto t = random_label(6, 3, rng);
  auto res = oracle::gradcheck([&] { return mean_teacher_loss(fx.heads(), t, 0.3, 0.2).total(); }, fx.head_params(), 20, 1e-6);
  EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;
}

TEST(MixMatchLoss, ZeroAgainstOwnOutputs) {
  HeadFixture fx(5);
  const auto h = fx.heads();
  EXPECT_NEAR(mixmatch_loss(h, values_of(h), 0.1, 0.1).total()->value[0], 0.0, 1e-15);
}

TEST(MixMatchLoss, MatchesNaiveLoop) {
  HeadFixture fx(8);
  const auto h = fx.heads();
  Rng rng = make_rng(12);
  const auto t = random_label(8, 3, rng);
  const auto r = mixmatch_loss(h, t, 0.1, 0.1);
  double cls = 0, comp = 0, reg = 0;
  for (std::size_t i = 0; i < 8; ++i) {
    for (std::size_t k = 0; k < 4; ++k) cls += std::pow(h.cls_prob->value.at(i, k) - t.cls.at(i, k), 2);
    for (std::size_t k = 0; k < 3; ++k) comp += std::pow(h.comp_prob->value.at(i, k) - t.comp.at(i, k), 2);
    for (std::size_t k = 0; k < 6; ++k) reg += std::abs(h.reg->value.at(i, k) - t.reg.at(i, k));
  }
  EXPECT_NEAR(r.value("cls"), cls / 8, 1e-6);
  EXPECT_NEAR(r.value("comp"), comp / 24, 1e-6);
  EXPECT_NEAR(r.value("reg"), reg / 48, 1e-6);
}

TEST(MixMatchLoss, GradientMatchesFiniteDifferences) {
  HeadFixture fx(6);
  Rng rng = make_rng(13);
  const auto t = random_label(6, 3, rng);
  auto res = oracle::gradcheck([&] { return mixmatch_loss(fx.heads(), t, 0.3, 0.2).total(); }, fx.head_params(), 20, 1e-6);
  EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;
}

TEST(FixMatchLoss, MaskFractionMatchesCount) {
  HeadFixture fx(40);
  const auto h = fx.heads();
  Rng rng = make_rng(14);
  PseudoLabel weak{random_simplex_rows(40, 4, rng), random_probs({40, 3}, rng), Tensor({40, 6})};
  for (double tau : {0.0, 0.3, 0.6, 0.9, 1.0}) {
    FixMatchStats st;
    const auto r = fixmatch_loss(h, weak, tau, 0.1, &st);
    std::size_t cls = 0, comp = 0;
    double ce = 0, bce = 0;
    for (std::size_t i = 0; i < 40; ++i) {
      std::size_t arg = 0;
      for (std::size_t k = 1; k < 4; ++k)
        if (weak.cls.at(i, k) > weak.cls.at(i, arg)) arg = k;
      if (weak.cls.at(i, arg) > tau) {
        ++cls;
        ce -= std::log(h.cls_prob->value.at(i, arg));
      }
      for (std::size_t k = 0; k < 3; ++k) {
        const double q = weak.comp.at(i, k);
        if (std::max(q, 1 - q) > tau) {
          ++comp;
          const double s = h.comp_prob->value.at(i, k);
          bce -= q > 0.5 ? std::log(s) : std::log(1 - s);
        }
      }
    }
    EXPECT_DOUBLE_EQ(st.cls_mask_fraction, cls / 40.0);
    EXPECT_DOUBLE_EQ(st.comp_mask_fraction, comp / 120.0);
    EXPECT_NEAR(r.value("cls"), ce / 40, 1e-6);
    EXPECT_NEAR(r.value("comp"), bce / 120, 1e-6);
    EXPECT_FALSE(r.has("reg"));
    if (tau == 0.0) EXPECT_EQ(st.cls_mask_fraction, 1.0);
    if (tau == 1.0) EXPECT_EQ(r.total()->value[0], 0.0);
  }
}

TEST(FixMatchLoss, GradientMatchesFiniteDifferences) {
  HeadFixture fx(10);
  Rng rng = make_rng(15);
  PseudoLabel weak{random_simplex_rows(10, 4, rng), random_probs({10, 3}, rng), Tensor({10, 6})};
  auto res = oracle::gradcheck([&] { return fixmatch_loss(fx.heads(), weak, 0.4, 0.3).total(); }, fx.head_params());
  EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;
}

TEST(Adapter, EmptyBatchGivesZero) {
  Videos vids(1);
  Model m(vids.config);
  std::vector<UnlabeledInput> no_windows{{&vids.frames[0], {}}};
  for (auto method : {SslMethod::MeanTeacher, SslMethod::MixMatch, SslMethod::FixMatch}) {
    SslConfig cfg;
    cfg.method = method;
    for (const auto& batch : {std::vector<UnlabeledInput>{}, no_windows}) {
      Rng rng = make_rng(1);
      auto out = run_adapter(cfg, batch, vids.config, m.live(), m.teacher(), m.frozen(), LossWeights{}, rng);
      EXPECT_FALSE(out.report.empty());
      EXPECT_EQ(out.report.total()->value[0], 0.0) << to_string(method);
    }
  }
  SslConfig none;
  EXPECT_TRUE(run(none, vids, m, m.teacher(), m.frozen()).report.empty());
}

TEST(Adapter, MeanTeacherZeroWithShadowEqualLiveAndNoAugmentation) {
  Videos vids(2);
  Model m(vids.config);
  m.ema_update(0.0);
  SslConfig cfg;
  cfg.method = SslMethod::MeanTeacher;
  cfg.augment = false;
  auto out = run(cfg, vids, m, m.teacher(), m.frozen());
  EXPECT_NEAR(out.report.total()->value[0], 0.0, 1e-12);
  cfg.augment = true;
  EXPECT_GT(run(cfg, vids, m, m.teacher(), m.frozen()).report.value("cls"), 0.0);
}

TEST(Adapter, MixMatchSingleProposalDegeneratesToConsistency) {
  Videos vids(1);
  Model m(vids.config);
  SslConfig cfg;
  cfg.method = SslMethod::MixMatch;
  cfg.mixmatch_k = 1;
  cfg.augment = false;
  cfg.sharpen_temperature = 1.0;
  std::vector<UnlabeledInput> single{{&vids.frames[0], {Window{2, 8}}}};
  auto out = run(cfg, vids, m, m.teacher(), m.frozen(), 9, single);
  EXPECT_NEAR(out.report.total()->value[0], 0.0, 1e-12);
  const auto& flags = out.report.flags();
  EXPECT_NE(std::find(flags.begin(), flags.end(), "mixmatch_self_partner"), flags.end());
}

TEST(Adapter, FixMatchThresholdExtremes) {
  Videos vids(2);
  Model m(vids.config);
  SslConfig cfg;
  cfg.method = SslMethod::FixMatch;
  cfg.tau = 1.0;
  auto all_masked = run(cfg, vids, m, m.teacher(), m.frozen());
  EXPECT_EQ(all_masked.report.total()->value[0], 0.0);
  EXPECT_EQ(all_masked.fixmatch.cls_mask_fraction, 0.0);
  cfg.tau = 0.0;
  auto none_masked = run(cfg, vids, m, m.teacher(), m.frozen());
  EXPECT_EQ(none_masked.fixmatch.cls_mask_fraction, 1.0);
  EXPECT_GT(none_masked.report.value("cls"), 0.0);
  EXPECT_FALSE(none_masked.report.has("reg"));
}

TEST(Adapter, TeacherPathCarriesNoGradient) {
  Videos vids(2);
  Model m(vids.config);
  SslConfig cfg;
  cfg.method = SslMethod::MeanTeacher;
  const Weights teacher = m.teacher();
  auto out = run(cfg, vids, m, teacher, m.frozen());
  ad::backward(out.report.total());
  for (const auto& v : {teacher.cls_w, teacher.comp_w, teacher.reg_w, teacher.att_w, teacher.conv_w[0]}) {
    EXPECT_FALSE(v->requires_grad);
    EXPECT_EQ(v->grad.numel(), 0u);
  }
  double live_mass = 0;
  for (const auto& p : all_live(m))
    for (double g : p->grad.data) live_mass += std::abs(g);
  EXPECT_GT(live_mass, 0.0);

  // Perturbing the shadow still moves the loss value.
  const double before = out.report.total()->value[0];
  for (auto& t : m.ema_shadow())
    for (auto& v : t.data) v += 0.05;
  const double after = run(cfg, vids, m, m.teacher(), m.frozen()).report.total()->value[0];
  EXPECT_NE(before, after);
}

TEST(Adapter, DeterministicForFixedSeed) {
  Videos vids(2);
  Model m(vids.config);
  for (auto method : {SslMethod::MeanTeacher, SslMethod::MixMatch, SslMethod::FixMatch}) {
    SslConfig cfg;
    cfg.method = method;
    cfg.tau = 0.3;
    auto a = run(cfg, vids, m, m.teacher(), m.frozen(), 21);
    auto b = run(cfg, vids, m, m.teacher(), m.frozen(), 21);
    auto c = run(cfg, vids, m, m.teacher(), m.frozen(), 22);
    EXPECT_EQ(a.report.total()->value[0], b.report.total()->value[0]);
    EXPECT_NE(a.report.total()->value[0], c.report.total()->value[0]);
    ASSERT_EQ(a.student_features.size(), 2u);
    EXPECT_EQ(a.student_features[0].z->value.shape, (Shape{12, 5}));
  }
}

TEST(Adapter, GradientsMatchFiniteDifferences) {
  Videos vids(2, 10);
  Model m(vids.config);
  m.ema_update(0.0);
  for (auto& t : m.ema_shadow())
    for (auto& v : t.data) v *= 0.9;
  const Weights teacher = m.teacher();
  const Weights frozen = m.frozen();
  for (auto method : {SslMethod::MeanTeacher, SslMethod::MixMatch, SslMethod::FixMatch}) {
    SslConfig cfg;
    cfg.method = method;
    cfg.tau = 0.3;
    auto res = oracle::gradcheck([&] { return run(cfg, vids, m, teacher, frozen, 31).report.total(); }, all_live(m), 6, 1e-6);
    EXPECT_LT(res.max_rel_error, 1e-3) << to_string(method) << " " << res.worst;
  }
}
