#include "osad/ssl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace osad {

std::string to_string(SslMethod m) {
  switch (m) {
    case SslMethod::None: return "none";
    case SslMethod::MeanTeacher: return "mean_teacher";
    case SslMethod::MixMatch: return "mixmatch";
    case SslMethod::FixMatch: return "fixmatch";
  }
  return "?";
}

SslMethod ssl_method_from_string(const std::string& s) {
  if (s == "none") return SslMethod::None;
  if (s == "mean_teacher") return SslMethod::MeanTeacher;
  if (s == "mixmatch") return SslMethod::MixMatch;
  if (s == "fixmatch") return SslMethod::FixMatch;
  throw std::invalid_argument("unknown ssl method: " + s);
}

AugmentationSpec draw_augmentation(Strength strength, double noise_std, Rng& rng) {
  AugmentationSpec spec;
  spec.strength = strength;
  spec.noise_std = noise_std;
  spec.kinds.push_back(AugKind::Noise);
  if (uniform01(rng) < 0.5) spec.kinds.push_back(AugKind::HFlip);
  if (strength == Strength::Strong) {
    const int pick = uniform_int(rng, 0, 2);
    if (pick == 0) {
      spec.kinds.push_back(AugKind::TResample);
    } else if (pick == 1) {
      spec.kinds.push_back(AugKind::TResolution);
      spec.resolution_factor = uniform01(rng) < 0.5 ? 2.0 : 0.5;
    } else {
      spec.kinds.push_back(AugKind::TFlip);
    }
  }
  return spec;
}

namespace {

bool has(const AugmentationSpec& spec, AugKind k) {
  return std::find(spec.kinds.begin(), spec.kinds.end(), k) != spec.kinds.end();
}

}  // namespace

Tensor augment_frames(const Tensor& frames, const AugmentationSpec& spec, Rng& rng) {
  if (frames.rank() != 4) throw std::invalid_argument("augment_frames expects [T, C, H, W]");
  Tensor out = frames;
  if (has(spec, AugKind::HFlip)) {
    const std::size_t rows = frames.numel() / frames.dim(3), w = frames.dim(3);
    for (std::size_t r = 0; r < rows; ++r) std::reverse(out.data.begin() + r * w, out.data.begin() + (r + 1) * w);
  }
  if (has(spec, AugKind::Noise) && spec.noise_std > 0.0)
    for (auto& v : out.data) v += normal(rng, 0.0, spec.noise_std);
  return out;
}

FrameSample augment_samples(const FrameSample& base, const Window& w, int T, const AugmentationSpec& spec, Rng& rng,
                            int L, bool* fallback) {
  FrameSample out = base;
  const int ctx = static_cast<int>(base.left_context.size());
  if (fallback) *fallback = false;
  if (has(spec, AugKind::TResample)) out = sample_frames(w, T, rng, L, ctx);
  if (has(spec, AugKind::TResolution)) {
    int l2 = spec.resolution_factor > 1.0 ? 2 * L : std::max(1, L / 2);
    if (spec.resolution_factor < 1.0 && w.length() == 1) {
      l2 = 1;
      if (fallback) *fallback = true;
    }
    out = sample_frames(w, T, rng, l2, ctx);
  }
  if (has(spec, AugKind::TFlip)) {
    std::reverse(out.frames.begin(), out.frames.end());
    std::swap(out.left_context, out.right_context);
    std::reverse(out.left_context.begin(), out.left_context.end());
    std::reverse(out.right_context.begin(), out.right_context.end());
  }
  return out;
}

Tensor sharpen(const Tensor& p, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("sharpen temperature must be > 0");
  if (p.rank() != 2) throw std::invalid_argument("sharpen expects rows of simplices");
  Tensor out = p;
  const std::size_t n = p.dim(0), k = p.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    // Work in log space so small temperatures do not underflow.
    double mx = -INFINITY;
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, std::log(p.at(i, j)) / temperature);
    double z = 0;
    for (std::size_t j = 0; j < k; ++j) z += out.at(i, j) = std::exp(std::log(p.at(i, j)) / temperature - mx);
    for (std::size_t j = 0; j < k; ++j) out.at(i, j) /= z;
  }
  return out;
}

Tensor sharpen_binary(const Tensor& probs, double temperature) {
  Tensor two({probs.numel(), 2});
  for (std::size_t i = 0; i < probs.numel(); ++i) two.at(i, 0) = probs[i], two.at(i, 1) = 1.0 - probs[i];
  const Tensor s = sharpen(two, temperature);
  Tensor out(probs.shape);
  for (std::size_t i = 0; i < probs.numel(); ++i) out[i] = s.at(i, 0);
  return out;
}

Tensor mixup(const Tensor& a, const Tensor& b, double lambda) {
  if (a.shape != b.shape) throw std::invalid_argument("mixup: shape mismatch");
  Tensor out(a.shape);
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = lambda * a[i] + (1.0 - lambda) * b[i];
  return out;
}

ad::Var mixup(const ad::Var& a, const ad::Var& b, double lambda) {
  if (lambda == 1.0) return a;
  return ad::add(ad::scale(a, lambda), ad::scale(b, 1.0 - lambda));
}

std::vector<double> PseudoLabel::confidence() const {
  std::vector<double> c;
  for (std::size_t i = 0; i < cls.dim(0); ++i) {
    double m = 0;
    for (std::size_t k = 0; k < cls.dim(1); ++k) m = std::max(m, cls.at(i, k));
    c.push_back(m);
  }
  return c;
}

PseudoLabel values_of(const HeadOutputs& h) {
  return {h.cls_prob->value, h.comp_prob->value, h.reg->value};
}

namespace {

ad::Var zero() { return ad::constant(Tensor::scalar(0.0)); }

double xlogx(double x) { return x > 0.0 ? x * std::log(x) : 0.0; }

ad::Var mean_abs_diff(const ad::Var& x, const Tensor& target) {
  return ad::mean(ad::abs(ad::sub(x, ad::constant(target))));
}

}  // namespace

LossReport mean_teacher_loss(const HeadOutputs& s, const PseudoLabel& t, double comp_w, double reg_w) {
  LossReport r;
  const std::size_t n = s.size();
  if (n == 0) {
    r.add("cls", zero());
    r.add("comp", zero(), comp_w);
    r.add("reg", zero(), reg_w);
    return r;
  }
  // KL(t || q) = sum t log t - sum t log q
  double ent = 0;
  for (double v : t.cls.data) ent += xlogx(v);
  Tensor neg_t = t.cls;
  for (auto& v : neg_t.data) v = -v;
  r.add("cls", ad::scale(ad::add_scalar(ad::sum(ad::mul_const(s.cls_logprob, neg_t)), ent), 1.0 / n));

  // Bernoulli KL with log q = -softplus(-x), log(1-q) = -softplus(x).
  double bent = 0;
  for (double v : t.comp.data) bent += xlogx(v) + xlogx(1.0 - v);
  Tensor one_minus = t.comp;
  for (auto& v : one_minus.data) v = 1.0 - v;
  auto cross = ad::add(ad::mul_const(ad::softplus(ad::scale(s.comp_logits, -1.0)), t.comp),
                       ad::mul_const(ad::softplus(s.comp_logits), one_minus));
  r.add("comp", ad::scale(ad::add_scalar(ad::sum(cross), bent), 1.0 / static_cast<double>(t.comp.numel())), comp_w);
  r.add("reg", mean_abs_diff(s.reg, t.reg), reg_w);
  return r;
}

LossReport mixmatch_loss(const HeadOutputs& s, const PseudoLabel& t, double comp_w, double reg_w) {
  LossReport r;
  const std::size_t n = s.size();
  if (n == 0) {
    r.add("cls", zero());
    r.add("comp", zero(), comp_w);
    r.add("reg", zero(), reg_w);
    return r;
  }
  r.add("cls", ad::scale(ad::sum(ad::square(ad::sub(s.cls_prob, ad::constant(t.cls)))), 1.0 / n));
  r.add("comp", ad::mean(ad::square(ad::sub(s.comp_prob, ad::constant(t.comp)))), comp_w);
  r.add("reg", mean_abs_diff(s.reg, t.reg), reg_w);
  return r;
}

LossReport fixmatch_loss(const HeadOutputs& s, const PseudoLabel& weak, double tau, double comp_w,
                         FixMatchStats* stats) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("fixmatch tau must be in [0, 1]");
  LossReport r;
  const std::size_t n = s.size();
  if (n == 0) {
    r.add("cls", zero());
    r.add("comp", zero(), comp_w);
    if (stats) *stats = {};
    return r;
  }
  const std::size_t k = weak.cls.dim(1), c = weak.comp.dim(1);
  Tensor cls_coef({n, k});
  std::size_t kept = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t arg = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (weak.cls.at(i, j) > weak.cls.at(i, arg)) arg = j;
    if (weak.cls.at(i, arg) > tau) {
      cls_coef.at(i, arg) = -1.0 / static_cast<double>(n);
      ++kept;
    }
  }
  r.add("cls", ad::sum(ad::mul_const(s.cls_logprob, cls_coef)));

  Tensor pos({n, c}), neg({n, c});
  std::size_t comp_kept = 0;
  const double scale = 1.0 / static_cast<double>(n * c);
  for (std::size_t i = 0; i < n * c; ++i) {
    const double q = weak.comp[i];
    if (std::max(q, 1.0 - q) > tau) {
      (q > 0.5 ? pos : neg)[i] = scale;
      ++comp_kept;
    }
  }
  auto comp = ad::add(ad::sum(ad::mul_const(ad::softplus(ad::scale(s.comp_logits, -1.0)), pos)),
                      ad::sum(ad::mul_const(ad::softplus(s.comp_logits), neg)));
  r.add("comp", comp, comp_w);
  if (stats) {
    stats->cls_mask_fraction = static_cast<double>(kept) / n;
    stats->comp_mask_fraction = static_cast<double>(comp_kept) / static_cast<double>(n * c);
  }
  return r;
}

namespace {

struct View {
  FrameFeatures features;
  ProposalFeatures pooled;
};

struct AugmentedVideo {
  Tensor frames;
  std::vector<FrameSample> samples;
};

AugmentedVideo augment_video(const UnlabeledInput& in, const std::vector<FrameSample>& base,
                             const AugmentationSpec& spec, const SslConfig& cfg, Rng& rng, LossReport& report) {
  const int T = static_cast<int>(in.frames->dim(0));
  AugmentedVideo a{augment_frames(*in.frames, spec, rng), {}};
  for (std::size_t i = 0; i < in.windows.size(); ++i) {
    bool fb = false;
    a.samples.push_back(augment_samples(base[i], in.windows[i], T, spec, rng, cfg.samples_per_proposal, &fb));
    if (fb) report.flag("resolution_fallback");
  }
  return a;
}

View encode(const ModelConfig& mc, const Weights& weights, const AugmentedVideo& a) {
  View v;
  v.features = extract_features(mc, weights, ad::constant(a.frames));
  v.pooled = pool_proposals(v.features.z, a.samples);
  return v;
}

View run_view(const ModelConfig& mc, const Weights& weights, const UnlabeledInput& in,
              const std::vector<FrameSample>& base, const AugmentationSpec& spec, const SslConfig& cfg, Rng& rng,
              LossReport& report) {
  return encode(mc, weights, augment_video(in, base, spec, cfg, rng, report));
}

ProposalFeatures stack(const std::vector<ProposalFeatures>& parts) {
  std::vector<ad::Var> ps, cs;
  for (const auto& p : parts) {
    ps.push_back(p.p);
    cs.push_back(p.context);
  }
  return {ad::concat_rows(ps), ad::concat_rows(cs)};
}

}  // namespace

AdapterOutput run_adapter(const SslConfig& cfg, const std::vector<UnlabeledInput>& batch, const ModelConfig& mc,
                          const Weights& live, const Weights& teacher, const Weights& frozen,
                          const LossWeights& weights, Rng& rng) {
  AdapterOutput out;
  std::vector<const UnlabeledInput*> inputs;
  for (const auto& in : batch)
    if (!in.windows.empty()) inputs.push_back(&in);
  if (cfg.method == SslMethod::None) return out;
  if (inputs.empty()) {
    out.report.add("cls", zero());
    out.report.add("comp", zero(), weights.comp_u);
    if (cfg.method != SslMethod::FixMatch) out.report.add("reg", zero(), weights.reg_u);
    return out;
  }

  auto draw = [&](Strength st) {
    if (!cfg.augment) return AugmentationSpec{{}, 0.0, 2.0, st};
    return draw_augmentation(st, cfg.noise_std, rng);
  };
  auto base_samples = [&](const UnlabeledInput& in) {
    std::vector<FrameSample> base;
    const int T = static_cast<int>(in.frames->dim(0));
    for (const auto& w : in.windows) base.push_back(sample_frames(w, T, rng, cfg.samples_per_proposal, cfg.context_frames));
    return base;
  };

  switch (cfg.method) {
    case SslMethod::MeanTeacher: {
      std::vector<ProposalFeatures> student, target;
      for (const auto* in : inputs) {
        const auto base = base_samples(*in);
        const auto s_spec = draw(Strength::Strong);
        const auto t_spec = draw(Strength::Weak);
        auto s = run_view(mc, live, *in, base, s_spec, cfg, rng, out.report);
        auto t = run_view(mc, teacher, *in, base, t_spec, cfg, rng, out.report);
        out.student_features.push_back(s.features);
        student.push_back(s.pooled);
        target.push_back(t.pooled);
      }
      const auto sp = stack(student), tp = stack(target);
      const auto pseudo = values_of(apply_heads(teacher, tp.p, tp.context));
      out.report.merge(mean_teacher_loss(apply_heads(live, sp.p, sp.context), pseudo, weights.comp_u, weights.reg_u),
                       "", 1.0);
      break;
    }
    case SslMethod::MixMatch: {
      if (cfg.mixmatch_k < 1) throw std::invalid_argument("mixmatch K must be >= 1");
      std::vector<ProposalFeatures> student;
      std::vector<PseudoLabel> per_video;
      for (const auto* in : inputs) {
        const auto base = base_samples(*in);
        PseudoLabel acc;
        for (int k = 0; k < cfg.mixmatch_k; ++k) {
          const auto spec = draw(Strength::Weak);
          const auto aug = augment_video(*in, base, spec, cfg, rng, out.report);
          const auto target = encode(mc, frozen, aug).pooled;
          const auto pl = values_of(apply_heads(frozen, target.p, target.context));
          if (k == 0) {
            auto v = encode(mc, live, aug);
            out.student_features.push_back(v.features);
            student.push_back(v.pooled);
            acc = pl;
          } else {
            for (std::size_t i = 0; i < acc.cls.numel(); ++i) acc.cls[i] += pl.cls[i];
            for (std::size_t i = 0; i < acc.comp.numel(); ++i) acc.comp[i] += pl.comp[i];
            for (std::size_t i = 0; i < acc.reg.numel(); ++i) acc.reg[i] += pl.reg[i];
          }
        }
        const double inv = 1.0 / cfg.mixmatch_k;
        for (auto& v : acc.cls.data) v *= inv;
        for (auto& v : acc.comp.data) v *= inv;
        for (auto& v : acc.reg.data) v *= inv;
        acc.cls = sharpen(acc.cls, cfg.sharpen_temperature);
        acc.comp = sharpen_binary(acc.comp, cfg.sharpen_temperature);
        per_video.push_back(std::move(acc));
      }
      const auto sp = stack(student);
      const std::size_t n = sp.p->value.dim(0);
      auto cat = [&](auto member) {
        std::vector<ad::Var> parts;
        for (const auto& pl : per_video) parts.push_back(ad::constant(pl.*member));
        return ad::concat_rows(parts)->value;
      };
      PseudoLabel target{cat(&PseudoLabel::cls), cat(&PseudoLabel::comp), cat(&PseudoLabel::reg)};

      std::vector<std::size_t> perm(n);
      std::iota(perm.begin(), perm.end(), 0);
      if (n == 1) {
        out.report.flag("mixmatch_self_partner");
      } else {
        std::shuffle(perm.begin(), perm.end(), rng);
      }
      double lambda = beta_sample(rng, cfg.beta_alpha, cfg.beta_alpha);
      lambda = std::max(lambda, 1.0 - lambda);
      const auto p2 = select_rows(sp.p, perm), c2 = select_rows(sp.context, perm);
      auto mix_t = [&](const Tensor& t) { return mixup(t, select_rows(ad::constant(t), perm)->value, lambda); };
      PseudoLabel mixed{mix_t(target.cls), mix_t(target.comp), mix_t(target.reg)};
      const auto heads = apply_heads(live, mixup(sp.p, p2, lambda), mixup(sp.context, c2, lambda));
      out.report.merge(mixmatch_loss(heads, mixed, weights.comp_u, weights.reg_u), "", 1.0);
      break;
    }
    case SslMethod::FixMatch: {
      std::vector<ProposalFeatures> strong, weak;
      for (const auto* in : inputs) {
        const auto base = base_samples(*in);
        const auto w_spec = draw(Strength::Weak);
        const auto s_spec = draw(Strength::Strong);
        auto w = run_view(mc, frozen, *in, base, w_spec, cfg, rng, out.report);
        auto s = run_view(mc, live, *in, base, s_spec, cfg, rng, out.report);
        out.student_features.push_back(s.features);
        weak.push_back(w.pooled);
        strong.push_back(s.pooled);
      }
      const auto wp = stack(weak), sp = stack(strong);
      const auto pseudo = values_of(apply_heads(frozen, wp.p, wp.context));
      out.report.merge(fixmatch_loss(apply_heads(live, sp.p, sp.context), pseudo, cfg.tau, weights.comp_u, &out.fixmatch),
                       "", 1.0);
      break;
    }
    case SslMethod::None: break;
  }
  return out;
}

}  // namespace osad
