#include "osad/losses.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

#include "json.hpp"

namespace osad {

void LossWeights::validate() const {
  for (double w : {comp_s, reg_s, comp_u, reg_u, unlabeled, weak, ib, ufa})
    if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("loss weights must be finite and >= 0");
}

void LossReport::add(std::string name, ad::Var value, double weight) {
  if (!value || value->value.numel() != 1) throw std::invalid_argument("loss term " + name + " must be a scalar");
  terms_.push_back({std::move(name), std::move(value), weight});
}

void LossReport::merge(const LossReport& other, const std::string& prefix, double scale) {
  for (const auto& t : other.terms_) terms_.push_back({prefix + t.name, t.value, t.weight * scale});
  for (const auto& f : other.flags_) flags_.push_back(prefix + f);
}

ad::Var LossReport::total() const {
  if (terms_.empty()) return ad::constant(Tensor::scalar(0.0));
  std::vector<ad::Var> vars;
  std::vector<double> weights;
  for (const auto& t : terms_) {
    vars.push_back(t.value);
    weights.push_back(t.weight);
  }
  return ad::weighted_sum(vars, weights);
}

double LossReport::value(const std::string& name) const {
  for (const auto& t : terms_)
    if (t.name == name) return t.value->value[0];
  throw std::out_of_range("no loss term " + name);
}

bool LossReport::has(const std::string& name) const {
  for (const auto& t : terms_)
    if (t.name == name) return true;
  return false;
}

std::string LossReport::to_json_line(long step, double lr) const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["lr"] = lr;
  j["total"] = total()->value[0];
  nlohmann::ordered_json terms = nlohmann::ordered_json::object();
  for (const auto& t : terms_) terms[t.name] = {{"value", t.value->value[0]}, {"weight", t.weight}};
  j["terms"] = terms;
  if (!flags_.empty()) j["flags"] = flags_;
  return j.dump();
}

ad::Var select_rows(const ad::Var& x, const std::vector<std::size_t>& rows) {
  const std::size_t n = x->value.dim(0);
  Tensor m({rows.size(), n});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw std::out_of_range("select_rows: row out of range");
    m.data[i * n + rows[i]] = 1.0;
  }
  return ad::combine_rows(m, x);
}

namespace {

ad::Var zero() { return ad::constant(Tensor::scalar(0.0)); }

// sum_i mask_i * v_i for a [N] vector and constant coefficients.
ad::Var masked_sum(const ad::Var& v, const Tensor& coef) { return ad::sum(ad::mul_const(v, coef)); }

}  // namespace

LossReport supervised_loss(const HeadOutputs& heads, const std::vector<ProposalTargets>& targets,
                           double comp_weight, double reg_weight) {
  const std::size_t n = targets.size();
  if (heads.size() != n) throw std::invalid_argument("supervised_loss: heads and targets differ in length");
  const std::size_t n_cls = heads.comp_logits->value.dim(1);

  std::vector<std::size_t> cls_idx(n, 0), comp_idx(n, 0), reg_c(n, 0), reg_l(n, 0);
  Tensor cls_mask({n}), comp_pos({n}), comp_neg({n}), reg_mask({n});
  Tensor reg_target_c({n}), reg_target_l({n});
  std::size_t n_cls_terms = 0, n_comp = 0, n_reg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& t = targets[i];
    if (t.label < 0 || static_cast<std::size_t>(t.label) > n_cls) throw std::invalid_argument("label out of range");
    if (t.kind == ProposalKind::Foreground || t.kind == ProposalKind::Background) {
      cls_idx[i] = static_cast<std::size_t>(t.label);
      cls_mask[i] = 1.0;
      ++n_cls_terms;
    }
    if (t.kind == ProposalKind::Foreground || t.kind == ProposalKind::Incomplete) {
      comp_idx[i] = static_cast<std::size_t>(t.label - 1);
      (t.completeness ? comp_pos : comp_neg)[i] = 1.0;
      ++n_comp;
    }
    if (t.kind == ProposalKind::Foreground) {
      reg_c[i] = 2 * static_cast<std::size_t>(t.label - 1);
      reg_l[i] = reg_c[i] + 1;
      reg_mask[i] = 1.0;
      reg_target_c[i] = t.reg[0];
      reg_target_l[i] = t.reg[1];
      ++n_reg;
    }
  }

  LossReport r;
  if (n_cls_terms) {
    auto lp = ad::gather_cols(heads.cls_logprob, cls_idx);
    r.add("cls", ad::scale(masked_sum(lp, cls_mask), -1.0 / static_cast<double>(n_cls_terms)));
  } else {
    r.add("cls", zero());
    r.flag("cls_empty");
  }
  if (n_comp) {
    // -log sigmoid(x) = softplus(-x); -log(1 - sigmoid(x)) = softplus(x)
    auto logits = ad::gather_cols(heads.comp_logits, comp_idx);
    auto pos = masked_sum(ad::softplus(ad::scale(logits, -1.0)), comp_pos);
    auto neg = masked_sum(ad::softplus(logits), comp_neg);
    r.add("comp", ad::scale(ad::add(pos, neg), 1.0 / static_cast<double>(n_comp)), comp_weight);
  } else {
    r.add("comp", zero(), comp_weight);
    r.flag("comp_empty");
  }
  if (n_reg) {
    auto dc = ad::abs(ad::sub(ad::gather_cols(heads.reg, reg_c), ad::constant(reg_target_c)));
    auto dl = ad::abs(ad::sub(ad::gather_cols(heads.reg, reg_l), ad::constant(reg_target_l)));
    r.add("reg", ad::scale(masked_sum(ad::add(dc, dl), reg_mask), 1.0 / static_cast<double>(n_reg)), reg_weight);
  } else {
    r.add("reg", zero(), reg_weight);
    r.flag("reg_empty");
  }
  return r;
}

namespace {

ad::Var mean_sq_norm(const ad::Var& pred, const ad::Var& target) {
  return ad::mean(ad::row_sum(ad::square(ad::sub(pred, target))));
}

}  // namespace

UfaResult ufa_loss(const MotionSequence& seq, const PredictorWeights& trainable, const PredictorWeights& frozen,
                   double eps) {
  if (seq.pairs() == 0) throw std::invalid_argument("ufa_loss: needs at least one (t, t+1) pair");
  UfaResult out;
  const auto f = ad::detach(seq.f), b = ad::detach(seq.b), f_next = ad::detach(seq.f_next);
  const auto fit = predict_next(trainable, f, b);
  out.mse_psi = mean_sq_norm(fit.with_background, f_next);
  out.mse_zeta = mean_sq_norm(fit.foreground_only, f_next);

  const auto att = predict_next(frozen, seq.f, seq.b);
  auto mse_psi = mean_sq_norm(att.with_background, seq.f_next);
  auto mse_zeta = mean_sq_norm(att.foreground_only, seq.f_next);
  out.clamped = mse_psi->value[0] < eps || mse_zeta->value[0] < eps;
  mse_psi = ad::clamp_min(mse_psi, eps);
  mse_zeta = ad::clamp_min(mse_zeta, eps);
  out.objective = ad::sub(ad::log(mse_zeta), ad::log(mse_psi));
  return out;
}

WeakScore weighted_video_score(const ad::Var& lambda, const ad::Var& scores) {
  const std::size_t n = scores->value.dim(0);
  if (n == 0) throw std::invalid_argument("weak score needs at least one proposal");
  if (lambda->value.numel() != n) throw std::invalid_argument("weak score: lambda length mismatch");
  WeakScore out;
  double total = 0;
  for (double v : lambda->value.data) total += v;
  if (total < 1e-8) {
    out.fallback = true;
    out.score = ad::combine_rows(Tensor({1, n}, 1.0 / static_cast<double>(n)), scores);
  } else {
    auto w = ad::div_by_scalar(lambda, ad::sum(lambda));
    out.score = ad::matmul(ad::reshape(w, {1, n}), scores);
  }
  out.score = ad::reshape(out.score, {scores->value.dim(1)});
  return out;
}

WeakScore weak_video_score(const ad::Var& cls_prob) {
  const std::size_t n = cls_prob->value.dim(0), k = cls_prob->value.dim(1);
  if (k < 2) throw std::invalid_argument("weak score needs at least one action class");
  const std::vector<std::size_t> bg(n, 0);
  auto lambda = ad::one_minus(ad::gather_cols(cls_prob, bg));
  auto classes = ad::slice_cols(cls_prob, 1, k - 1);
  auto out = weighted_video_score(lambda, classes);
  out.score = ad::div_by_scalar(out.score, ad::sum(out.score));
  return out;
}

IbResult ib_penalty(const ad::Var& p, const ad::Var& lambda_bar, double eps) {
  const std::size_t n = p->value.dim(0);
  if (n == 0) throw std::invalid_argument("ib_penalty needs at least one proposal");
  if (lambda_bar->value.numel() != n) throw std::invalid_argument("ib_penalty: weight length mismatch");
  IbResult out;
  double total = 0;
  for (double v : lambda_bar->value.data) total += v;
  if (total < 1e-8) {
    out.degenerate = true;
    out.penalty = ad::constant(Tensor::scalar(0.0));
    return out;
  }
  auto w = ad::div_by_scalar(ad::reshape(lambda_bar, {n}), ad::sum(lambda_bar));
  auto mu = ad::matmul(ad::reshape(w, {1, n}), p);
  auto spread = ad::sum(ad::mul(w, ad::row_sum(ad::square(ad::sub_row_broadcast(p, mu)))));
  auto energy = ad::add_scalar(ad::sum(ad::mul(w, ad::row_sum(ad::square(p)))), eps);
  out.penalty = ad::div_by_scalar(spread, energy);
  return out;
}

LossReport weak_loss(const HeadOutputs& heads, const ad::Var& p, const std::vector<int>& labels, double ib_weight) {
  if (labels.empty()) throw std::invalid_argument("weak_loss: video has no labels");
  LossReport r;
  auto ws = weak_video_score(heads.cls_prob);
  if (ws.fallback) r.flag("weak_score_fallback");
  const std::size_t n_cls = ws.score->value.numel();
  Tensor coef({n_cls});
  for (int y : labels) {
    if (y < 1 || static_cast<std::size_t>(y) > n_cls) throw std::invalid_argument("weak_loss: label out of range");
    coef[static_cast<std::size_t>(y - 1)] += 1.0 / static_cast<double>(labels.size());
  }
  auto nll = ad::scale(ad::sum(ad::mul_const(ad::log(ad::clamp_min(ws.score, 1e-12)), coef)), -1.0);
  r.add("cls", nll);
  if (ib_weight > 0.0) {
    const std::vector<std::size_t> bg(heads.size(), 0);
    auto ib = ib_penalty(p, ad::gather_cols(heads.cls_prob, bg));
    if (ib.degenerate) r.flag("ib_degenerate");
    r.add("ib", ib.penalty, ib_weight);
  }
  return r;
}

namespace {

// Mean over videos of each named term; a video lacking a term contributes zero.
LossReport pool_mean(const std::vector<LossReport>& reports) {
  LossReport out;
  if (reports.empty()) return out;
  std::vector<std::string> order;
  std::map<std::string, std::pair<ad::Var, double>> acc;
  for (const auto& rep : reports) {
    for (const auto& t : rep.terms()) {
      auto it = acc.find(t.name);
      if (it == acc.end()) {
        order.push_back(t.name);
        acc[t.name] = {t.value, t.weight};
      } else {
        if (it->second.second != t.weight) throw std::invalid_argument("inconsistent weight for term " + t.name);
        it->second.first = ad::add(it->second.first, t.value);
      }
    }
    for (const auto& f : rep.flags()) out.flag(f);
  }
  const double inv = 1.0 / static_cast<double>(reports.size());
  for (const auto& name : order) {
    const auto& [v, w] = acc[name];
    out.add(name, reports.size() == 1 ? v : ad::scale(v, inv), w);
  }
  return out;
}

}  // namespace

LossReport total_loss(const std::vector<LossReport>& supervised, const std::vector<LossReport>& unlabeled,
                      const std::vector<LossReport>& weak, const LossWeights& weights) {
  weights.validate();
  LossReport out;
  out.merge(pool_mean(supervised), "S.", 1.0);
  if (weights.unlabeled > 0.0) out.merge(pool_mean(unlabeled), "U.", weights.unlabeled);
  if (weights.weak > 0.0) out.merge(pool_mean(weak), "W.", weights.weak);
  return out;
}

}  // namespace osad
