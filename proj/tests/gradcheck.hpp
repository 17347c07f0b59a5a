#pragma once

// Central finite-difference checks for autodiff graphs (test-only).

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "osad/autograd.hpp"

namespace osad::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;
};

/// Compares analytic gradients of `loss()` w.r.t. `params` against central
/// differences at up to `coords` random coordinates per parameter.
/// Relative error uses max(|a|, |n|, floor) as the scale.
inline GradCheckResult gradcheck(const std::function<ad::Var()>& loss, const std::vector<ad::Var>& params,
                                 std::size_t coords = 20, double step = 1e-3, std::uint64_t seed = 7,
                                 double floor = 1e-6) {
  for (const auto& p : params) ad::zero_grad(p);
  auto root = loss();
  ad::backward(root);
  std::vector<Tensor> analytic;
  for (const auto& p : params) analytic.push_back(p->grad.numel() ? p->grad : Tensor(p->value.shape, 0.0));

  std::mt19937_64 rng(seed);
  GradCheckResult res;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    const auto n = p->value.numel();
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(coords, n));
    for (auto i : idx) {
      const double orig = p->value[i];
      p->value[i] = orig + step;
      const double up = loss()->value[0];
      p->value[i] = orig - step;
      const double down = loss()->value[0];
      p->value[i] = orig;
      const double numeric = (up - down) / (2 * step);
      const double a = analytic[k][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++res.checked;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst = "param " + std::to_string(k) + "[" + std::to_string(i) + "] analytic " + std::to_string(a) +
                    " numeric " + std::to_string(numeric);
      }
    }
  }
  for (const auto& p : params) ad::zero_grad(p);
  return res;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = n(rng);
  return t;
}

}  // namespace osad::testing
