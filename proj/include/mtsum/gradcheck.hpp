#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "mtsum/params.hpp"
#include "mtsum/rng.hpp"

namespace mtsum {

struct GradCheckOptions {
  double eps = 1e-4;
  // 0 = check every coordinate; otherwise a seeded sample per tensor,
  // biased toward coordinates with nonzero analytic gradient
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t seed = 17;
};

// Central finite differences against the analytic reverse-mode gradient.
// `loss_fn` must evaluate the scalar loss at the current parameter values and
// leave the analytic gradients in the store (i.e. zero grads + forward +
// backward). 64-bit mode and dropout off are the caller's responsibility.
// Returns max over checked coordinates of |a - n| / max(1e-8, |a| + |n|).
inline double grad_check(const std::function<double(ParamStore<double>&)>& loss_fn, ParamStore<double>& params,
                         const GradCheckOptions& opt = {}) {
  params.zero_grads();
  loss_fn(params);
  std::vector<Tensor<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& e : params.entries()) analytic.push_back(e.grad);

  Rng rng(opt.seed);
  double max_rel = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& e = params.entries()[pi];
    if (!e.trainable) continue;
    const std::size_t n = e.value.size();

    std::vector<std::size_t> coords;
    if (opt.max_coords_per_tensor == 0 || n <= opt.max_coords_per_tensor) {
      coords.resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      std::vector<std::size_t> hot;
      for (std::size_t i = 0; i < n; ++i)
        if (analytic[pi][i] != 0.0) hot.push_back(i);
      rng.shuffle(hot);
      const std::size_t take_hot = std::min(hot.size(), opt.max_coords_per_tensor / 2);
      coords.assign(hot.begin(), hot.begin() + take_hot);
      while (coords.size() < opt.max_coords_per_tensor) coords.push_back(rng.below(n));
      std::sort(coords.begin(), coords.end());
      coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    }

    for (std::size_t c : coords) {
      const double saved = e.value[c];
      e.value[c] = saved + opt.eps;
      const double lp = loss_fn(params);
      e.value[c] = saved - opt.eps;
      const double lm = loss_fn(params);
      e.value[c] = saved;
      const double numeric = (lp - lm) / (2.0 * opt.eps);
      const double a = analytic[pi][c];
      const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      max_rel = std::max(max_rel, rel);
    }
  }

  // leave the store in the analytic state it was handed back in
  params.zero_grads();
  loss_fn(params);
  return max_rel;
}

}  // namespace mtsum
