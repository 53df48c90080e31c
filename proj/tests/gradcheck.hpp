#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "dynflow/ops.hpp"
#include "dynflow/rng.hpp"
#include "dynflow/tensor.hpp"

namespace dynflow::testing {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  Tensor t(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  return t;
}

// Reduces any output to a scalar with fixed random weights so every output
// element contributes a distinct coefficient.
inline Tensor weighted_sum(const Tensor& out, std::uint64_t seed = 99) {
  Tensor w = random_tensor(out.shape(), seed, 0.5, 1.5);
  w.set_requires_grad(false);
  return sum(mul(out, w));
}

struct GradCheck {
  double rel_error = 0;  // |analytic - numeric|_2 / max(|numeric|_2, 1e-8)
  double max_abs = 0;
  std::size_t checked = 0;
};

// Central differences of `loss` w.r.t. every element of every input.
inline GradCheck check_gradients(const std::function<Tensor()>& loss, std::vector<Tensor> inputs,
                                 double h = 1e-6) {
  for (Tensor& t : inputs) t.zero_grad();
  loss().backward();
  GradCheck r;
  double diff2 = 0, num2 = 0;
  for (Tensor& t : inputs) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) analytic.assign(t.grad().begin(), t.grad().end());
    auto d = t.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double keep = d[i];
      double plus, minus;
      {
        NoGradGuard g;
        d[i] = keep + h;
        plus = loss().item();
        d[i] = keep - h;
        minus = loss().item();
      }
      d[i] = keep;
      const double numeric = (plus - minus) / (2 * h);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      num2 += numeric * numeric;
      r.max_abs = std::max(r.max_abs, std::abs(analytic[i] - numeric));
      ++r.checked;
    }
  }
  r.rel_error = std::sqrt(diff2) / std::max(std::sqrt(num2), 1e-8);
  return r;
}

}  // namespace dynflow::testing
