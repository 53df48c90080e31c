#pragma once

#include <cmath>
#include <vector>

#include "dynflow/losses.hpp"
#include "gradcheck.hpp"

namespace dynflow::testing {

// Plain-loop recomputations over raw arrays.
inline double l1_oracle(const Tensor& pred, const Tensor& gt, const Tensor& valid, std::size_t n) {
  const std::size_t c = pred.size(1), plane = pred.size(2) * pred.size(3);
  double s = 0, cnt = 0;
  for (std::size_t j = 0; j < plane; ++j) {
    if (valid[n * plane + j] == 0.0) continue;
    for (std::size_t k = 0; k < c; ++k) {
      s += std::fabs(pred[(n * c + k) * plane + j] - gt[(n * c + k) * plane + j]);
      cnt += 1;
    }
  }
  return s / cnt;
}

inline double flow_oracle(const Tensor& gt, const std::vector<Tensor>& preds, const Tensor& valid) {
  const std::size_t N = gt.size(0), T = preds.size();
  double total = 0;
  for (std::size_t t = 0; t < T; ++t) {
    double w = 1;
    for (std::size_t k = t + 1; k < T; ++k) w *= 0.8;
    double m = 0;
    for (std::size_t n = 0; n < N; ++n) m += l1_oracle(preds[t], gt, valid, n);
    total += w * m / static_cast<double>(N);
  }
  return total;
}

inline double resource_oracle(const std::vector<Tensor>& gates, const Tensor& r, bool hinge) {
  const std::size_t N = r.numel();
  double total = 0;
  for (std::size_t n = 0; n < N; ++n) {
    double m = 0;
    for (const auto& g : gates) m += g[n];
    m /= static_cast<double>(gates.size());
    const double e = m - r[n];
    total += hinge ? (e > 0 ? e : 0.0) : std::fabs(e);
  }
  return total / static_cast<double>(N);
}

inline double incremental_oracle(const Tensor& gt, const std::vector<Tensor>& hat, const std::vector<Tensor>& next,
                          const std::vector<Tensor>& imp, const Tensor& valid) {
  const std::size_t N = gt.size(0);
  double total = 0;
  for (std::size_t t = 0; t < hat.size(); ++t) {
    double m = 0;
    for (std::size_t n = 0; n < N; ++n) {
      const double target = l1_oracle(hat[t], gt, valid, n) - l1_oracle(next[t], gt, valid, n);
      m += std::fabs(target - imp[t][n]);
    }
    total += m / static_cast<double>(N);
  }
  return total;
}

struct LossFixture {
  Tensor gt, valid;
  std::vector<Tensor> hat, next, gates, imp;
  Tensor r;

  explicit LossFixture(std::uint64_t seed, std::size_t N = 3, std::size_t T = 4) {
    gt = random_tensor({N, 2, 3, 4}, seed, -3, 3);
    valid = Tensor({N, 1, 3, 4}, 1.0);
    for (std::size_t i = 0; i < valid.numel(); i += 5) valid.mutable_data()[i] = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      hat.push_back(random_tensor({N, 2, 3, 4}, seed * 100 + t, -3, 3));
      next.push_back(random_tensor({N, 2, 3, 4}, seed * 200 + t, -3, 3));
    }
    for (std::size_t t = 0; t + 1 < T; ++t) {
      gates.push_back(random_tensor({N}, seed * 300 + t, 0, 1));
      imp.push_back(random_tensor({N}, seed * 400 + t, -1, 1));
    }
    r = Tensor({N}, 0.0);
    Rng rng(seed);
    for (double& v : r.mutable_data()) v = rng.uniform(0.2, 1.0);
  }
};


}  // namespace dynflow::testing
