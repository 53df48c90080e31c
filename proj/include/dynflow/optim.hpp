#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dynflow/errors.hpp"
#include "dynflow/params.hpp"

namespace dynflow {

enum class OptimMode { kPlain, kMomentum, kAdam };

struct OptimizerConfig {
  OptimMode mode = OptimMode::kMomentum;
  double lr = 0.01;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // global gradient-norm clip; 0 disables
};

// Gradient-descent step over a ParamStore.
//   plain:    p <- p - lr * g
//   momentum: v <- mu * v + g;  p <- p - lr * v
//   adam:     bias-corrected first/second moments
// A step is all-or-nothing: any non-finite gradient rejects the whole step
// before a single value changes.
class Optimizer {
 public:
  using Filter = std::function<bool(const std::string&)>;

  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {
    if (!(cfg_.lr > 0)) throw ContractError("optimizer: lr must be positive");
  }

  const OptimizerConfig& config() const { return cfg_; }
  void set_lr(double lr) {
    if (!(lr > 0)) throw ContractError("optimizer: lr must be positive");
    cfg_.lr = lr;
  }

  void step(ParamStore& params, const Filter& trainable = {}) {
    std::vector<std::pair<const std::string*, Tensor*>> selected;
    for (auto& [name, t] : params.entries()) {
      if (trainable && !trainable(name)) continue;
      selected.emplace_back(&name, &t);
    }
    double sq = 0;
    for (auto [name, t] : selected) {
      if (!t->has_grad()) continue;
      for (double g : t->grad()) {
        if (!std::isfinite(g)) throw NumericalError("non-finite gradient in parameter '" + *name + "'");
        sq += g * g;
      }
    }
    double factor = 1.0;
    const double norm = std::sqrt(sq);
    if (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) factor = cfg_.clip_norm / norm;
    last_grad_norm_ = norm;

    ++steps_;
    for (auto [name, t] : selected) {
      if (!t->has_grad()) continue;
      auto grad = t->grad();
      auto data = t->mutable_data();
      switch (cfg_.mode) {
        case OptimMode::kPlain:
          for (std::size_t i = 0; i < data.size(); ++i) data[i] -= cfg_.lr * factor * grad[i];
          break;
        case OptimMode::kMomentum: {
          auto& v = state(velocity_, *name, data.size());
          for (std::size_t i = 0; i < data.size(); ++i) {
            v[i] = cfg_.momentum * v[i] + factor * grad[i];
            data[i] -= cfg_.lr * v[i];
          }
          break;
        }
        case OptimMode::kAdam: {
          auto& m = state(velocity_, *name, data.size());
          auto& s = state(second_, *name, data.size());
          const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
          const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
          for (std::size_t i = 0; i < data.size(); ++i) {
            const double g = factor * grad[i];
            m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * g;
            s[i] = cfg_.beta2 * s[i] + (1 - cfg_.beta2) * g * g;
            data[i] -= cfg_.lr * (m[i] / c1) / (std::sqrt(s[i] / c2) + cfg_.eps);
          }
          break;
        }
      }
    }
  }

  double last_grad_norm() const { return last_grad_norm_; }

 private:
  static std::vector<double>& state(std::map<std::string, std::vector<double>>& table,
                                    const std::string& name, std::size_t n) {
    auto& v = table[name];
    if (v.size() != n) v.assign(n, 0.0);
    return v;
  }

  OptimizerConfig cfg_;
  long steps_ = 0;
  double last_grad_norm_ = 0;
  std::map<std::string, std::vector<double>> velocity_;
  std::map<std::string, std::vector<double>> second_;
};

}  // namespace dynflow
