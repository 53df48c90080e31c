#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dynflow/errors.hpp"
#include "dynflow/ops.hpp"
#include "dynflow/tensor.hpp"

namespace dynflow {

inline constexpr double kSequenceDecay = 0.8;
inline constexpr double kLambdaResource = 50.0;
inline constexpr double kLambdaIncremental = 1.0;

enum class ResourceLossKind { kHinge, kL1 };

// Sum over t of decay^(T-t) * batch-mean of the per-sample masked L1 error.
inline Tensor flow_loss(const Tensor& flow_gt, const std::vector<Tensor>& predictions,
                        const Tensor& valid, double decay = kSequenceDecay) {
  if (predictions.empty()) throw ContractError("flow_loss: empty prediction sequence");
  const std::size_t steps = predictions.size();
  Tensor total;
  for (std::size_t t = 0; t < steps; ++t) {
    const double weight = std::pow(decay, static_cast<double>(steps - 1 - t));
    Tensor term = scale(mean(masked_l1_mean(predictions[t], flow_gt, valid)), weight);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

// hinge: mean_n max(0, mean_t p_t[n] - r[n]);  l1: mean_n |mean_t p_t[n] - r[n]|.
// Hinge subgradient at the kink is 0.
inline Tensor resource_loss(const std::vector<Tensor>& gates, const Tensor& resource,
                            ResourceLossKind kind = ResourceLossKind::kHinge) {
  if (gates.empty()) throw ContractError("resource_loss: needs at least one gate (T >= 2)");
  Tensor acc = gates[0];
  for (std::size_t t = 1; t < gates.size(); ++t) acc = add(acc, gates[t]);
  if (resource.shape() != acc.shape()) {
    throw ShapeError("resource_loss: resource " + shape_str(resource.shape()) + " vs gates " +
                     shape_str(acc.shape()));
  }
  Tensor excess = sub(scale(acc, 1.0 / static_cast<double>(gates.size())), resource);
  return mean(kind == ResourceLossKind::kHinge ? relu(excess) : abs(excess));
}

// Sum over t of batch-mean | (err(f_hat_t) - err(f_next_t)) - i_t |, where
// err is the per-sample masked L1 error. The improvement targets are
// computed from detached flows, so only the predictions i_t receive
// gradient.
inline Tensor incremental_loss(const Tensor& flow_gt, const std::vector<Tensor>& flow_hat,
                               const std::vector<Tensor>& flow_next,
                               const std::vector<Tensor>& improvement, const Tensor& valid) {
  if (flow_hat.size() != flow_next.size() || flow_hat.size() != improvement.size()) {
    throw ContractError("incremental_loss: sequence lengths " + std::to_string(flow_hat.size()) +
                        ", " + std::to_string(flow_next.size()) + ", " +
                        std::to_string(improvement.size()) + " differ");
  }
  if (flow_hat.empty()) throw ContractError("incremental_loss: empty sequences");
  Tensor total;
  for (std::size_t t = 0; t < flow_hat.size(); ++t) {
    Tensor before = masked_l1_mean(flow_hat[t].detach(), flow_gt, valid);
    Tensor after = masked_l1_mean(flow_next[t].detach(), flow_gt, valid);
    Tensor target = sub(before, after);
    Tensor term = mean(abs(sub(target, improvement[t])));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

struct LossWeights {
  double resource = kLambdaResource;
  double incremental = kLambdaIncremental;
};

struct LossBreakdown {
  double flow = 0;
  double resource = 0;
  double incremental = 0;
  double overall = 0;
  double lambda_res = kLambdaResource;
  double lambda_incre = kLambdaIncremental;
  Tensor objective;  // differentiable overall loss
};

// flow + lambda_res * resource + lambda_incre * incremental. Undefined
// parts count as zero; a zero weight drops the term from the graph.
inline LossBreakdown overall_loss(const Tensor& flow, const Tensor& resource,
                                  const Tensor& incremental, LossWeights weights = {}) {
  LossBreakdown out;
  out.lambda_res = weights.resource;
  out.lambda_incre = weights.incremental;
  out.flow = flow.item();
  out.resource = resource.defined() ? resource.item() : 0.0;
  out.incremental = incremental.defined() ? incremental.item() : 0.0;
  Tensor total = flow;
  if (resource.defined() && weights.resource != 0.0)
    total = add(total, scale(resource, weights.resource));
  if (incremental.defined() && weights.incremental != 0.0)
    total = add(total, scale(incremental, weights.incremental));
  out.objective = total;
  out.overall = total.item();
  return out;
}

}  // namespace dynflow
