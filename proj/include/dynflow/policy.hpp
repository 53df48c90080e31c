#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "dynflow/errors.hpp"
#include "dynflow/flops.hpp"
#include "dynflow/ops.hpp"
#include "dynflow/params.hpp"
#include "dynflow/rng.hpp"
#include "dynflow/tensor.hpp"

namespace dynflow {

// full: history cell, iteration embedding and improvement head all active.
// no_fi: improvement head produced but never supervised (the "-P" model).
// no_context: history cell and embedding replaced by zeros, improvement
//             unsupervised (the "-B" model).
enum class PolicyVariant { kFull, kNoFutureInfo, kNoContext };

struct PolicyConfig {
  std::size_t hidden = 16;        // channels of the history cell h_t
  std::size_t conv1_kernel = 1;
  double tau = 1.0;
  bool literal_embedding = false;  // phase 2^i*pi*t instead of 2^i*pi*t/T
};

inline constexpr std::size_t kEmbeddingDim = 6;
using IterationEmbedding = std::array<double, kEmbeddingDim>;

// {sin(2^i pi x), cos(2^i pi x)} for i = 0,1,2, interleaved (sin, cos) per
// octave, with x = t/T (or x = t in literal mode). Valid for 1 <= t <= T-1.
inline IterationEmbedding iteration_embedding(int t, int total, bool literal = false) {
  if (total < 2 || t < 1 || t > total - 1) {
    throw ContractError("iteration_embedding: t=" + std::to_string(t) + " outside [1, " +
                        std::to_string(total - 1) + "]");
  }
  const double phase = literal ? static_cast<double>(t)
                               : static_cast<double>(t) / static_cast<double>(total);
  IterationEmbedding e{};
  for (int i = 0; i < 3; ++i) {
    const double a = std::ldexp(std::numbers::pi, i) * phase;
    e[2 * i] = std::sin(a);
    e[2 * i + 1] = std::cos(a);
  }
  return e;
}

// 2N standard Gumbel samples (two per sample).
inline std::vector<double> draw_gumbel_noise(Rng& rng, std::size_t samples) {
  std::vector<double> g(2 * samples);
  for (double& v : g) v = rng.gumbel();
  return g;
}

// p = softmax((P + G) / tau)[0]; pass an empty noise span for the
// deterministic gate.
inline Tensor gumbel_gate(const Tensor& logits, double tau, std::span<const double> noise = {}) {
  return gumbel_softmax_gate(logits, noise, tau);
}

struct PolicyState {
  Tensor h;  // [N,Ch,h,w]

  static PolicyState zeros(std::size_t n, std::size_t channels, std::size_t h, std::size_t w) {
    return {Tensor(Shape{n, channels, h, w}, 0.0)};
  }
};

struct GateOutput {
  Tensor logits;       // [N,2,1,1]: (enter, skip)
  Tensor gate;         // [N] soft iteration mask p
  Tensor improvement;  // [N] predicted next-step drop in mean L1 flow error
};

struct PolicyStep {
  PolicyState state;
  GateOutput out;
};

class Policy {
 public:
  Policy(const PolicyConfig& cfg, std::size_t feature_channels, ParamStore& params)
      : cfg_(cfg), feature_channels_(feature_channels), params_(&params) {}

  static void register_params(ParamStore& params, const PolicyConfig& c,
                              std::size_t feature_channels, std::uint64_t seed) {
    const std::size_t cin = feature_channels + c.hidden + kEmbeddingDim;
    const std::size_t k = c.conv1_kernel;
    params.add("policy.conv1.weight", {c.hidden, cin, k, k}, cin * k * k, seed);
    params.add("policy.conv1.bias", {c.hidden}, cin * k * k, seed);
    params.add("policy.conv2.weight", {3, c.hidden, 1, 1}, c.hidden, seed);
    params.add("policy.conv2.bias", {3}, c.hidden, seed);
  }

  static bool is_policy_param(const std::string& name) { return name.rfind("policy.", 0) == 0; }

  const PolicyConfig& config() const { return cfg_; }

  PolicyState initial_state(std::size_t n, std::size_t h, std::size_t w) const {
    return PolicyState::zeros(n, cfg_.hidden, h, w);
  }

  // h_t = Conv1(concat{phi_hat, h_{t-1}, e_t}) * r
  // (P, i) = Conv2(avgpool(relu(h_t))),  p = gumbel(P)
  // `resource` holds one r per sample.
  PolicyStep forward(const Tensor& phi_hat, const PolicyState& state, const IterationEmbedding& e,
                     const Tensor& resource, std::span<const double> noise,
                     PolicyVariant variant) const {
    if (phi_hat.rank() != 4 || phi_hat.size(1) != feature_channels_) {
      throw ShapeError("policy: phi_hat " + shape_str(phi_hat.shape()));
    }
    const std::size_t n = phi_hat.size(0), h = phi_hat.size(2), w = phi_hat.size(3);
    if (state.h.shape() != Shape{n, cfg_.hidden, h, w}) {
      throw ShapeError("policy: history cell " + shape_str(state.h.shape()) +
                       " does not match phi_hat " + shape_str(phi_hat.shape()));
    }
    if (resource.numel() != n) {
      throw ShapeError("policy: expected " + std::to_string(n) + " resource values");
    }
    for (double r : resource.data()) {
      if (!(r > 0.0 && r <= 1.0)) {
        throw ContractError("policy: resource preference r=" + std::to_string(r) +
                            " outside (0, 1]");
      }
    }

    const bool context = variant != PolicyVariant::kNoContext;
    Tensor history = context ? state.h : Tensor(state.h.shape(), 0.0);
    Tensor embed(Shape{n, kEmbeddingDim, h, w}, 0.0);
    if (context) {
      auto d = embed.mutable_data();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t c = 0; c < kEmbeddingDim; ++c)
          std::fill_n(d.begin() + static_cast<std::ptrdiff_t>((b * kEmbeddingDim + c) * h * w),
                      h * w, e[c]);
    }

    const std::size_t pad = cfg_.conv1_kernel / 2;
    Tensor pre = conv2d(concat_channels({phi_hat, history, embed}),
                        params_->get("policy.conv1.weight"), params_->get("policy.conv1.bias"),
                        1, pad);
    Tensor hidden = mul_per_sample(pre, resource);
    Tensor pooled = global_avg_pool(relu(hidden));
    Tensor head = conv2d(pooled, params_->get("policy.conv2.weight"),
                         params_->get("policy.conv2.bias"), 1, 0);
    Tensor logits = slice_channels(head, 0, 2);
    Tensor improvement = reshape(slice_channels(head, 2, 1), Shape{n});
    Tensor gate = gumbel_gate(logits, cfg_.tau, noise);
    return {PolicyState{hidden}, GateOutput{logits, gate, improvement}};
  }

  // Analytic per-sample layer walk of forward() (noise off).
  std::vector<LayerSpec> layers(std::size_t h, std::size_t w) const {
    const std::size_t px = h * w, ch = cfg_.hidden;
    const std::size_t cin = feature_channels_ + ch + kEmbeddingDim;
    std::vector<LayerSpec> L;
    L.push_back(conv_layer("policy.conv1", cfg_.conv1_kernel, cin, ch, h, w));
    L.push_back(elementwise_layer(LayerKind::kElementwise, "policy.resource_scale", ch * px));
    L.push_back(elementwise_layer(LayerKind::kRelu, "policy.relu", ch * px));
    LayerSpec pool = elementwise_layer(LayerKind::kGlobalAvgPool, "policy.pool", ch * px);
    pool.pixels = ch;
    L.push_back(pool);
    L.push_back(conv_layer("policy.conv2", 1, ch, 3, 1, 1));
    LayerSpec gate;
    gate.kind = LayerKind::kGumbelGate;
    gate.name = "policy.gate";
    gate.samples = 1;
    L.push_back(gate);
    return L;
  }

 private:
  PolicyConfig cfg_;
  std::size_t feature_channels_;
  ParamStore* params_;
};

}  // namespace dynflow
