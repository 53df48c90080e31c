#pragma once

#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dynflow/errors.hpp"

namespace dynflow {

// Per-element FLOP conventions. Both the analytic layer walk and the runtime
// counter inside the tensor ops read these constants.
namespace flop_cost {
inline constexpr std::uint64_t kRelu = 1;
inline constexpr std::uint64_t kSigmoid = 2;
inline constexpr std::uint64_t kTanh = 2;
inline constexpr std::uint64_t kElementwise = 1;  // add, sub, mul, scale, 1-x
inline constexpr std::uint64_t kPoolPerInput = 1;  // accumulate
inline constexpr std::uint64_t kPoolPerOutput = 1;  // divide
inline constexpr std::uint64_t kLookupPerOutput = 7;  // 4 mul + 3 add
inline constexpr std::uint64_t kGatePerSample = 6;  // 2-way softmax
inline constexpr std::uint64_t kGateNoisePerSample = 2;
}  // namespace flop_cost

// Runtime tally of forward FLOPs executed on this thread. Ops add to it
// unconditionally; callers snapshot and diff.
inline std::uint64_t& flop_counter() {
  thread_local std::uint64_t count = 0;
  return count;
}

inline void charge_flops(std::uint64_t n) { flop_counter() += n; }

class FlopScope {
 public:
  FlopScope() : start_(flop_counter()) {}
  std::uint64_t elapsed() const { return flop_counter() - start_; }

 private:
  std::uint64_t start_;
};

enum class LayerKind {
  kConv,
  kRelu,
  kSigmoid,
  kTanh,
  kElementwise,
  kGlobalAvgPool,
  kCorrVolume,
  kCorrLookup,
  kGumbelGate,
  kConcat,
};

// Dimensions of one executed layer. Fields not used by a kind are ignored.
struct LayerSpec {
  LayerKind kind = LayerKind::kElementwise;
  std::string name;
  // conv
  std::uint64_t kernel = 0, cin = 0, cout = 0, out_h = 0, out_w = 0;
  bool bias = false;
  // elementwise/pointwise/pool: elements touched; corr: feature channels
  std::uint64_t elements = 0;
  std::uint64_t channels = 0;
  std::uint64_t pixels = 0;  // corr: h*w; pool: output elements
  std::uint64_t samples = 0;
  bool noise = false;
};

inline LayerSpec conv_layer(std::string name, std::uint64_t k, std::uint64_t cin,
                            std::uint64_t cout, std::uint64_t oh, std::uint64_t ow,
                            bool bias = true) {
  LayerSpec s;
  s.kind = LayerKind::kConv;
  s.name = std::move(name);
  s.kernel = k;
  s.cin = cin;
  s.cout = cout;
  s.out_h = oh;
  s.out_w = ow;
  s.bias = bias;
  return s;
}

inline LayerSpec elementwise_layer(LayerKind kind, std::string name, std::uint64_t n) {
  LayerSpec s;
  s.kind = kind;
  s.name = std::move(name);
  s.elements = n;
  return s;
}

// Exact analytic FLOPs of one layer.
inline std::uint64_t count_flops(const LayerSpec& s) {
  switch (s.kind) {
    case LayerKind::kConv: {
      const std::uint64_t out = s.out_h * s.out_w * s.cout;
      return 2 * s.kernel * s.kernel * s.cin * out + (s.bias ? out : 0);
    }
    case LayerKind::kRelu:
      return flop_cost::kRelu * s.elements;
    case LayerKind::kSigmoid:
      return flop_cost::kSigmoid * s.elements;
    case LayerKind::kTanh:
      return flop_cost::kTanh * s.elements;
    case LayerKind::kElementwise:
      return flop_cost::kElementwise * s.elements;
    case LayerKind::kGlobalAvgPool:
      return flop_cost::kPoolPerInput * s.elements + flop_cost::kPoolPerOutput * s.pixels;
    case LayerKind::kCorrVolume:
      // one dot product of `channels` terms plus one scale per pixel pair
      return s.samples * s.pixels * s.pixels * (2 * s.channels + 1);
    case LayerKind::kCorrLookup:
      return flop_cost::kLookupPerOutput * s.elements;
    case LayerKind::kGumbelGate:
      return s.samples * (flop_cost::kGatePerSample +
                          (s.noise ? flop_cost::kGateNoisePerSample : 0));
    case LayerKind::kConcat:
      return 0;
  }
  throw ContractError("count_flops: unknown layer kind");
}

inline std::uint64_t count_flops(std::span<const LayerSpec> layers) {
  std::uint64_t total = 0;
  for (const auto& l : layers) total += count_flops(l);
  return total;
}

}  // namespace dynflow
