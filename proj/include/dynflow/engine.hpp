#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dynflow/errors.hpp"
#include "dynflow/flops.hpp"
#include "dynflow/flownet.hpp"
#include "dynflow/losses.hpp"
#include "dynflow/ops.hpp"
#include "dynflow/optim.hpp"
#include "dynflow/params.hpp"
#include "dynflow/policy.hpp"
#include "dynflow/rng.hpp"
#include "dynflow/synthdata.hpp"
#include "dynflow/tensor.hpp"

namespace dynflow {

// Training-recipe variants. exit trains like full; it only changes how
// inference terminates.
enum class Variant { kFull, kL1, kB, kP, kExit };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kL1: return "L1";
    case Variant::kB: return "B";
    case Variant::kP: return "P";
    case Variant::kExit: return "exit";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "full") return Variant::kFull;
  if (s == "L1" || s == "l1") return Variant::kL1;
  if (s == "B" || s == "b") return Variant::kB;
  if (s == "P" || s == "p") return Variant::kP;
  if (s == "exit" || s == "Exit") return Variant::kExit;
  throw ConfigError("unknown variant '" + s + "' (expected full, L1, B, P or exit)");
}

inline PolicyVariant policy_variant(Variant v) {
  switch (v) {
    case Variant::kB: return PolicyVariant::kNoContext;
    case Variant::kP: return PolicyVariant::kNoFutureInfo;
    default: return PolicyVariant::kFull;
  }
}

inline ResourceLossKind resource_kind(Variant v) {
  return v == Variant::kL1 ? ResourceLossKind::kL1 : ResourceLossKind::kHinge;
}

inline LossWeights loss_weights(Variant v) {
  LossWeights w;
  if (v == Variant::kB || v == Variant::kP) w.incremental = 0.0;
  return w;
}

// backbone: gates forced open, flow loss only, policy untouched.
// policy:   backbone frozen, full objective.
// joint:    everything trained together from the full objective.
enum class TrainPhase { kBackbone, kPolicy, kJoint };

inline const char* phase_name(TrainPhase p) {
  switch (p) {
    case TrainPhase::kBackbone: return "backbone";
    case TrainPhase::kPolicy: return "policy";
    case TrainPhase::kJoint: return "joint";
  }
  return "?";
}

inline TrainPhase parse_phase(const std::string& s) {
  if (s == "backbone") return TrainPhase::kBackbone;
  if (s == "policy") return TrainPhase::kPolicy;
  if (s == "joint") return TrainPhase::kJoint;
  throw ConfigError("unknown phase '" + s + "' (expected backbone, policy or joint)");
}

struct ModelConfig {
  FlowNetConfig flownet;
  PolicyConfig policy;
  std::size_t height = 32;
  std::size_t width = 64;

  std::size_t grid_h() const { return height / flownet.downscale; }
  std::size_t grid_w() const { return width / flownet.downscale; }
};

// Backbone + policy sharing one parameter store.
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    FlowNet(cfg_.flownet, params_).check_image_size(cfg_.height, cfg_.width);
    FlowNet::register_params(params_, cfg_.flownet, seed);
    Policy::register_params(params_, cfg_.policy, cfg_.flownet.feature_channels, seed);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  FlowNet flownet() const { return FlowNet(cfg_.flownet, const_cast<ParamStore&>(params_)); }
  Policy policy() const {
    return Policy(cfg_.policy, cfg_.flownet.feature_channels, const_cast<ParamStore&>(params_));
  }

  std::uint64_t encoder_flops() const {
    auto layers = flownet().encoder_layers(cfg_.height, cfg_.width);
    return count_flops(layers);
  }
  std::uint64_t update_flops() const {
    auto layers = flownet().update_layers(cfg_.grid_h(), cfg_.grid_w());
    return count_flops(layers);
  }
  std::uint64_t policy_flops() const {
    auto layers = policy().layers(cfg_.grid_h(), cfg_.grid_w());
    return count_flops(layers);
  }

 private:
  ModelConfig cfg_;
  ParamStore params_;
};

// Network-ready tensors for a set of samples. The pair is stacked as
// (image2, image1): ground-truth flow lives on image2's grid and points
// into image1, so image2 is the reference frame of the correlation lookup.
struct Batch {
  Tensor image_pair;  // [N, 2C, H, W]
  Tensor flow_gt;     // [N, 2, h, w] feature-grid pixels
  Tensor valid;       // [N, 1, h, w]
  std::vector<Difficulty> difficulty;
  std::vector<std::uint64_t> ids;  // dataset indices, key the noise streams

  std::size_t size() const { return ids.size(); }
};

inline Batch make_batch(const Dataset& data, const std::vector<std::size_t>& indices,
                        std::size_t downscale) {
  if (indices.empty()) throw ContractError("make_batch: empty batch");
  const std::size_t n = indices.size(), c = data.channels, H = data.height, W = data.width;
  if (H % downscale || W % downscale) {
    throw ConfigError("dataset size " + std::to_string(H) + "x" + std::to_string(W) +
                      " not divisible by " + std::to_string(downscale));
  }
  const std::size_t h = H / downscale, w = W / downscale, plane = H * W;
  std::vector<double> pair(n * 2 * c * plane), flow(n * 2 * h * w), valid(n * h * w);
  Batch b;
  for (std::size_t k = 0; k < n; ++k) {
    const SynthSample& s = data.samples.at(indices[k]);
    std::copy(s.image2.begin(), s.image2.end(), pair.begin() + static_cast<std::ptrdiff_t>(k * 2 * c * plane));
    std::copy(s.image1.begin(), s.image1.end(),
              pair.begin() + static_cast<std::ptrdiff_t>(k * 2 * c * plane + c * plane));
    const double inv = 1.0 / static_cast<double>(downscale * downscale * downscale);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double u = 0, v = 0;
        bool ok = true;
        for (std::size_t dy = 0; dy < downscale; ++dy)
          for (std::size_t dx = 0; dx < downscale; ++dx) {
            const std::size_t i = (y * downscale + dy) * W + x * downscale + dx;
            u += s.flow[i];
            v += s.flow[plane + i];
            ok = ok && s.valid[i];
          }
        flow[(k * 2 + 0) * h * w + y * w + x] = u * inv;
        flow[(k * 2 + 1) * h * w + y * w + x] = v * inv;
        valid[k * h * w + y * w + x] = ok ? 1.0 : 0.0;
      }
    b.difficulty.push_back(s.difficulty);
    b.ids.push_back(indices[k]);
  }
  b.image_pair = Tensor(Shape{n, 2 * c, H, W}, std::move(pair));
  b.flow_gt = Tensor(Shape{n, 2, h, w}, std::move(flow));
  b.valid = Tensor(Shape{n, 1, h, w}, std::move(valid));
  return b;
}

// Everything one training unroll produces for a batch.
struct TrainingRollout {
  std::vector<Tensor> flow_hat;     // f_hat_1 .. f_hat_T (post aggregation)
  std::vector<Tensor> flow_raw;     // f_1 .. f_T (pre aggregation)
  std::vector<Tensor> gates;        // p_1 .. p_{T-1}
  std::vector<Tensor> logits;       // P_1 .. P_{T-1}
  std::vector<Tensor> improvement;  // i_1 .. i_{T-1}
  Tensor resource;                  // [N]
};

struct RolloutOptions {
  int iterations = 8;  // T
  PolicyVariant variant = PolicyVariant::kFull;
  bool noise = true;
  std::uint64_t noise_seed = 0;
  std::uint64_t step_index = 0;
  // Replace p_t in the aggregation with a constant (per step, t = 1..T-1).
  // The policy still runs unless skip_policy is set.
  std::optional<std::vector<double>> gate_override;
  bool skip_policy = false;
};

// Gumbel noise for one (sample, step, t): each sample owns its stream so
// batch composition never changes a sample's draws.
inline std::vector<double> batch_gumbel_noise(const Batch& batch, std::uint64_t seed,
                                              std::uint64_t step_index, int t) {
  std::vector<double> g;
  g.reserve(2 * batch.size());
  for (std::uint64_t id : batch.ids) {
    Rng rng = Rng::stream(seed, "gumbel", {id, step_index, static_cast<std::uint64_t>(t)});
    g.push_back(rng.gumbel());
    g.push_back(rng.gumbel());
  }
  return g;
}

// Training-mode unroll: the update operator runs all T times and outputs
// are blended with the soft gates.
//   (phi_1, f_1) = Update(phi_0, 0);  (phi_hat_1, f_hat_1) = (phi_1, f_1)
//   t = 2..T-1:  (phi_t, f_t) = Update(phi_hat_{t-1}, f_hat_{t-1})
//                phi_hat_t = blend(phi_hat_{t-1}, phi_t, p_{t-1}), same for f
//   t = T:       only f_hat_T is blended
// The policy runs after every step t <= T-1 on phi_hat_t.
inline TrainingRollout rollout(const Model& model, const Batch& batch, const Tensor& resource,
                               const RolloutOptions& opt) {
  const int T = opt.iterations;
  if (T < 2) throw ContractError("rollout: need at least 2 iterations, got " + std::to_string(T));
  if (opt.gate_override && opt.gate_override->size() != static_cast<std::size_t>(T - 1)) {
    throw ContractError("rollout: gate override needs T-1 values");
  }
  const FlowNet net = model.flownet();
  const Policy pol = model.policy();
  const std::size_t n = batch.size(), h = batch.flow_gt.size(2), w = batch.flow_gt.size(3);

  auto [maps, corr] = net.encode(batch.image_pair);
  TrainingRollout out;
  out.resource = resource;
  PolicyState state = pol.initial_state(n, h, w);

  auto gate_at = [&](int t) -> Tensor {  // p_t, t in 1..T-1
    if (opt.gate_override) return Tensor(Shape{n}, (*opt.gate_override)[static_cast<std::size_t>(t - 1)]);
    return out.gates[static_cast<std::size_t>(t - 1)];
  };
  auto run_policy = [&](const Tensor& phi_hat, int t) {
    if (opt.skip_policy) return;
    std::vector<double> noise;
    if (opt.noise) noise = batch_gumbel_noise(batch, opt.noise_seed, opt.step_index, t);
    PolicyStep step = pol.forward(phi_hat, state, iteration_embedding(t, T, pol.config().literal_embedding),
                                  resource, noise, opt.variant);
    state = step.state;
    out.gates.push_back(step.out.gate);
    out.logits.push_back(step.out.logits);
    out.improvement.push_back(step.out.improvement);
  };

  Tensor zero_flow(Shape{n, 2, h, w}, 0.0);
  UpdateResult first = net.update(maps.phi, zero_flow, corr, maps);
  Tensor phi_hat = first.phi, flow_hat = first.flow;
  out.flow_raw.push_back(first.flow);
  out.flow_hat.push_back(first.flow);
  run_policy(phi_hat, 1);

  for (int t = 2; t <= T; ++t) {
    UpdateResult u = net.update(phi_hat, flow_hat, corr, maps);
    const Tensor p = gate_at(t - 1);
    out.flow_raw.push_back(u.flow);
    flow_hat = blend(flow_hat, u.flow, p);
    out.flow_hat.push_back(flow_hat);
    if (t < T) {
      phi_hat = blend(phi_hat, u.phi, p);
      run_policy(phi_hat, t);
    }
  }
  return out;
}

// Losses of a rollout for the given variant and phase.
inline LossBreakdown rollout_loss(const TrainingRollout& ro, const Batch& batch, Variant variant,
                                  TrainPhase phase) {
  Tensor lf = flow_loss(batch.flow_gt, ro.flow_hat, batch.valid);
  if (phase == TrainPhase::kBackbone || ro.gates.empty()) {
    LossWeights none{0.0, 0.0};
    return overall_loss(lf, Tensor(), Tensor(), none);
  }
  Tensor lr = resource_loss(ro.gates, ro.resource, resource_kind(variant));
  const std::vector<Tensor> hat(ro.flow_hat.begin(), ro.flow_hat.end() - 1);
  const std::vector<Tensor> next(ro.flow_raw.begin() + 1, ro.flow_raw.end());
  Tensor li = incremental_loss(batch.flow_gt, hat, next, ro.improvement, batch.valid);
  return overall_loss(lf, lr, li, loss_weights(variant));
}

struct TrainConfig {
  int t_train = 8;
  int t_test = 12;
  double r_min = 0.2;
  double r_max = 1.0;
  bool per_sample_r = false;
  std::size_t batch_size = 4;
  int steps = 200;
  std::uint64_t seed = 1;
  Variant variant = Variant::kFull;
  TrainPhase phase = TrainPhase::kJoint;
  OptimizerConfig optim{OptimMode::kAdam, 1e-3, 0.9, 0.9, 0.999, 1e-8, 1.0};
  bool gumbel_noise = true;

  void validate() const {
    if (t_train < 2) throw ConfigError("T_train must be at least 2");
    if (t_test < 1) throw ConfigError("T_test must be at least 1");
    if (!(r_min > 0 && r_min <= r_max && r_max <= 1)) throw ConfigError("r range must lie in (0, 1]");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
  }
  bool freeze_backbone() const { return phase == TrainPhase::kPolicy; }
};

struct StepResult {
  LossBreakdown loss;
  double r = 0;  // resource preference drawn for the batch (first sample)
  std::vector<std::vector<double>> gates;  // [t][n] soft gates
};

inline Tensor sample_resource(const TrainConfig& cfg, std::size_t n, std::uint64_t step_index) {
  std::vector<double> r(n);
  if (cfg.per_sample_r) {
    for (std::size_t k = 0; k < n; ++k)
      r[k] = Rng::stream(cfg.seed, "r-sampling", {step_index, k}).uniform(cfg.r_min, cfg.r_max);
  } else {
    const double v = Rng::stream(cfg.seed, "r-sampling", {step_index}).uniform(cfg.r_min, cfg.r_max);
    std::fill(r.begin(), r.end(), v);
  }
  return Tensor(Shape{n}, std::move(r));
}

// One optimization step. A non-finite loss aborts the step before any
// parameter changes.
inline StepResult train_step(Model& model, const Batch& batch, const TrainConfig& cfg,
                             Optimizer& optimizer, std::uint64_t step_index,
                             std::optional<std::vector<double>> gate_override = std::nullopt) {
  cfg.validate();
  RolloutOptions opt;
  opt.iterations = cfg.t_train;
  opt.variant = policy_variant(cfg.variant);
  opt.noise = cfg.gumbel_noise;
  opt.noise_seed = cfg.seed;
  opt.step_index = step_index;
  opt.skip_policy = cfg.phase == TrainPhase::kBackbone;
  if (cfg.phase == TrainPhase::kBackbone) {
    opt.gate_override = std::vector<double>(static_cast<std::size_t>(cfg.t_train - 1), 1.0);
  }
  if (gate_override) opt.gate_override = std::move(gate_override);

  // Frozen parameters leave the graph so their gradients are never built.
  std::vector<Tensor> frozen;
  if (cfg.phase == TrainPhase::kPolicy) {
    for (auto& [name, t] : model.params().entries())
      if (!Policy::is_policy_param(name) && t.requires_grad()) frozen.push_back(t);
  }
  for (Tensor& t : frozen) t.set_requires_grad(false);
  struct Restore {
    std::vector<Tensor>& ts;
    ~Restore() {
      for (Tensor& t : ts) t.set_requires_grad(true);
    }
  } restore{frozen};

  Tensor resource = sample_resource(cfg, batch.size(), step_index);
  TrainingRollout ro = rollout(model, batch, resource, opt);
  StepResult result;
  result.loss = rollout_loss(ro, batch, cfg.variant, cfg.phase);
  result.r = resource[0];
  for (const Tensor& g : ro.gates) result.gates.emplace_back(g.data().begin(), g.data().end());
  if (!std::isfinite(result.loss.overall)) {
    throw NumericalError("non-finite loss at step " + std::to_string(step_index) + " (flow=" +
                         std::to_string(result.loss.flow) + ", res=" +
                         std::to_string(result.loss.resource) + ", incre=" +
                         std::to_string(result.loss.incremental) + ")");
  }
  model.params().zero_grad();
  result.loss.objective.backward();
  Optimizer::Filter filter;
  if (cfg.phase == TrainPhase::kPolicy) filter = Policy::is_policy_param;
  if (cfg.phase == TrainPhase::kBackbone) filter = FlowNet::is_backbone_param;
  optimizer.step(model.params(), filter);
  return result;
}

// Deterministic batch indices for a training step.
inline std::vector<std::size_t> batch_indices(std::size_t dataset_size, std::size_t batch_size,
                                              std::uint64_t seed, std::uint64_t step_index) {
  Rng rng = Rng::stream(seed, "batch", {step_index});
  std::vector<std::size_t> idx(batch_size);
  for (auto& i : idx) i = static_cast<std::size_t>(rng.next_u64() % dataset_size);
  return idx;
}

struct StepLog {
  int step = 0;
  double r = 0;
  LossBreakdown loss;
  double gate_mean = 0;
};

// Sequential training loop; `on_step` sees every completed step.
inline std::vector<StepLog> train(Model& model, const Dataset& data, const TrainConfig& cfg,
                                  const std::function<void(const StepLog&)>& on_step = {}) {
  cfg.validate();
  if (data.size() == 0) throw ConfigError("training dataset is empty");
  Optimizer optimizer(cfg.optim);
  std::vector<StepLog> logs;
  for (int s = 0; s < cfg.steps; ++s) {
    const auto idx = batch_indices(data.size(), cfg.batch_size, cfg.seed, static_cast<std::uint64_t>(s));
    Batch batch = make_batch(data, idx, model.config().flownet.downscale);
    StepResult r = train_step(model, batch, cfg, optimizer, static_cast<std::uint64_t>(s));
    StepLog log{s + 1, r.r, r.loss, 0.0};
    std::size_t count = 0;
    for (const auto& g : r.gates)
      for (double v : g) {
        log.gate_mean += v;
        ++count;
      }
    if (count) log.gate_mean /= static_cast<double>(count);
    else if (cfg.phase == TrainPhase::kBackbone) log.gate_mean = 1.0;  // held open
    log.loss.objective = Tensor();
    logs.push_back(log);
    if (on_step) on_step(log);
  }
  return logs;
}

// ---------------------------------------------------------------------------
// Inference

enum class InferMode { kPolicy, kExit, kFixed };

struct InferOptions {
  InferMode mode = InferMode::kPolicy;
  int t_test = 12;
  int fixed_iterations = 12;  // used by kFixed
  double resource = 1.0;
  PolicyVariant policy_variant = PolicyVariant::kFull;
  // Forces entered(t) for t = 2..T (T-1 values); the policy still runs.
  std::optional<std::vector<bool>> pinned_gates;
  bool keep_step_flows = false;
};

// Row t describes update step t. Gate fields hold the policy output that
// decided step t (computed after step t-1) and are absent for t = 1.
struct StepRecord {
  int t = 0;
  bool has_gate = false;
  double logit_enter = 0, logit_skip = 0, gate = 0, improvement = 0;
  bool entered = false;
  std::uint64_t flops = 0;  // update (if entered) + policy run after this step
};

struct IterationTrace {
  std::uint64_t sample_id = 0;
  std::vector<StepRecord> steps;
  int updates_entered = 0;
  int gates_entered = 0;  // steps t >= 2 that ran
  int gated_steps = 0;    // steps t >= 2 (T-1 of them)
  std::uint64_t flops_encoder = 0;
  std::uint64_t flops_total = 0;
};

struct InferResult {
  Tensor flow;  // [1,2,h,w]
  IterationTrace trace;
  std::vector<Tensor> step_flows;  // f_hat_t after each step, if requested
};

// Skip-based inference for one sample (Batch of size 1). Gumbel noise is
// off; step 1 always runs; step t >= 2 runs only if the previous gate had
// P[enter] > P[skip]. A skipped step carries (phi_hat, f_hat) unchanged.
// The policy keeps running on skipped steps so h_t evolves. Exit mode stops
// everything at the first skip; fixed mode ignores the policy.
inline InferResult infer(const Model& model, const Batch& sample, const InferOptions& opt) {
  if (sample.size() != 1) throw ContractError("infer: expects a single sample");
  if (!(opt.resource > 0 && opt.resource <= 1)) {
    throw ContractError("infer: resource preference must lie in (0, 1]");
  }
  NoGradGuard no_grad;
  const FlowNet net = model.flownet();
  const Policy pol = model.policy();
  const std::size_t h = sample.flow_gt.size(2), w = sample.flow_gt.size(3);
  const std::uint64_t update_cost = model.update_flops(), policy_cost = model.policy_flops();
  const int T = opt.mode == InferMode::kFixed ? opt.fixed_iterations : opt.t_test;
  if (T < 1) throw ContractError("infer: need at least one iteration");
  if (opt.pinned_gates && opt.pinned_gates->size() != static_cast<std::size_t>(T - 1)) {
    throw ContractError("infer: pinned gates need T-1 values");
  }

  InferResult res;
  IterationTrace& tr = res.trace;
  tr.sample_id = sample.ids[0];
  tr.flops_encoder = model.encoder_flops();

  auto [maps, corr] = net.encode(sample.image_pair);
  PolicyState state = pol.initial_state(1, h, w);
  const Tensor resource(Shape{1}, opt.resource);
  const bool use_policy = opt.mode != InferMode::kFixed;

  Tensor phi_hat = maps.phi;
  Tensor flow_hat(Shape{1, 2, h, w}, 0.0);
  std::optional<GateOutput> last_gate;
  bool stopped = false;

  for (int t = 1; t <= T; ++t) {
    StepRecord rec;
    rec.t = t;
    bool enter = true;
    if (t >= 2) {
      if (last_gate) {
        rec.has_gate = true;
        rec.logit_enter = last_gate->logits[0];
        rec.logit_skip = last_gate->logits[1];
        rec.gate = last_gate->gate[0];
        rec.improvement = last_gate->improvement[0];
      }
      if (opt.pinned_gates) enter = (*opt.pinned_gates)[static_cast<std::size_t>(t - 2)];
      else if (use_policy) enter = rec.has_gate && rec.logit_enter > rec.logit_skip;
      if (stopped) enter = false;
      ++tr.gated_steps;
    }
    rec.entered = enter;
    if (enter) {
      UpdateResult u = net.update(phi_hat, flow_hat, corr, maps);
      phi_hat = u.phi;
      flow_hat = u.flow;
      rec.flops += update_cost;
      ++tr.updates_entered;
      if (t >= 2) ++tr.gates_entered;
    } else if (opt.mode == InferMode::kExit) {
      stopped = true;
    }
    last_gate.reset();
    if (use_policy && !stopped && t <= T - 1) {
      PolicyStep ps = pol.forward(phi_hat, state, iteration_embedding(t, T, pol.config().literal_embedding),
                                  resource, {}, opt.policy_variant);
      state = ps.state;
      last_gate = ps.out;
      rec.flops += policy_cost;
    }
    tr.steps.push_back(rec);
    if (opt.keep_step_flows) res.step_flows.push_back(flow_hat);
  }
  tr.flops_total = tr.flops_encoder;
  for (const auto& s : tr.steps) tr.flops_total += s.flops;
  res.flow = flow_hat;
  return res;
}

}  // namespace dynflow
