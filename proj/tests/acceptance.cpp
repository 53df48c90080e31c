// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails. Artifacts are left under
// scratch/acceptance in the working directory.

#include <sys/resource.h>

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "cli_runner.hpp"
#include "dynflow/dynflow.hpp"
#include "loss_oracles.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace dynflow;
using namespace dynflow::testing;

namespace {

// Pinned tolerances and budgets.
constexpr double kPrimitiveGradTol = 1e-4;
constexpr double kLossGradTol = 1e-3;
constexpr double kGradientSeconds = 60;
constexpr double kSkipSeconds = 10;
constexpr double kHardGateTol = 1e-12;
constexpr int kGumbelDraws = 10000;
constexpr double kGumbelLo = 0.48, kGumbelHi = 0.52;
constexpr double kSigmoidTol = 1e-12;
constexpr double kTrainCpuSeconds = 600;
constexpr double kActivitySlack = 0.05;
constexpr double kEpeSlack = 1.15;
constexpr double kPolicyFlopShare = 0.05;
constexpr double kLossOracleTol = 1e-10;
constexpr double kHistogramSumTol = 1e-9;

// Training recipe of the CLI pipeline.
const std::vector<std::string> kTrainRecipe = {"--backbone-steps", "400", "--policy-steps", "800"};
const std::vector<double> kBudgets = {0.3, 0.6, 0.9};
constexpr int kTTest = 12;

struct Outcome {
  bool pass = true;
  std::string detail;
};

class Checker {
 public:
  void require(bool ok, const std::string& what) {
    if (!ok) {
      out_.pass = false;
      if (!out_.detail.empty()) out_.detail += "; ";
      out_.detail += what;
    }
  }
  void note(const std::string& what) { notes_ += (notes_.empty() ? "" : ", ") + what; }
  Outcome done() {
    if (out_.pass) out_.detail = notes_;
    return out_;
  }

 private:
  Outcome out_;
  std::string notes_;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double children_cpu_seconds() {
  rusage u{};
  getrusage(RUSAGE_CHILDREN, &u);
  return static_cast<double>(u.ru_utime.tv_sec + u.ru_stime.tv_sec) +
         1e-6 * static_cast<double>(u.ru_utime.tv_usec + u.ru_stime.tv_usec);
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  return true;
}

double max_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ---------------------------------------------------------------------------
// 1. gradients

struct PrimitiveCase {
  std::string name;
  std::function<Tensor()> loss;
  std::vector<Tensor> inputs;
};

std::vector<PrimitiveCase> primitive_cases() {
  std::vector<PrimitiveCase> cases;
  auto add_case = [&](std::string name, std::vector<Tensor> in, std::function<Tensor()> f) {
    cases.push_back({std::move(name), std::move(f), std::move(in)});
  };
  for (auto [k, stride, pad] : {std::tuple{3u, 1u, 1u}, {3u, 2u, 1u}, {1u, 1u, 0u}}) {
    Tensor x = random_tensor({2, 2, 5, 6}, 4), w = random_tensor({3, 2, k, k}, 5), b = random_tensor({3}, 6);
    add_case("conv2d k" + std::to_string(k) + "s" + std::to_string(stride), {x, w, b},
             [=] { return weighted_sum(conv2d(x, w, b, stride, pad)); });
  }
  Tensor x = random_tensor({2, 3, 2, 2}, 7, -2, 2);
  for (double& v : x.mutable_data())
    if (std::abs(v) < 0.05) v = 0.3;
  add_case("relu", {x}, [=] { return weighted_sum(relu(x)); });
  add_case("sigmoid", {x}, [=] { return weighted_sum(sigmoid(x)); });
  add_case("tanh", {x}, [=] { return weighted_sum(dynflow::tanh(x)); });
  Tensor p = random_tensor({2, 3, 4, 5}, 8);
  add_case("global_avg_pool", {p}, [=] { return weighted_sum(global_avg_pool(p)); });
  Tensor c1 = random_tensor({2, 2, 2, 3}, 9), c2 = random_tensor({2, 3, 2, 3}, 10);
  add_case("concat_channels", {c1, c2}, [=] { return weighted_sum(concat_channels({c1, c2})); });
  add_case("slice_channels", {c2}, [=] { return weighted_sum(slice_channels(c2, 1, 2)); });
  add_case("reshape", {c2}, [=] { return weighted_sum(reshape(c2, Shape{2, 18})); });
  Tensor a = random_tensor({2, 3}, 11), b = random_tensor({2, 3}, 12);
  add_case("add", {a, b}, [=] { return weighted_sum(add(a, b)); });
  add_case("sub", {a, b}, [=] { return weighted_sum(sub(a, b)); });
  add_case("mul", {a, b}, [=] { return weighted_sum(mul(a, b)); });
  add_case("scale", {a}, [=] { return weighted_sum(scale(a, -2.5)); });
  add_case("add_scalar", {a}, [=] { return weighted_sum(add_scalar(a, 0.7)); });
  add_case("one_minus", {a}, [=] { return weighted_sum(one_minus(a)); });
  add_case("abs", {a}, [=] { return weighted_sum(dynflow::abs(a)); });
  add_case("sum", {a}, [=] { return sum(a); });
  add_case("mean", {a}, [=] { return mean(a); });
  Tensor u = random_tensor({3, 2, 2, 2}, 13), v = random_tensor({3, 2, 2, 2}, 14);
  Tensor s = random_tensor({3}, 15, 0.1, 0.9);
  add_case("mul_per_sample", {u, s}, [=] { return weighted_sum(mul_per_sample(u, s)); });
  add_case("blend", {u, v, s}, [=] { return weighted_sum(blend(u, v, s)); });
  Tensor f1 = random_tensor({2, 3, 3, 4}, 16), f2 = random_tensor({2, 3, 3, 4}, 17);
  add_case("corr_volume", {f1, f2}, [=] { return weighted_sum(corr_volume(f1, f2)); });
  Tensor corr = random_tensor({2, 3, 4, 3, 4}, 21), flow = random_tensor({2, 2, 3, 4}, 22, -1.7, 1.7);
  for (double& q : flow.mutable_data()) {
    const double frac = q - std::floor(q);
    if (frac < 0.05 || frac > 0.95) q += 0.3;
  }
  add_case("corr_lookup", {corr, flow}, [=] { return weighted_sum(corr_lookup(corr, flow, 2)); });
  Tensor pred = random_tensor({2, 2, 3, 3}, 23), target = random_tensor({2, 2, 3, 3}, 24);
  target.set_requires_grad(false);
  Tensor valid({2, 1, 3, 3}, 1.0);
  valid.mutable_data()[4] = 0.0;
  add_case("masked_l1_mean", {pred}, [=] { return weighted_sum(masked_l1_mean(pred, target, valid)); });
  Tensor logits = random_tensor({3, 2, 1, 1}, 25, -2, 2);
  const std::vector<double> noise{0.3, -0.2, 1.1, 0.4, -0.5, 0.9};
  add_case("gumbel_softmax_gate", {logits}, [=] { return weighted_sum(gumbel_softmax_gate(logits, noise, 1.0)); });
  add_case("softmax_gate", {logits}, [=] { return weighted_sum(gumbel_softmax_gate(logits, {}, 0.5)); });
  return cases;
}

Outcome criterion_gradients() {
  Checker c;
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0;
  std::string worst_name;
  for (auto& pc : primitive_cases()) {
    const GradCheck g = check_gradients(pc.loss, pc.inputs);
    if (g.rel_error > worst) {
      worst = g.rel_error;
      worst_name = pc.name;
    }
    c.require(g.rel_error < kPrimitiveGradTol, pc.name + " rel " + fmt(g.rel_error));
  }
  c.note("worst primitive " + worst_name + " rel " + fmt(worst, 2));

  ModelConfig mc = small_model_config(8, 16);
  Model model(mc, 3);
  Dataset data = small_dataset(4, 5, 8, 16);
  Batch batch = make_batch(data, {0, 1}, mc.flownet.downscale);
  RolloutOptions opt;
  opt.iterations = 3;
  opt.noise = true;
  opt.noise_seed = 17;
  Tensor res(Shape{2}, std::vector<double>{0.3, 0.7});
  FrozenTargetLoss numeric(model, batch, res, opt, Variant::kFull);
  auto analytic = [&] {
    return rollout_loss(rollout(model, batch, res, opt), batch, Variant::kFull, TrainPhase::kJoint).objective;
  };
  const GradCheck g = check_param_gradients(model.params(), analytic, numeric, 6, 4);
  c.require(g.rel_error < kLossGradTol, "overall loss rel " + fmt(g.rel_error));
  c.note("overall loss rel " + fmt(g.rel_error, 2) + " over " + std::to_string(g.checked) + " entries");
  const double secs = seconds_since(t0);
  c.require(secs < kGradientSeconds, "took " + fmt(secs) + " s");
  c.note(fmt(secs, 3) + " s");
  return c.done();
}

// ---------------------------------------------------------------------------
// 2. skip identity and hard gates

Outcome criterion_skip_identity() {
  Checker c;
  const auto t0 = std::chrono::steady_clock::now();
  ModelConfig mc = small_model_config(8, 16);
  Model model(mc, 3);
  Dataset data = small_dataset(4, 5, 8, 16);
  double worst = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Batch one = make_batch(data, {i}, mc.flownet.downscale);
    const std::vector<bool> pins{true, false, false, true, false};
    InferOptions io;
    io.t_test = 6;
    io.pinned_gates = pins;
    io.resource = 0.7;
    io.keep_step_flows = true;
    InferResult inf = infer(model, one, io);

    RolloutOptions ro_opt;
    ro_opt.iterations = 6;
    ro_opt.noise = false;
    ro_opt.gate_override = std::vector<double>();
    for (bool p : pins) ro_opt.gate_override->push_back(p ? 1.0 : 0.0);
    TrainingRollout ro = rollout(model, one, Tensor({1}, 0.7), ro_opt);
    worst = std::max(worst, max_diff(inf.flow, ro.flow_hat.back()));
    for (std::size_t t = 0; t < 6; ++t)
      worst = std::max(worst, max_diff(inf.step_flows[t], ro.flow_hat[t]));

    // skipped steps repeat the flow bit for bit
    c.require(bit_equal(inf.step_flows[2], inf.step_flows[1]) && bit_equal(inf.step_flows[3], inf.step_flows[1]) &&
                  bit_equal(inf.step_flows[5], inf.step_flows[4]),
              "skipped flow changed, sample " + std::to_string(i));
    // and the hidden state: the third update after two skips matches three
    // back-to-back updates exactly
    InferOptions three;
    three.t_test = 3;
    three.pinned_gates = std::vector<bool>{true, true};
    three.keep_step_flows = true;
    InferResult short_run = infer(model, one, three);
    c.require(bit_equal(inf.step_flows[4], short_run.step_flows[2]),
              "skipped hidden state changed, sample " + std::to_string(i));
  }
  c.require(worst <= kHardGateTol, "inference vs training aggregation " + fmt(worst));
  c.note("max |infer - train| " + fmt(worst, 2));
  const double secs = seconds_since(t0);
  c.require(secs < kSkipSeconds, "took " + fmt(secs) + " s");
  c.note(fmt(secs, 3) + " s");
  return c.done();
}

// ---------------------------------------------------------------------------
// 3. gumbel statistics

Outcome criterion_gumbel() {
  Checker c;
  Rng rng(2024);
  Tensor zero({static_cast<std::size_t>(kGumbelDraws), 2, 1, 1}, 0.0);
  const auto noise = draw_gumbel_noise(rng, kGumbelDraws);
  Tensor p = gumbel_gate(zero, 1.0, noise);
  double m = 0;
  for (double v : p.data()) m += v;
  m /= kGumbelDraws;
  c.require(m >= kGumbelLo && m <= kGumbelHi, "mean gate " + fmt(m));
  c.note("mean gate " + fmt(m));

  Tensor logits = random_tensor({200, 2, 1, 1}, 31, -8, 8);
  double worst = 0;
  for (double tau : {0.5, 1.0, 2.0}) {
    Tensor q = gumbel_gate(logits, tau);
    for (std::size_t n = 0; n < 200; ++n) {
      const double ref = 1.0 / (1.0 + std::exp(-(logits[2 * n] - logits[2 * n + 1]) / tau));
      worst = std::max(worst, std::abs(q[n] - ref));
    }
  }
  c.require(worst <= kSigmoidTol, "noise-off gate vs sigmoid " + fmt(worst));
  c.note("noise-off max err " + fmt(worst, 2));
  return c.done();
}

// ---------------------------------------------------------------------------
// 6. flops ledger

Outcome criterion_flops() {
  Checker c;
  ModelConfig mc;
  Model model(mc, 1);
  const FlopOracle o = flop_oracle(mc);
  c.require(model.encoder_flops() == o.encoder, "encoder walk differs");
  c.require(model.update_flops() == o.update, "update walk differs");
  c.require(model.policy_flops() == o.policy, "policy walk differs");
  SynthConfig sc;
  Dataset data = generate_dataset(4, 3, sc);
  for (std::size_t i = 0; i < data.size(); ++i) {
    Batch one = make_batch(data, {i}, mc.flownet.downscale);
    for (InferMode mode : {InferMode::kPolicy, InferMode::kExit, InferMode::kFixed}) {
      InferOptions io;
      io.mode = mode;
      io.t_test = kTTest;
      io.fixed_iterations = 5;
      io.resource = 0.5;
      FlopScope scope;
      InferResult r = infer(model, one, io);
      std::size_t policy_calls = 0;
      for (const auto& st : r.trace.steps) policy_calls += st.has_gate ? 1 : 0;
      const std::uint64_t expect =
          o.encoder + static_cast<std::uint64_t>(r.trace.updates_entered) * o.update + policy_calls * o.policy;
      c.require(r.trace.flops_total == expect, "trace total differs from oracle");
      c.require(scope.elapsed() == r.trace.flops_total, "charged flops differ from trace");
    }
  }
  const double share = static_cast<double>(o.policy) / static_cast<double>(o.update);
  c.require(share < kPolicyFlopShare, "policy share " + fmt(share));
  c.note("update " + std::to_string(o.update) + ", policy " + std::to_string(o.policy) + " (" +
         fmt(100 * share, 3) + "%)");
  return c.done();
}

// ---------------------------------------------------------------------------
// 7. losses

Outcome criterion_losses() {
  Checker c;
  c.require(kSequenceDecay == 0.8 && kLambdaResource == 50.0 && kLambdaIncremental == 1.0, "constants");
  double worst = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    LossFixture f(seed);
    std::vector<Tensor> hat(f.hat.begin(), f.hat.end() - 1), next(f.next.begin(), f.next.end() - 1);
    const double lf = flow_oracle(f.gt, f.hat, f.valid);
    const double lr = resource_oracle(f.gates, f.r, true);
    const double l1 = resource_oracle(f.gates, f.r, false);
    const double li = incremental_oracle(f.gt, hat, next, f.imp, f.valid);
    const Tensor tf = flow_loss(f.gt, f.hat, f.valid);
    const Tensor tr = resource_loss(f.gates, f.r, ResourceLossKind::kHinge);
    const Tensor ti = incremental_loss(f.gt, hat, next, f.imp, f.valid);
    worst = std::max(worst, std::abs(tf.item() - lf));
    worst = std::max(worst, std::abs(tr.item() - lr));
    worst = std::max(worst, std::abs(resource_loss(f.gates, f.r, ResourceLossKind::kL1).item() - l1));
    worst = std::max(worst, std::abs(ti.item() - li));
    worst = std::max(worst, std::abs(overall_loss(tf, tr, ti).overall - (lf + 50.0 * lr + 1.0 * li)));
    worst = std::max(worst, std::abs(overall_loss(tf, tr, ti, {50.0, 0.0}).overall - (lf + 50.0 * lr)));
  }
  c.require(worst <= kLossOracleTol, "max deviation " + fmt(worst));
  c.note("max deviation " + fmt(worst, 2));
  return c.done();
}

// ---------------------------------------------------------------------------
// CLI pipeline shared by 4, 5, 8 and 9.

struct Pipeline {
  fs::path dir;
  std::string train_data, eval_data, ckpt;
  bool ok = false;
  std::string error;
  double train_cpu = 0;
};

// Empty on success.
std::string run_error(const std::vector<std::string>& args) {
  const RunResult r = run_cli(args);
  return r.code == 0 ? "" : args.at(0) + " exited " + std::to_string(r.code);
}

bool run_ok(const std::vector<std::string>& args, Pipeline& p) {
  p.error = run_error(args);
  return p.error.empty();
}

Pipeline build_pipeline() {
  Pipeline p;
  p.dir = scratch_dir("acceptance");
  p.train_data = (p.dir / "train.bin").string();
  p.eval_data = (p.dir / "eval.bin").string();
  p.ckpt = (p.dir / "model.ckpt").string();
  if (!run_ok({"gen", "--n", "512", "--seed", "7", "--out", p.train_data}, p)) return p;
  if (!run_ok({"gen", "--n", "64", "--seed", "99", "--out", p.eval_data}, p)) return p;
  std::vector<std::string> train = {"train", "--data", p.train_data, "--ckpt", p.ckpt, "--seed", "1",
                                    "--log-every", "100"};
  train.insert(train.end(), kTrainRecipe.begin(), kTrainRecipe.end());
  const double cpu0 = children_cpu_seconds();
  if (!run_ok(train, p)) return p;
  p.train_cpu = children_cpu_seconds() - cpu0;
  p.ok = true;
  return p;
}

struct EvalSummary {
  double epe = 0, updates = 0, activity = 0;
  std::size_t samples = 0;
  std::vector<std::uint64_t> flops;
};

// Reads report.csv ("all" row) and trace.csv from an eval run.
EvalSummary summarize_eval(const fs::path& out, int T) {
  EvalSummary s;
  Csv rep = read_csv(out / "report.csv");
  s.epe = rep.num(0, "epe_mean");
  s.updates = rep.num(0, "updates_mean");
  Csv tr = read_csv(out / "trace.csv");
  std::size_t gated_entered = 0;
  for (std::size_t i = 0; i < tr.rows.size(); ++i) {
    if (tr.str(i, "t") == "total") {
      ++s.samples;
      s.flops.push_back(std::stoull(tr.str(i, "flops_step")));
    } else if (tr.str(i, "t") != "1" && tr.str(i, "entered") == "1") {
      ++gated_entered;
    }
  }
  s.activity = static_cast<double>(gated_entered) / static_cast<double>(s.samples * (T - 1));
  return s;
}

std::map<std::string, EvalSummary> g_evals;

Outcome criterion_budget(const Pipeline& p) {
  Checker c;
  if (!p.ok) {
    c.require(false, p.error);
    return c.done();
  }
  c.require(p.train_cpu <= kTrainCpuSeconds, "training took " + fmt(p.train_cpu) + " s CPU");
  c.note("training " + fmt(p.train_cpu, 4) + " s CPU");
  double prev_updates = -1;
  for (double r : kBudgets) {
    const std::string name = "r" + fmt(r);
    const fs::path out = p.dir / ("eval_" + name);
    if (const std::string err = run_error({"eval", "--data", p.eval_data, "--ckpt", p.ckpt, "--mode", "policy", "--r",
                                           fmt(r, 17), "--T", std::to_string(kTTest), "--out-dir", out.string()});
        !err.empty()) {
      c.require(false, err);
      return c.done();
    }
    const EvalSummary s = summarize_eval(out, kTTest);
    g_evals[name] = s;
    c.require(s.activity <= r + kActivitySlack, "activity " + fmt(s.activity) + " at r=" + fmt(r));
    c.require(s.updates >= prev_updates, "updates fell to " + fmt(s.updates) + " at r=" + fmt(r));
    prev_updates = s.updates;
    c.note("r=" + fmt(r) + " activity " + fmt(s.activity, 3) + " updates " + fmt(s.updates, 3));
  }
  // ledger check on the CLI traces: every total is encoder + k updates + T-1 policy calls
  ModelConfig mc;
  const FlopOracle o = flop_oracle(mc);
  Csv tr = read_csv(p.dir / "eval_r0.6" / "trace.csv");
  for (std::size_t i = 0; i < tr.rows.size(); ++i) {
    if (tr.str(i, "t") != "total") continue;
    const std::uint64_t k = std::stoull(tr.str(i, "entered"));
    c.require(std::stoull(tr.str(i, "flops_step")) == o.encoder + k * o.update + (kTTest - 1) * o.policy,
              "trace total off the ledger");
  }
  return c.done();
}

Outcome criterion_tradeoff(const Pipeline& p) {
  Checker c;
  if (!p.ok || g_evals.size() != kBudgets.size()) {
    c.require(false, p.ok ? "budget evaluations missing" : p.error);
    return c.done();
  }
  const fs::path out = p.dir / "eval_fixed";
  if (const std::string err = run_error({"eval", "--data", p.eval_data, "--ckpt", p.ckpt, "--mode", "fixed", "--T", std::to_string(kTTest),
               "--out-dir", out.string()}); !err.empty()) {
    c.require(false, err);
    return c.done();
  }
  const double fixed = summarize_eval(out, kTTest).epe;
  const double lo = g_evals.at("r0.3").epe, hi = g_evals.at("r0.9").epe;
  c.require(hi <= lo, "EPE(0.9)=" + fmt(hi) + " above EPE(0.3)=" + fmt(lo));
  c.require(hi <= kEpeSlack * fixed, "EPE(0.9)=" + fmt(hi) + " vs fixed " + fmt(fixed));
  c.note("EPE r=0.3 " + fmt(lo) + ", r=0.9 " + fmt(hi) + ", fixed " + fmt(fixed) + " (ratio " + fmt(hi / fixed) +
         ")");
  return c.done();
}

Outcome criterion_bottleneck(const Pipeline& p) {
  Checker c;
  if (!p.ok) {
    c.require(false, p.error);
    return c.done();
  }
  const fs::path out = p.dir / "analyze";
  if (const std::string err = run_error({"analyze", "--data", p.eval_data, "--ckpt", p.ckpt, "--tol", "0.01", "--T", std::to_string(kTTest),
               "--out-dir", out.string()}); !err.empty()) {
    c.require(false, err);
    return c.done();
  }
  Csv h = read_csv(out / "bottleneck.csv");
  double total = 0, early = 0;
  for (std::size_t i = 0; i < h.rows.size(); ++i) {
    total += h.num(i, "percent");
    if (std::stoi(h.str(i, "t")) < kTTest) early += h.num(i, "percent");
  }
  c.require(h.rows.size() == static_cast<std::size_t>(kTTest), "histogram has " + std::to_string(h.rows.size()) +
                                                                    " rows");
  c.require(std::abs(total - 100.0) <= kHistogramSumTol, "histogram sums to " + fmt(total, 17));
  c.require(early > 0, "no mass before the last step");
  c.note(fmt(early, 4) + "% of samples settle before t=" + std::to_string(kTTest));
  return c.done();
}

Outcome criterion_ablation(const Pipeline& p) {
  Checker c;
  if (!p.ok) {
    c.require(false, p.error);
    return c.done();
  }
  const fs::path out = p.dir / "ablate";
  if (const std::string err = run_error({"ablate", "--data", p.train_data, "--eval-data", p.eval_data, "--ckpt", p.ckpt, "--policy-steps",
               "100", "--r", "0.3,0.6,0.9", "--out-dir", out.string()}); !err.empty()) {
    c.require(false, err);
    return c.done();
  }
  Csv t = read_csv(out / "ablation.csv");
  std::map<std::string, std::size_t> rows;
  for (std::size_t i = 0; i < t.rows.size(); ++i) ++rows[t.str(i, "variant")];
  for (const char* v : {"full", "L1", "B", "P", "exit"})
    c.require(rows[v] == kBudgets.size(), std::string("variant ") + v + " has " + std::to_string(rows[v]) + " rows");
  Csv tr = read_csv(out / "trace_exit.csv");
  std::size_t samples = 0, violations = 0;
  bool skipped = false;
  for (std::size_t i = 0; i < tr.rows.size(); ++i) {
    if (tr.str(i, "t") == "total") {
      ++samples;
      skipped = false;
      continue;
    }
    const bool entered = tr.str(i, "entered") == "1";
    if (skipped && entered) ++violations;
    if (!entered) skipped = true;
  }
  c.require(samples == 64 * kBudgets.size(), "exit trace has " + std::to_string(samples) + " samples");
  c.require(violations == 0, std::to_string(violations) + " exit traces re-enter after a skip");
  c.note(std::to_string(t.rows.size()) + " table rows, " + std::to_string(samples) + " exit traces checked");
  return c.done();
}

// ---------------------------------------------------------------------------
// 10. determinism: run every command twice with the same arguments and
// compare every file produced.

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return files;
}

Outcome criterion_determinism() {
  Checker c;
  const fs::path dir = fs::absolute("scratch") / "determinism";
  const std::string data = (dir / "data.bin").string(), ckpt = (dir / "model.ckpt").string();
  const std::vector<std::vector<std::string>> commands = {
      {"gen", "--n", "12", "--seed", "5", "--height", "16", "--width", "32", "--out", data},
      {"train", "--data", data, "--ckpt", ckpt, "--backbone-steps", "4", "--policy-steps", "4", "--batch", "3",
       "--t-train", "4", "--per-sample-r", "--log-every", "0"},
      {"eval", "--data", data, "--ckpt", ckpt, "--r", "0.5", "--out-dir", (dir / "eval").string()},
      {"eval", "--data", data, "--ckpt", ckpt, "--r", "0.5", "--mode", "exit", "--out-dir",
       (dir / "eval_exit").string()},
      {"sweep", "--data", data, "--ckpt", ckpt, "--r", "0.25,0.5,1", "--out-dir", (dir / "sweep").string()},
      {"analyze", "--data", data, "--ckpt", ckpt, "--out-dir", (dir / "analyze").string()},
      {"ablate", "--data", data, "--ckpt", ckpt, "--policy-steps", "3", "--batch", "3", "--t-train", "4", "--r",
       "0.5", "--out-dir", (dir / "ablate").string()},
  };
  std::map<std::string, std::string> first;
  std::vector<std::string> first_stdout;
  for (int round = 0; round < 2; ++round) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    for (std::size_t k = 0; k < commands.size(); ++k) {
      const RunResult r = run_cli(commands[k]);
      if (r.code != 0) {
        c.require(false, commands[k][0] + " exited " + std::to_string(r.code));
        return c.done();
      }
      if (round == 0) first_stdout.push_back(r.out);
      else c.require(r.out == first_stdout[k], commands[k][0] + " stdout differs");
    }
    if (round == 0) {
      first = snapshot(dir);
      continue;
    }
    const auto second = snapshot(dir);
    c.require(second.size() == first.size(), "file sets differ");
    for (const auto& [name, bytes] : first) {
      auto it = second.find(name);
      c.require(it != second.end() && it->second == bytes, name + " differs");
    }
    c.note(std::to_string(first.size()) + " files from " + std::to_string(commands.size()) +
           " commands byte-identical");
  }
  return c.done();
}

}  // namespace

int main() {
  std::cout.setf(std::ios::unitbuf);
  int failures = 0;
  auto report = [&](int id, const std::string& title, const Outcome& o) {
    std::cout << (o.pass ? "PASS " : "FAIL ") << id << " " << title;
    if (!o.detail.empty()) std::cout << ": " << o.detail;
    std::cout << "\n";
    failures += o.pass ? 0 : 1;
  };
  auto guarded = [](const std::function<Outcome()>& f) {
    try {
      return f();
    } catch (const std::exception& e) {
      return Outcome{false, std::string("exception: ") + e.what()};
    }
  };

  report(1, "gradient correctness", guarded(criterion_gradients));
  report(2, "skip identity and hard-gate equivalence", guarded(criterion_skip_identity));
  report(3, "gumbel statistics", guarded(criterion_gumbel));
  Pipeline p;
  try {
    p = build_pipeline();
  } catch (const std::exception& e) {
    p.error = e.what();
  }
  report(4, "budget constraint", guarded([&] { return criterion_budget(p); }));
  report(5, "quality-compute tradeoff", guarded([&] { return criterion_tradeoff(p); }));
  report(6, "flops ledger", guarded(criterion_flops));
  report(7, "losses", guarded(criterion_losses));
  report(8, "bottleneck analysis", guarded([&] { return criterion_bottleneck(p); }));
  report(9, "ablation harness", guarded([&] { return criterion_ablation(p); }));
  report(10, "determinism", guarded(criterion_determinism));
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << "\n";
  return failures == 0 ? 0 : 1;
}
