// dynflow: generate data, train, evaluate, sweep, analyze and ablate.
//
// Every command reads an optional flat key=value file (--config) and lets
// command-line flags override it. The resolved configuration is written next
// to the outputs. DYNFLOW_OUT, when set, replaces out_dir.
//
// Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <malloc.h>

#include <CLI11.hpp>

#include "dynflow/dynflow.hpp"

namespace fs = std::filesystem;
using namespace dynflow;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;

// The policy is small and starts from scratch on a trained backbone.
constexpr double kPolicyLr = 1e-2;

struct Key {
  std::string name;
  std::string flags;  // CLI11 option names
  std::string help;
  bool flag = false;
};

// Binds each key to a CLI option; explicitly given flags override the file.
class Command {
 public:
  Command(CLI::App& app, std::string name, std::string help, std::vector<Key> keys)
      : name_(std::move(name)), keys_(std::move(keys)) {
    sub_ = app.add_subcommand(name_, help);
    sub_->add_option("--config", config_path_, "flat key=value config file");
    for (const Key& k : keys_) {
      if (k.flag) {
        sub_->add_flag(k.flags, flags_[k.name], k.help);
      } else {
        sub_->add_option(k.flags, values_[k.name], k.help);
      }
    }
  }

  CLI::App* app() const { return sub_; }
  const std::string& name() const { return name_; }

  Config resolve() const {
    Config cfg = config_path_.empty() ? Config{} : Config::load(config_path_);
    for (const Key& k : keys_) {
      if (sub_->count(first_flag(k.flags)) == 0) continue;
      if (k.flag) cfg.set(k.name, flags_.at(k.name) ? "true" : "false");
      else cfg.set(k.name, values_.at(k.name));
    }
    if (const char* env = std::getenv("DYNFLOW_OUT"); env && *env) cfg.set("out_dir", env);
    return cfg;
  }

 private:
  static std::string first_flag(const std::string& flags) {
    return flags.substr(0, flags.find(','));
  }

  std::string name_;
  std::vector<Key> keys_;
  CLI::App* sub_ = nullptr;
  std::string config_path_;
  std::map<std::string, std::string> values_;
  std::map<std::string, bool> flags_;
};

fs::path out_path(const Config& cfg, const std::string& file) {
  const fs::path p(file);
  if (p.is_absolute()) return p;
  return fs::path(cfg.get("out_dir", ".")) / p;
}

void ensure_parent(const fs::path& p) {
  std::error_code ec;
  if (p.has_parent_path()) fs::create_directories(p.parent_path(), ec);
  if (ec) throw ConfigError("cannot create directory " + p.parent_path().string() + ": " + ec.message());
}

std::ofstream open_out(const fs::path& p, std::ios::openmode mode = std::ios::out) {
  ensure_parent(p);
  std::ofstream os(p, mode);
  if (!os) throw ConfigError("cannot write " + p.string());
  return os;
}

void write_resolved(const Config& cfg, const fs::path& p) {
  auto os = open_out(p);
  os << "# resolved configuration\n";
  cfg.write(os);
}

Dataset load_dataset(const Config& cfg, const std::string& key) {
  const std::string path = cfg.get(key, "");
  if (path.empty()) throw ConfigError("missing required key '" + key + "'");
  if (!fs::exists(path)) throw ConfigError("dataset not found: " + path);
  Dataset d = Dataset::load(path);
  if (d.size() == 0) throw ConfigError("dataset " + path + " is empty");
  return d;
}

ModelConfig model_config(const Dataset& d) {
  ModelConfig mc;
  mc.height = d.height;
  mc.width = d.width;
  mc.flownet.image_channels = d.channels;
  return mc;
}

void load_checkpoint(Model& model, const Config& cfg, const std::string& key) {
  const std::string path = cfg.get(key, "");
  if (path.empty()) throw ConfigError("missing required key '" + key + "'");
  if (!fs::exists(path)) throw ConfigError("checkpoint not found: " + path);
  try {
    model.params().load(path);
  } catch (const FormatError& e) {
    throw ConfigError(std::string("bad checkpoint: ") + e.what());
  }
}

std::size_t positive(const Config& cfg, const std::string& key, long long fallback) {
  const long long v = cfg.get_int(key, fallback);
  if (v <= 0) throw ConfigError("'" + key + "' must be positive, got " + std::to_string(v));
  return static_cast<std::size_t>(v);
}

TrainConfig train_config(const Config& cfg) {
  TrainConfig tc;
  tc.t_train = static_cast<int>(cfg.get_int("t_train", tc.t_train));
  tc.t_test = static_cast<int>(cfg.get_int("t_test", tc.t_test));
  tc.r_min = cfg.get_double("r_min", tc.r_min);
  tc.r_max = cfg.get_double("r_max", tc.r_max);
  tc.per_sample_r = cfg.get_bool("per_sample_r", tc.per_sample_r);
  tc.batch_size = positive(cfg, "batch", static_cast<long long>(tc.batch_size));
  tc.seed = static_cast<std::uint64_t>(cfg.get_int("seed", 1));
  tc.variant = parse_variant(cfg.get("variant", "full"));
  tc.optim.lr = cfg.get_double("lr", tc.optim.lr);
  tc.optim.clip_norm = cfg.get_double("clip", tc.optim.clip_norm);
  if (!(tc.optim.lr > 0)) throw ConfigError("lr must be positive");
  tc.validate();
  return tc;
}

InferOptions infer_options(const Config& cfg) {
  InferOptions opt;
  const std::string mode = cfg.get("mode", "policy");
  if (mode == "policy") opt.mode = InferMode::kPolicy;
  else if (mode == "exit") opt.mode = InferMode::kExit;
  else if (mode == "fixed") opt.mode = InferMode::kFixed;
  else throw ConfigError("unknown mode '" + mode + "' (expected policy, exit or fixed)");
  opt.t_test = static_cast<int>(positive(cfg, "t_test", opt.t_test));
  opt.fixed_iterations = opt.t_test;
  opt.resource = cfg.get_double("r", 1.0);
  opt.policy_variant = policy_variant(parse_variant(cfg.get("variant", "full")));
  if (!(opt.resource > 0 && opt.resource <= 1)) throw ConfigError("r must lie in (0, 1]");
  return opt;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

// ---------------------------------------------------------------------------

int cmd_gen(Config cfg) {
  const long long n = cfg.get_int("n", 256);
  if (n <= 0) throw ConfigError("gen: n must be positive, got " + std::to_string(n));
  SynthConfig sc;
  sc.height = positive(cfg, "height", static_cast<long long>(sc.height));
  sc.width = positive(cfg, "width", static_cast<long long>(sc.width));
  sc.hard_fraction = cfg.get_double("hard_fraction", sc.hard_fraction);
  const std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_int("seed", 1));
  cfg.set("n", std::to_string(n));
  cfg.set("seed", std::to_string(seed));
  cfg.set("height", std::to_string(sc.height));
  cfg.set("width", std::to_string(sc.width));

  Dataset d = generate_dataset(static_cast<std::size_t>(n), seed, sc);
  const std::string bytes = d.to_bytes();
  const fs::path out = out_path(cfg, cfg.get("out", "dataset.bin"));
  auto os = open_out(out, std::ios::binary);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw ConfigError("failed writing " + out.string());
  write_resolved(cfg, out.string() + ".cfg");
  std::cout << "samples " << n << "\nchecksum " << hex64(binio::fnv1a64(bytes)) << "\n";
  return kExitOk;
}

struct PhasePlan {
  TrainPhase phase;
  int steps;
};

int cmd_train(Config cfg) {
  Dataset data = load_dataset(cfg, "data");
  TrainConfig base = train_config(cfg);
  std::string phase = cfg.get("phase", "two-phase");
  if (cfg.get_bool("freeze_backbone", false)) phase = "policy";
  cfg.set("phase", phase);

  std::vector<PhasePlan> plan;
  if (phase == "two-phase") {
    plan.push_back({TrainPhase::kBackbone, static_cast<int>(cfg.get_int("backbone_steps", 400))});
    plan.push_back({TrainPhase::kPolicy, static_cast<int>(cfg.get_int("policy_steps", 800))});
  } else {
    plan.push_back({parse_phase(phase), static_cast<int>(cfg.get_int("steps", 200))});
  }
  for (const auto& p : plan)
    if (p.steps < 0) throw ConfigError("step counts must be non-negative");

  Model model(model_config(data), base.seed);
  if (cfg.has("init")) load_checkpoint(model, cfg, "init");

  const fs::path ckpt = out_path(cfg, cfg.get("ckpt", "model.ckpt"));
  const fs::path log_path = ckpt.string() + ".log.csv";
  write_resolved(cfg, ckpt.string() + ".cfg");
  auto log = open_out(log_path);
  write_schema_header(log, "train-log");
  log << "step,phase,r,flow,res,incre,overall,gate_mean\n";
  const long long every = cfg.get_int("log_every", 50);

  int global = 0;
  try {
    for (const auto& p : plan) {
      TrainConfig tc = base;
      tc.phase = p.phase;
      tc.steps = p.steps;
      if (p.phase == TrainPhase::kPolicy) tc.optim.lr = cfg.get_double("policy_lr", kPolicyLr);
      train(model, data, tc, [&](const StepLog& s) {
        ++global;
        log << global << ',' << phase_name(p.phase) << ',' << fmt_double(s.r) << ','
            << fmt_double(s.loss.flow) << ',' << fmt_double(s.loss.resource) << ','
            << fmt_double(s.loss.incremental) << ',' << fmt_double(s.loss.overall) << ','
            << fmt_double(s.gate_mean) << "\n";
        if (every > 0 && (s.step % every == 0 || s.step == tc.steps)) {
          std::cout << phase_name(p.phase) << " step " << s.step << "/" << tc.steps
                    << " overall " << s.loss.overall << " flow " << s.loss.flow << "\n";
        }
      });
    }
  } catch (const NumericalError&) {
    log.flush();
    model.params().save(ckpt.string());
    throw;
  }
  model.params().save(ckpt.string());
  std::cout << "checkpoint " << ckpt.string() << "\n";
  return kExitOk;
}

int cmd_eval(Config cfg) {
  Dataset data = load_dataset(cfg, "data");
  Model model(model_config(data), 0);
  load_checkpoint(model, cfg, "ckpt");
  const InferOptions opt = infer_options(cfg);
  const fs::path dir = out_path(cfg, "");
  write_resolved(cfg, dir / "eval.cfg");
  EvalReport rep = evaluate(model, data, opt);
  auto report = open_out(dir / "report.csv");
  write_report_csv(report, rep.rows);
  auto trace = open_out(dir / "trace.csv");
  write_trace_csv(trace, rep.samples);
  write_report_csv(std::cout, rep.rows);
  return kExitOk;
}

int cmd_sweep(Config cfg) {
  Dataset data = load_dataset(cfg, "data");
  Model model(model_config(data), 0);
  load_checkpoint(model, cfg, "ckpt");
  std::vector<double> rs = cfg.get_doubles("r");
  if (rs.empty()) throw ConfigError("sweep: empty r list");
  std::sort(rs.begin(), rs.end());
  InferOptions opt = infer_options(Config{});
  opt.policy_variant = policy_variant(parse_variant(cfg.get("variant", "full")));
  opt.t_test = static_cast<int>(positive(cfg, "t_test", opt.t_test));
  const fs::path dir = out_path(cfg, "");
  write_resolved(cfg, dir / "sweep.cfg");
  EvalReport rep = sweep_report(model, data, rs, opt);
  std::vector<ReportRow> rows;
  for (const auto& r : rep.rows)
    if (r.group == "all") rows.push_back(r);
  auto os = open_out(dir / "sweep.csv");
  write_report_csv(os, rows);
  write_report_csv(std::cout, rows);
  return kExitOk;
}

int cmd_analyze(Config cfg) {
  Dataset data = load_dataset(cfg, "data");
  Model model(model_config(data), 0);
  load_checkpoint(model, cfg, "ckpt");
  const int T = static_cast<int>(positive(cfg, "t_test", 12));
  const double tol = cfg.get_double("tol", 0.01);
  if (!(tol > 0)) throw ConfigError("tol must be positive");
  const fs::path dir = out_path(cfg, "");
  write_resolved(cfg, dir / "analyze.cfg");
  const auto seqs = epe_sequences(model, data, T);
  const auto hist = bottleneck_histogram(seqs, tol);
  auto os = open_out(dir / "bottleneck.csv");
  write_histogram_csv(os, hist, tol, seqs.size());
  auto epe_os = open_out(dir / "epe_steps.csv");
  write_schema_header(epe_os, "epe-steps");
  epe_os << "sample_id,t,epe\n";
  for (std::size_t i = 0; i < seqs.size(); ++i)
    for (std::size_t t = 0; t < seqs[i].size(); ++t)
      epe_os << i << ',' << t + 1 << ',' << fmt_double(seqs[i][t]) << "\n";
  write_histogram_csv(std::cout, hist, tol, seqs.size());
  return kExitOk;
}

// Trains the policy of each ablation variant on top of one backbone
// checkpoint and evaluates them side by side. exit reuses the full policy.
int cmd_ablate(Config cfg) {
  Dataset train_data = load_dataset(cfg, "data");
  Dataset eval_data = cfg.has("eval_data") ? load_dataset(cfg, "eval_data") : train_data;
  std::vector<double> rs = cfg.get_doubles("r");
  if (rs.empty()) rs = {0.3, 0.6, 0.9};
  std::sort(rs.begin(), rs.end());
  for (double r : rs)
    if (!(r > 0 && r <= 1)) throw ConfigError("ablate: r values must lie in (0, 1]");
  TrainConfig base = train_config(cfg);
  base.phase = TrainPhase::kPolicy;
  base.steps = static_cast<int>(cfg.get_int("policy_steps", 200));
  base.optim.lr = cfg.get_double("policy_lr", kPolicyLr);
  const int T = static_cast<int>(positive(cfg, "t_test", 12));

  const fs::path dir = out_path(cfg, "");
  write_resolved(cfg, dir / "ablate.cfg");

  Model backbone(model_config(train_data), base.seed);
  load_checkpoint(backbone, cfg, "ckpt");

  struct Entry {
    std::string name;
    Variant variant;
    InferMode mode;
  };
  const std::vector<Entry> matrix = {{"full", Variant::kFull, InferMode::kPolicy},
                                     {"L1", Variant::kL1, InferMode::kPolicy},
                                     {"B", Variant::kB, InferMode::kPolicy},
                                     {"P", Variant::kP, InferMode::kPolicy},
                                     {"exit", Variant::kFull, InferMode::kExit}};

  auto table = open_out(dir / "ablation.csv");
  write_schema_header(table, "ablation");
  table << "variant,r,n,epe_mean,f1_all,updates_mean,flops_mean\n";
  std::map<Variant, ParamStore> trained;
  for (const Entry& e : matrix) {
    if (!trained.count(e.variant)) {
      // fresh policy on the checkpoint's backbone
      Model m(model_config(train_data), base.seed);
      for (auto& [name, t] : m.params().entries()) {
        if (!FlowNet::is_backbone_param(name)) continue;
        const auto src = backbone.params().get(name).data();
        std::copy(src.begin(), src.end(), t.mutable_data().begin());
      }
      TrainConfig tc = base;
      tc.variant = e.variant;
      train(m, train_data, tc);
      trained.emplace(e.variant, m.params().clone());
      std::cout << "trained policy " << variant_name(e.variant) << "\n";
    }
    Model m(model_config(train_data), base.seed);
    m.params() = trained.at(e.variant).clone();
    InferOptions opt;
    opt.mode = e.mode;
    opt.t_test = T;
    opt.policy_variant = policy_variant(e.variant);
    EvalReport rep = sweep_report(m, eval_data, rs, opt);
    std::vector<SampleResult> samples = rep.samples;
    auto trace = open_out(dir / ("trace_" + e.name + ".csv"));
    write_trace_csv(trace, samples);
    for (const auto& row : rep.rows) {
      if (row.group != "all") continue;
      table << e.name << ',' << fmt_double(row.r) << ',' << row.n << ',' << fmt_double(row.epe_mean) << ','
            << fmt_double(row.f1_all) << ',' << fmt_double(row.updates_mean) << ','
            << fmt_double(row.flops_mean) << "\n";
      std::cout << e.name << " r=" << row.r << " epe " << row.epe_mean << " updates " << row.updates_mean
                << "\n";
    }
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  // Tensors are allocated and freed every op; keep large blocks on the heap
  // instead of round-tripping them through mmap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  CLI::App app{"dynflow: dynamic-iteration optical flow on synthetic data"};
  app.require_subcommand(1);

  const Key out_dir{"out_dir", "--out-dir", "directory for outputs"};
  const Key seed{"seed", "--seed", "top-level seed"};
  const Key data{"data", "--data", "dataset file"};
  const Key ckpt{"ckpt", "--ckpt", "checkpoint file"};
  const Key t_test{"t_test", "--T,--t-test", "inference iterations"};

  std::vector<Command> cmds;
  cmds.reserve(6);
  cmds.emplace_back(app, "gen", "generate a synthetic dataset",
                    std::vector<Key>{out_dir, seed,
                                     {"n", "--n", "number of samples"},
                                     {"out", "--out", "dataset output file"},
                                     {"height", "--height", "image height"},
                                     {"width", "--width", "image width"},
                                     {"hard_fraction", "--hard-fraction", "fraction of hard samples"}});
  cmds.emplace_back(app, "train", "train backbone and/or policy",
                    std::vector<Key>{out_dir, seed, data, ckpt,
                                     {"init", "--init", "checkpoint to start from"},
                                     {"phase", "--phase", "two-phase, backbone, policy or joint"},
                                     {"freeze_backbone", "--freeze-backbone", "train the policy only", true},
                                     {"steps", "--steps", "steps for a single phase"},
                                     {"backbone_steps", "--backbone-steps", "two-phase: backbone steps"},
                                     {"policy_steps", "--policy-steps", "two-phase: policy steps"},
                                     {"variant", "--variant", "full, L1, B, P or exit"},
                                     {"batch", "--batch", "batch size"},
                                     {"lr", "--lr", "learning rate"},
                                     {"policy_lr", "--policy-lr", "learning rate of the policy phase"},
                                     {"clip", "--clip", "gradient norm clip (0 = off)"},
                                     {"t_train", "--t-train", "training iterations"},
                                     {"r_min", "--r-min", "lower end of sampled r"},
                                     {"r_max", "--r-max", "upper end of sampled r"},
                                     {"per_sample_r", "--per-sample-r", "one r per sample", true},
                                     {"log_every", "--log-every", "progress print interval"}});
  cmds.emplace_back(app, "eval", "evaluate a checkpoint",
                    std::vector<Key>{out_dir, data, ckpt, t_test,
                                     {"r", "--r", "resource preference"},
                                     {"mode", "--mode", "policy, exit or fixed"},
                                     {"variant", "--variant", "variant the policy was trained as"}});
  cmds.emplace_back(app, "sweep", "evaluate over a list of r values",
                    std::vector<Key>{out_dir, data, ckpt, t_test,
                                     {"r", "--r", "comma-separated r values"},
                                     {"variant", "--variant", "variant the policy was trained as"}});
  cmds.emplace_back(app, "analyze", "bottleneck histogram of fixed inference",
                    std::vector<Key>{out_dir, data, ckpt, t_test,
                                     {"tol", "--tol", "EPE tolerance to the best step"}});
  cmds.emplace_back(app, "ablate", "train and compare the ablation variants",
                    std::vector<Key>{out_dir, seed, data, ckpt, t_test,
                                     {"eval_data", "--eval-data", "evaluation dataset"},
                                     {"r", "--r", "comma-separated r values"},
                                     {"policy_steps", "--policy-steps", "policy steps per variant"},
                                     {"policy_lr", "--policy-lr", "policy learning rate"},
                                     {"batch", "--batch", "batch size"},
                                     {"t_train", "--t-train", "training iterations"}});

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    for (const Command& c : cmds) {
      if (!c.app()->parsed()) continue;
      Config cfg = c.resolve();
      if (c.name() == "gen") return cmd_gen(cfg);
      if (c.name() == "train") return cmd_train(cfg);
      if (c.name() == "eval") return cmd_eval(cfg);
      if (c.name() == "sweep") return cmd_sweep(cfg);
      if (c.name() == "analyze") return cmd_analyze(cfg);
      if (c.name() == "ablate") return cmd_ablate(cfg);
    }
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
