#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "dynflow/engine.hpp"
#include "dynflow/errors.hpp"
#include "dynflow/tensor.hpp"

namespace dynflow {

inline constexpr int kCsvSchemaVersion = 1;

namespace detail {

struct FlowView {
  std::span<const double> f, gt, valid;
  std::size_t pixels = 0;
};

inline FlowView flow_view(const Tensor& f, const Tensor& gt, const Tensor& valid) {
  if (f.shape() != gt.shape()) {
    throw ShapeError("flow " + shape_str(f.shape()) + " vs ground truth " + shape_str(gt.shape()));
  }
  if (f.numel() % 2 != 0 || valid.numel() * 2 != f.numel()) {
    throw ShapeError("flow " + shape_str(f.shape()) + " vs valid " + shape_str(valid.shape()));
  }
  if (f.rank() == 4 && f.size(0) != 1) throw ShapeError("flow metrics take one sample");
  return {f.data(), gt.data(), valid.data(), valid.numel()};
}

}  // namespace detail

// Mean over valid pixels of |f - gt|_2, times `scale`.
inline double epe(const Tensor& f, const Tensor& gt, const Tensor& valid, double scale = 1.0) {
  const auto v = detail::flow_view(f, gt, valid);
  const std::size_t n = v.pixels;
  double sum = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (v.valid[i] == 0.0) continue;
    sum += std::hypot(v.f[i] - v.gt[i], v.f[n + i] - v.gt[n + i]) * scale;
    ++count;
  }
  if (count == 0) throw ContractError("epe: no valid pixels");
  return sum / static_cast<double>(count);
}

// Fraction of valid pixels with EPE > 3 and EPE / max(|gt|, 1e-8) > 0.05.
// Flows are multiplied by `scale` first.
inline double f1_all(const Tensor& f, const Tensor& gt, const Tensor& valid, double scale = 1.0) {
  const auto v = detail::flow_view(f, gt, valid);
  const std::size_t n = v.pixels;
  std::size_t count = 0, outliers = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (v.valid[i] == 0.0) continue;
    const double e = std::hypot(v.f[i] - v.gt[i], v.f[n + i] - v.gt[n + i]) * scale;
    const double mag = std::hypot(v.gt[i], v.gt[n + i]) * scale;
    if (e > 3.0 && e / std::max(mag, 1e-8) > 0.05) ++outliers;
    ++count;
  }
  if (count == 0) throw ContractError("f1_all: no valid pixels");
  return static_cast<double>(outliers) / static_cast<double>(count);
}

// Smallest step (1-based) whose EPE is within tol of the sequence minimum.
inline int bottleneck_step(const std::vector<double>& seq, double tol = 0.01) {
  if (seq.empty()) throw ContractError("bottleneck_step: empty sequence");
  const double best = *std::min_element(seq.begin(), seq.end());
  for (std::size_t t = 0; t < seq.size(); ++t)
    if (std::abs(seq[t] - best) < tol) return static_cast<int>(t) + 1;
  return static_cast<int>(seq.size());
}

// Percentage of samples whose bottleneck step is t, for t = 1..T.
inline std::vector<double> bottleneck_histogram(const std::vector<std::vector<double>>& sequences,
                                                double tol = 0.01) {
  if (sequences.empty()) return {};
  const std::size_t T = sequences.front().size();
  std::vector<double> counts(T, 0.0);
  for (const auto& s : sequences) {
    if (s.size() != T) throw ContractError("bottleneck_histogram: sequences differ in length");
    counts[static_cast<std::size_t>(bottleneck_step(s, tol) - 1)] += 1.0;
  }
  for (double& c : counts) c *= 100.0 / static_cast<double>(sequences.size());
  return counts;
}

struct SampleResult {
  std::uint64_t sample_id = 0;
  Difficulty difficulty = Difficulty::kEasy;
  double r = 1.0;
  double epe = 0, f1_all = 0;
  int updates_entered = 0;
  double gate_activity = 0;  // entered fraction of gated steps
  std::uint64_t flops_total = 0;
  IterationTrace trace;
};

struct ReportRow {
  double r = 0;
  std::string group;
  std::size_t n = 0;
  double epe_mean = 0, f1_all = 0, updates_mean = 0, flops_mean = 0, gate_activity = 0;
};

struct EvalReport {
  std::vector<SampleResult> samples;
  std::vector<ReportRow> rows;
};

inline SampleResult evaluate_sample(const Model& model, const Dataset& data, std::size_t index,
                                    const InferOptions& opt) {
  const std::size_t s = model.config().flownet.downscale;
  Batch b = make_batch(data, {index}, s);
  InferResult res = infer(model, b, opt);
  SampleResult out;
  out.sample_id = index;
  out.difficulty = b.difficulty[0];
  out.r = opt.resource;
  out.epe = epe(res.flow, b.flow_gt, b.valid, static_cast<double>(s));
  out.f1_all = f1_all(res.flow, b.flow_gt, b.valid, static_cast<double>(s));
  out.updates_entered = res.trace.updates_entered;
  out.gate_activity = res.trace.gated_steps
                          ? static_cast<double>(res.trace.gates_entered) / res.trace.gated_steps
                          : 1.0;
  out.flops_total = res.trace.flops_total;
  out.trace = std::move(res.trace);
  return out;
}

// Group rows ("all" plus one per difficulty), ordered by r then group name.
inline std::vector<ReportRow> aggregate_rows(const std::vector<SampleResult>& samples) {
  std::map<std::pair<double, std::string>, std::vector<const SampleResult*>> groups;
  for (const auto& s : samples) {
    groups[{s.r, "all"}].push_back(&s);
    groups[{s.r, difficulty_name(s.difficulty)}].push_back(&s);
  }
  std::vector<ReportRow> rows;
  for (const auto& [key, members] : groups) {
    ReportRow row;
    row.r = key.first;
    row.group = key.second;
    row.n = members.size();
    for (const SampleResult* m : members) {
      row.epe_mean += m->epe;
      row.f1_all += m->f1_all;
      row.updates_mean += m->updates_entered;
      row.flops_mean += static_cast<double>(m->flops_total);
      row.gate_activity += m->gate_activity;
    }
    const double n = static_cast<double>(row.n);
    row.epe_mean /= n;
    row.f1_all /= n;
    row.updates_mean /= n;
    row.flops_mean /= n;
    row.gate_activity /= n;
    rows.push_back(row);
  }
  return rows;
}

inline EvalReport evaluate(const Model& model, const Dataset& data, const InferOptions& opt) {
  EvalReport rep;
  for (std::size_t i = 0; i < data.size(); ++i) rep.samples.push_back(evaluate_sample(model, data, i, opt));
  rep.rows = aggregate_rows(rep.samples);
  return rep;
}

inline EvalReport sweep_report(const Model& model, const Dataset& data, const std::vector<double>& r_values,
                               InferOptions opt) {
  if (r_values.empty()) throw ConfigError("sweep: empty r list");
  EvalReport rep;
  for (double r : r_values) {
    if (!(r > 0 && r <= 1)) throw ConfigError("sweep: r=" + std::to_string(r) + " outside (0, 1]");
    opt.resource = r;
    EvalReport one = evaluate(model, data, opt);
    for (auto& s : one.samples) rep.samples.push_back(std::move(s));
  }
  rep.rows = aggregate_rows(rep.samples);
  return rep;
}

// Per-step EPE sequences under fixed(T) inference.
inline std::vector<std::vector<double>> epe_sequences(const Model& model, const Dataset& data, int T) {
  const std::size_t s = model.config().flownet.downscale;
  InferOptions opt;
  opt.mode = InferMode::kFixed;
  opt.fixed_iterations = T;
  opt.t_test = T;
  opt.keep_step_flows = true;
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Batch b = make_batch(data, {i}, s);
    InferResult res = infer(model, b, opt);
    std::vector<double> seq;
    for (const Tensor& f : res.step_flows) seq.push_back(epe(f, b.flow_gt, b.valid, static_cast<double>(s)));
    out.push_back(std::move(seq));
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV output. Numbers use %.17g so files round-trip and stay byte-stable.

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_schema_header(std::ostream& os, const std::string& kind) {
  os << "# dynflow " << kind << " schema_version=" << kCsvSchemaVersion << "\n";
}

inline void write_report_csv(std::ostream& os, const std::vector<ReportRow>& rows) {
  write_schema_header(os, "report");
  os << "r,group,n,epe_mean,f1_all,updates_mean,flops_mean\n";
  for (const auto& r : rows) {
    os << fmt_double(r.r) << ',' << r.group << ',' << r.n << ',' << fmt_double(r.epe_mean) << ','
       << fmt_double(r.f1_all) << ',' << fmt_double(r.updates_mean) << ',' << fmt_double(r.flops_mean)
       << "\n";
  }
}

// One row per (sample, step) plus a totals row (t = "total") per sample.
inline void write_trace_csv(std::ostream& os, const std::vector<SampleResult>& samples) {
  write_schema_header(os, "trace");
  os << "sample_id,t,P0,P1,p,i,entered,flops_step\n";
  for (const auto& s : samples) {
    const IterationTrace& tr = s.trace;
    for (const auto& st : tr.steps) {
      os << tr.sample_id << ',' << st.t << ',';
      if (st.has_gate) {
        os << fmt_double(st.logit_enter) << ',' << fmt_double(st.logit_skip) << ',' << fmt_double(st.gate)
           << ',' << fmt_double(st.improvement);
      } else {
        os << ",,,";
      }
      os << ',' << (st.entered ? 1 : 0) << ',' << st.flops << "\n";
    }
    os << tr.sample_id << ",total,,,,," << tr.updates_entered << ',' << tr.flops_total << "\n";
  }
}

inline void write_histogram_csv(std::ostream& os, const std::vector<double>& hist, double tol,
                                std::size_t samples) {
  write_schema_header(os, "bottleneck");
  os << "# tol=" << fmt_double(tol) << " samples=" << samples << "\n";
  os << "t,percent\n";
  for (std::size_t t = 0; t < hist.size(); ++t) os << t + 1 << ',' << fmt_double(hist[t]) << "\n";
}

}  // namespace dynflow
