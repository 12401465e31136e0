#pragma once

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "pipesim/config.hpp"
#include "pipesim/errors.hpp"
#include "pipesim/planner.hpp"
#include "pipesim/report.hpp"
#include "pipesim/simcore.hpp"
#include "pipesim/streamlib.hpp"
#include "pipesim/swap.hpp"
#include "pipesim/trace.hpp"

namespace pipesim {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitInfeasible = 2, kExitSimulation = 3 };

/// Fixed-precision number formatting for report files.
inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

class OutputDir {
 public:
  explicit OutputDir(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw ConfigError("cannot create output directory " + dir_.string() + ": " + ec.message());
  }

  std::ofstream open(const std::string& name) const {
    std::ofstream out(dir_ / name, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + (dir_ / name).string());
    return out;
  }

  void write_json(const std::string& name, const nlohmann::json& j) const { open(name) << j.dump(2) << '\n'; }

  const std::filesystem::path& path() const { return dir_; }

 private:
  std::filesystem::path dir_;
};

inline void write_requests_csv(std::ostream& out, const RunReport& r) {
  out << "request_id,microbatch,arrival_ms,prompt_len,tokens,completion_ms,normalized_latency_ms\n";
  for (const auto& q : r.requests) {
    out << q.id << ',' << q.microbatch << ',' << fmt(q.arrival) << ',' << q.prompt_len << ',' << q.tokens << ','
        << fmt(q.completion) << ',' << fmt(q.normalized_latency) << '\n';
  }
}

inline void write_stages_csv(std::ostream& out, const RunReport& r) {
  out << "stage,role,pipeline,layers,busy_ms,bubble_ms,prompt_steps,token_steps,aborted_steps\n";
  for (const auto& s : r.stages) {
    std::int64_t aborted = 0;
    for (const auto& o : s.occupancy) aborted += o.aborted ? 1 : 0;
    out << s.id << ',' << to_string(s.role) << ',' << s.pipeline << ',' << s.layers << ',' << fmt(s.busy) << ','
        << fmt(s.bubble) << ',' << s.prompt_steps << ',' << s.token_steps << ',' << aborted << '\n';
  }
}

inline void write_recovery_csv(std::ostream& out, const std::string& variant, const RunReport& r, bool header) {
  if (header) {
    out << "variant,failed_stage,failure_ms,detected_ms,repaired_ms,restart,lag_steps,emitted_during_detection,"
           "redone_token_steps,redone_prompt_steps,affected_microbatches,copy_ms\n";
  }
  for (const auto& x : r.recoveries) {
    out << variant << ',' << x.failed_stage << ',' << fmt(x.failure) << ',' << fmt(x.detected) << ','
        << fmt(x.repaired) << ',' << (x.fault_tolerant ? step_label(x.restart) : std::string("scratch")) << ','
        << x.lag_steps << ',' << x.emitted_during_detection << ',' << x.redone_token_steps << ','
        << x.redone_prompt_steps << ',' << x.affected_microbatches << ',' << fmt(x.copy_time) << '\n';
  }
}

inline nlohmann::json summary_json(const RunReport& r) {
  const auto lat = normalized_latency(r);
  nlohmann::json j;
  j["plan"] = r.plan_label;
  j["machines"] = r.machines;
  j["makespan_ms"] = r.makespan;
  j["cost_machine_hours"] = r.cost();
  j["requests"] = r.requests.size();
  j["microbatches"] = r.microbatches.size();
  j["median_normalized_latency_ms"] = lat.median;
  j["p99_normalized_latency_ms"] = lat.p99;
  j["throughput_tokens_per_ms"] = r.throughput_tokens_per_ms();
  j["tokens_emitted"] = r.request_tokens_emitted;
  j["redone_token_steps"] = r.redone_token_steps;
  j["redone_prompt_steps"] = r.redone_prompt_steps;
  j["dp_imbalance"] = r.dp_imbalance;
  nlohmann::json bubbles = nlohmann::json::array();
  for (auto b : bubble_time(r)) bubbles.push_back(b);
  j["bubble_ms"] = bubbles;
  j["event_counts"] = r.event_counts;
  return j;
}

inline void write_run(const OutputDir& out, const RunReport& r, bool verbose) {
  {
    auto f = out.open("requests.csv");
    write_requests_csv(f, r);
  }
  {
    auto f = out.open("stages.csv");
    write_stages_csv(f, r);
  }
  out.write_json("summary.json", summary_json(r));
  if (verbose) {
    auto f = out.open("events.log");
    for (const auto& line : r.event_log) f << line << '\n';
  }
}

/// Fill in m for a disaggregated plan configured with "auto".
inline Plan resolve_plan(const ExperimentConfig& cfg, Plan plan, const Trace& trace) {
  if (plan.mode == PlanMode::Disaggregated && cfg.auto_stream_overhead) {
    plan.stream_overhead = estimate_m(cfg.model, cfg.profile, plan.prompt_depth, plan.microbatch_size,
                                      trace.max_prompt_len(), cfg.cluster.transports);
  }
  return plan;
}

inline void require_fits(const ExperimentConfig& cfg, const Plan& plan, const Trace& trace) {
  if (auto why = plan_fits(plan, cfg.model, cfg.cluster.memory_bytes, trace.max_prompt_len(), trace.max_sequence())) {
    throw InfeasibleError(plan.label() + ": " + *why);
  }
}

inline const Plan& configured_plan(const ExperimentConfig& cfg) {
  if (!cfg.plan) throw ConfigError("this command needs a plan section");
  return *cfg.plan;
}

inline int run_simulate(const ExperimentConfig& cfg, const OutputDir& out, bool verbose) {
  const auto trace = cfg.load_trace();
  const auto plan = resolve_plan(cfg, configured_plan(cfg), trace);
  require_fits(cfg, plan, trace);
  auto opts = cfg.sim;
  opts.verbose_events = verbose;
  const auto workload = form_microbatches(trace, {plan.microbatch_size, cfg.partial_batch_timeout_ms});
  const auto report = simulate(plan, cfg.model, cfg.profile, workload, cfg.faults, opts);
  write_run(out, report, verbose);
  if (!cfg.faults.empty()) {
    auto f = out.open("recovery.csv");
    write_recovery_csv(f, plan.fault_tolerance ? "ft_on" : "ft_off", report, true);
  }
  return kExitOk;
}

inline int run_plan(const ExperimentConfig& cfg, const OutputDir& out) {
  const auto trace = cfg.load_trace();
  const auto result = enumerate_plans(cfg.cluster, cfg.model, cfg.profile, trace, cfg.search, cfg.sim);
  auto f = out.open("plan.csv");
  f << "rank,index,mode,label,machines,dp_replicas,prompt_depth,token_depth,microbatch_size,swapping,"
       "stream_overhead,feasible,makespan_ms,cost_machine_hours,median_normalized_latency_ms,reason\n";
  auto row = [&](std::int64_t rank, const Candidate& c) {
    std::string reason = c.reason;
    for (auto& ch : reason) {
      if (ch == ',' || ch == '\n') ch = ';';
    }
    f << rank << ',' << c.index << ',' << to_string(c.plan.mode) << ",\"" << c.plan.label() << "\","
      << c.plan.machines_total << ',' << c.plan.dp_replicas << ',' << c.plan.prompt_depth << ','
      << c.plan.token_depth << ',' << c.plan.microbatch_size << ',' << (c.plan.swapping ? 1 : 0) << ','
      << fmt(c.plan.stream_overhead) << ',' << (c.feasible ? 1 : 0) << ',' << fmt(c.makespan) << ','
      << fmt(c.cost) << ',' << fmt(c.median_normalized_latency) << ',' << reason << '\n';
  };
  std::int64_t rank = 1;
  for (const auto& c : result.ranked) row(rank++, c);
  for (const auto& c : result.rejected) row(0, c);

  nlohmann::json j;
  j["machines"] = cfg.cluster.machines;
  j["feasible_candidates"] = result.ranked.size();
  j["rejected_candidates"] = result.rejected.size();
  for (auto mode : {PlanMode::Baseline, PlanMode::BaselineDP, PlanMode::Disaggregated}) {
    if (const auto* best = result.best(mode)) {
      j["best"][to_string(mode)] = {{"label", best->plan.label()},
                                    {"makespan_ms", best->makespan},
                                    {"cost_machine_hours", best->cost}};
    }
  }
  out.write_json("summary.json", j);
  if (result.ranked.empty()) {
    std::cerr << "no feasible plan:\n";
    for (const auto& c : result.rejected) std::cerr << "  " << c.plan.label() << ": " << c.reason << '\n';
    return kExitInfeasible;
  }
  return kExitOk;
}

/// Grid over request rate x microbatch size x machine count, starting from the
/// configured plan. Disaggregated plans are re-split for each machine count.
inline int run_sweep(const ExperimentConfig& cfg, const OutputDir& out) {
  const Plan base = configured_plan(cfg);
  auto rates = cfg.sweep.rates_per_s;
  auto sizes = cfg.sweep.microbatch_sizes;
  auto machines = cfg.sweep.machines;
  if (rates.empty()) rates.push_back(cfg.generator ? cfg.generator->rate_per_s : 0.0);
  if (sizes.empty()) sizes.push_back(base.microbatch_size);
  if (machines.empty()) machines.push_back(base.machines_total);

  struct Row {
    double rate = 0;
    Plan plan;
    bool feasible = false;
    std::string reason;
    RunReport report;
  };
  std::vector<Row> rows;
  for (double rate : rates) {
    for (auto d : machines) {
      for (auto b : sizes) {
        Row r;
        r.rate = rate;
        r.plan = base;
        r.plan.machines_total = d;
        r.plan.microbatch_size = b;
        rows.push_back(r);
      }
    }
  }
  auto evaluate = [&](Row& r) {
    try {
      Trace trace;
      if (cfg.generator && r.rate > 0) {
        auto g = *cfg.generator;
        g.rate_per_s = r.rate;
        g.seed = cfg.seed;
        trace = generate_trace(g);
      } else {
        trace = cfg.load_trace();
      }
      auto& p = r.plan;
      if (p.mode == PlanMode::BaselineDP && p.machines_total % p.dp_replicas != 0) {
        throw InfeasibleError("dp_replicas does not divide " + std::to_string(p.machines_total));
      }
      if (p.mode == PlanMode::Disaggregated && p.machines_total != base.machines_total) {
        const double d = static_cast<double>(p.machines_total);
        const auto part = disagg_partition(p.machines_total, cfg.profile.prompt_time(p.microbatch_size, trace.max_prompt_len()) / d,
                                           cfg.profile.token_time(p.microbatch_size) / d,
                                           trace.max_sequence() - trace.max_prompt_len(), p.stream_overhead);
        p.prompt_depth = part.prompt_depth;
        p.token_depth = part.token_depth;
      }
      p = resolve_plan(cfg, p, trace);
      require_fits(cfg, p, trace);
      const auto workload = form_microbatches(trace, {p.microbatch_size, cfg.partial_batch_timeout_ms});
      r.report = simulate(p, cfg.model, cfg.profile, workload, {}, cfg.sim);
      r.feasible = true;
    } catch (const Error& e) {
      r.reason = e.what();
    }
  };
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < rows.size(); i = next++) evaluate(rows[i]);
  };
  const unsigned n = std::max(1u, std::min<unsigned>(std::thread::hardware_concurrency(), static_cast<unsigned>(rows.size())));
  std::vector<std::thread> pool;
  for (unsigned k = 1; k < n; ++k) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  auto f = out.open("sweep.csv");
  f << "rate_per_s,machines,microbatch_size,label,feasible,makespan_ms,median_normalized_latency_ms,"
       "p99_normalized_latency_ms,throughput_tokens_per_ms,cost_machine_hours,reason\n";
  bool any = false;
  for (const auto& r : rows) {
    std::string reason = r.reason;
    for (auto& ch : reason) {
      if (ch == ',' || ch == '\n') ch = ';';
    }
    const auto lat = r.feasible ? normalized_latency(r.report) : LatencySummary{};
    f << fmt(r.rate) << ',' << r.plan.machines_total << ',' << r.plan.microbatch_size << ",\"" << r.plan.label()
      << "\"," << (r.feasible ? 1 : 0) << ',' << fmt(r.report.makespan) << ',' << fmt(lat.median) << ','
      << fmt(lat.p99) << ',' << fmt(r.report.throughput_tokens_per_ms()) << ',' << fmt(r.report.cost()) << ','
      << reason << '\n';
    any = any || r.feasible;
  }
  return any ? kExitOk : kExitInfeasible;
}

/// The configured faults run three ways: fault-free, without replication, with replication.
inline int run_ft_demo(const ExperimentConfig& cfg, const OutputDir& out, bool verbose) {
  if (cfg.faults.empty()) throw ConfigError("ft-demo needs at least one entry in faults");
  const auto trace = cfg.load_trace();
  Plan plan = resolve_plan(cfg, configured_plan(cfg), trace);
  require_fits(cfg, plan, trace);
  const auto workload = form_microbatches(trace, {plan.microbatch_size, cfg.partial_batch_timeout_ms});
  auto opts = cfg.sim;
  opts.verbose_events = verbose;

  Plan off = plan;
  off.fault_tolerance = false;
  Plan on = plan;
  on.fault_tolerance = true;
  const auto clean = simulate(off, cfg.model, cfg.profile, workload, {}, cfg.sim);
  const auto without = simulate(off, cfg.model, cfg.profile, workload, cfg.faults, cfg.sim);
  const auto with = simulate(on, cfg.model, cfg.profile, workload, cfg.faults, opts);

  auto f = out.open("recovery.csv");
  write_recovery_csv(f, "ft_off", without, true);
  write_recovery_csv(f, "ft_on", with, false);
  write_run(out, with, verbose);

  auto cumulative = [](const RunReport& r) {
    double sum = 0;
    for (const auto& m : r.microbatches) {
      if (m.restarts > 0) sum += m.latency();
    }
    return sum;
  };
  nlohmann::json j;
  j["fault_free"] = summary_json(clean);
  j["ft_off"] = summary_json(without);
  j["ft_on"] = summary_json(with);
  j["ft_off"]["affected_cumulative_latency_ms"] = cumulative(without);
  j["ft_on"]["affected_cumulative_latency_ms"] = cumulative(with);
  j["ft_on"]["ack_count"] = with.acks.size();
  out.write_json("summary.json", j);
  {
    auto a = out.open("acks.csv");
    a << "time_ms,worker,microbatch,step\n";
    for (const auto& x : with.acks) a << fmt(x.time) << ',' << x.worker << ',' << x.microbatch << ',' << x.step << '\n';
  }
  return kExitOk;
}

/// Swap benefit over a batch x token-count grid for one stage of the configured plan.
inline int run_analyze_swap(const ExperimentConfig& cfg, const OutputDir& out) {
  const Plan& plan = configured_plan(cfg);
  const std::int64_t depth = std::max<std::int64_t>(2, plan.pipeline_depth());
  std::int64_t p = cfg.swap_analysis.prompt_len;
  if (p == 0) p = cfg.load_trace().max_prompt_len();
  const double bw = cfg.swap_analysis.pcie_bytes_per_ms.value_or(cfg.cluster.transports.pcie.bytes_per_ms);
  const auto ranges = stage_layer_ranges(cfg.model.layers, std::min(depth, cfg.model.layers));
  const auto layers = ranges.front().second - ranges.front().first;
  const Bytes c = checked_mul(cfg.model.kv_bytes_per_token_per_layer(), static_cast<Bytes>(layers));
  const double frac = static_cast<double>(layers) / static_cast<double>(cfg.model.layers);

  auto f = out.open("swap.csv");
  f << "batch,new_tokens,prompt_len,token_ms,prompt_ms,lhs_ms,rhs_ms,beneficial,throughput_ratio\n";
  for (auto b : cfg.swap_analysis.batches) {
    for (auto n : cfg.swap_analysis.new_tokens) {
      const Millis t = cfg.profile.token_time(b) * frac;
      const Millis prompt = cfg.profile.prompt_time(b, p) * frac;
      SwapPlan sp;
      sp.pipeline_depth = depth;
      sp.batch = b;
      sp.per_token_bytes = c;
      sp.per_microbatch_bytes = checked_mul(checked_mul(c, static_cast<Bytes>(b)), static_cast<Bytes>(p + n));
      sp.pcie_bandwidth = bw;
      const auto ineq = swap_beneficial(t, b, c, bw, n, p);
      const auto thr = simulate_swapping_throughput(sp, t, n, p, prompt);
      f << b << ',' << n << ',' << p << ',' << fmt(t) << ',' << fmt(prompt) << ',' << fmt(ineq.lhs) << ','
        << fmt(ineq.rhs) << ',' << (ineq.beneficial ? 1 : 0) << ',' << fmt(thr.ratio) << '\n';
    }
  }
  return kExitOk;
}

}  // namespace pipesim
