#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "pipesim/errors.hpp"
#include "pipesim/latency_profile.hpp"
#include "pipesim/model_memory.hpp"
#include "pipesim/plan.hpp"
#include "pipesim/report.hpp"
#include "pipesim/simcore.hpp"
#include "pipesim/streamlib.hpp"
#include "pipesim/swap.hpp"
#include "pipesim/trace.hpp"
#include "pipesim/units.hpp"

namespace pipesim {

/// Fewest prompt stages so every stage holds its layers' weights plus one
/// microbatch's prompt cache: ceil(L (C0 + W0) / M).
inline std::int64_t min_prompt_depth(const ModelSpec& model, const KvFootprint& kv, Bytes capacity) {
  const Bytes per_layer = checked_add(kv.prompt_per_layer, model.attn_weight_bytes());
  if (per_layer > capacity) {
    throw InfeasibleError("one layer needs " + std::to_string(per_layer) + " bytes, machine has " +
                          std::to_string(capacity));
  }
  const Bytes total = checked_mul(static_cast<Bytes>(model.layers), per_layer);
  return std::max<std::int64_t>(1, static_cast<std::int64_t>(ceil_div(total, capacity)));
}

/// Fewest token stages: ceil(L W0 / (M - L (C0 + K0))).
inline std::int64_t min_token_depth(const ModelSpec& model, const KvFootprint& kv, Bytes capacity) {
  const Bytes kv_total =
      checked_mul(static_cast<Bytes>(model.layers), checked_add(kv.prompt_per_layer, kv.token_step_per_layer));
  if (capacity <= kv_total) {
    throw InfeasibleError("KV cache overflow: L (C0 + K0) = " + std::to_string(kv_total) + " bytes >= " +
                          std::to_string(capacity) + " bytes per machine");
  }
  const Bytes weights = checked_mul(static_cast<Bytes>(model.layers), model.attn_weight_bytes());
  return std::max<std::int64_t>(1, static_cast<std::int64_t>(ceil_div(weights, capacity - kv_total)));
}

struct ThroughputBreakdown {
  Millis s1 = 0, s2 = 0, s3 = 0, s4 = 0;
  Millis inverse_throughput_baseline = 0;
  Millis inverse_throughput_token = 0;
  Millis inverse_throughput_prompt = 0;
  Millis inverse_throughput_disagg = 0;
};

/// Closed form of the D-stage schedule with per-stage prompt time Y and token time t.
inline Millis baseline_closed_form(std::int64_t d, Millis y, Millis t, std::int64_t n) {
  const double dd = static_cast<double>(d);
  return (dd - 1.0) * (y - t) / dd + y + static_cast<double>(n) * t;
}

/// Steady-state time per microbatch of a D-stage pipeline, built from the four
/// schedule segments and cross-checked against the closed form.
inline ThroughputBreakdown baseline_inverse_throughput(std::int64_t d, Millis y, Millis t, std::int64_t n) {
  if (d < 1 || n < 1 || !(t > 0) || y < t) throw DomainError("need D >= 1, N >= 1, Y >= t > 0");
  const double dd = static_cast<double>(d);
  ThroughputBreakdown b;
  b.s1 = dd * y;
  b.s2 = (dd - 1.0) * y;
  b.s3 = static_cast<double>(n) * dd * t;
  b.s4 = (dd - 1.0) * t;
  b.inverse_throughput_baseline = (b.s1 + b.s2 + b.s3 - b.s4) / dd;
  if (!nearly_equal(b.inverse_throughput_baseline, baseline_closed_form(d, y, t, n))) {
    throw SimulationError("segment identity disagrees with the closed form");
  }
  return b;
}

/// Inverse throughput of each side of a disaggregated split, in the baseline's per-stage units.
inline Millis token_side_inverse_throughput(std::int64_t d, std::int64_t d_t, Millis t, std::int64_t n) {
  return static_cast<double>(n) * static_cast<double>(d) * t / static_cast<double>(d_t);
}

inline Millis prompt_side_inverse_throughput(std::int64_t d, std::int64_t d_p, Millis y, double m) {
  return m * static_cast<double>(d) * y / static_cast<double>(d_p);
}

/// Real-valued token depth at which both sides take equally long.
inline double continuous_token_depth(std::int64_t d, Millis y, Millis t, std::int64_t n, double m) {
  const double nt = static_cast<double>(n) * t;
  return static_cast<double>(d) * nt / (m * y + nt);
}

struct Partition {
  std::int64_t prompt_depth = 0;
  std::int64_t token_depth = 0;
  double token_depth_continuous = 0;
  ThroughputBreakdown breakdown;
};

/// Split D machines between prompt and token pipelines: round the balanced
/// point to whichever neighbor has the smaller max(I_t, I_p), then lift either
/// side to its memory minimum.
inline Partition disagg_partition(std::int64_t d, Millis y, Millis t, std::int64_t n, double m,
                                  std::int64_t min_prompt = 1, std::int64_t min_token = 1) {
  if (d < 2) throw DomainError("disaggregation needs D >= 2");
  if (m < 1.0 || !(y > 0) || !(t > 0) || n < 1) throw DomainError("need m >= 1 and positive Y, t, N");
  min_prompt = std::max<std::int64_t>(1, min_prompt);
  min_token = std::max<std::int64_t>(1, min_token);
  if (min_prompt + min_token > d) {
    throw InfeasibleError("D = " + std::to_string(d) + " cannot host " + std::to_string(min_prompt) +
                          " prompt and " + std::to_string(min_token) + " token stages");
  }
  Partition out;
  out.token_depth_continuous = continuous_token_depth(d, y, t, n, m);
  auto worst = [&](std::int64_t dt) {
    return std::max(token_side_inverse_throughput(d, dt, t, n), prompt_side_inverse_throughput(d, d - dt, y, m));
  };
  const auto lo = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(out.token_depth_continuous)), 1, d - 1);
  const auto hi = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::ceil(out.token_depth_continuous)), 1, d - 1);
  std::int64_t dt = worst(hi) < worst(lo) ? hi : lo;
  if (d - dt < min_prompt) dt = d - min_prompt;
  if (dt < min_token) dt = min_token;
  out.token_depth = dt;
  out.prompt_depth = d - dt;
  if (y >= t) out.breakdown = baseline_inverse_throughput(d, y, t, n);
  out.breakdown.inverse_throughput_token = token_side_inverse_throughput(d, dt, t, n);
  out.breakdown.inverse_throughput_prompt = prompt_side_inverse_throughput(d, d - dt, y, m);
  out.breakdown.inverse_throughput_disagg =
      std::max(out.breakdown.inverse_throughput_token, out.breakdown.inverse_throughput_prompt);
  return out;
}

/// Y/t threshold above which splitting beats one pipeline; infinite when it never does.
inline double disagg_threshold(std::int64_t d, double m) {
  const double denom = static_cast<double>(d) * (2.0 - m) - 1.0;
  if (!(denom > 0)) return std::numeric_limits<double>::infinity();
  return (static_cast<double>(d) - 1.0) / denom;
}

inline bool disagg_beneficial(std::int64_t d, Millis y, Millis t, double m) {
  if (d < 2 || !(t > 0)) throw DomainError("need D >= 2 and t > 0");
  if (m < 1.0 || m >= 2.0) return false;
  if (!(static_cast<double>(d) * (2.0 - m) - 1.0 > 0)) return false;
  return y / t > disagg_threshold(d, m);
}

/// Why a plan does not fit, or nothing if every stage fits. Token-side stages
/// hold every in-flight microbatch (or the swap budget) at full length; prompt
/// stages hold one microbatch's prompt.
inline std::optional<std::string> plan_fits(const Plan& plan, const ModelSpec& model, Bytes capacity,
                                            std::int64_t max_prompt_len, std::int64_t max_sequence) {
  try {
    plan.validate();
    const auto layout = stage_layout(plan, model);
    const std::int64_t b = plan.microbatch_size;
    const std::int64_t depth = plan.pipeline_depth();
    const std::int64_t resident = plan.swapping && depth >= 2 ? device_capacity(depth) : depth;
    const Bytes token_cache = kv_cache_bytes(model, b, max_sequence) / static_cast<Bytes>(model.layers);
    const Bytes prompt_cache = kv_cache_bytes(model, b, max_prompt_len) / static_cast<Bytes>(model.layers);
    for (const auto& s : layout) {
      const Bytes per_layer = s.role == StageRole::PromptOnly
                                  ? prompt_cache
                                  : checked_mul(token_cache, static_cast<Bytes>(resident));
      const Bytes kv = checked_mul(per_layer, static_cast<Bytes>(s.layers()));
      if (!stage_fits(s.layers(), model, kv, capacity)) {
        return "stage " + std::to_string(s.stage_id) + " needs " +
               std::to_string(checked_add(kv, checked_mul(model.attn_weight_bytes(), static_cast<Bytes>(s.layers())))) +
               " bytes > " + std::to_string(capacity);
      }
    }
  } catch (const Error& e) {
    return std::string(e.what());
  }
  return std::nullopt;
}

struct SearchSpace {
  std::vector<std::int64_t> microbatch_sizes{1, 2, 4, 8, 16, 32};
  std::vector<PlanMode> modes{PlanMode::Baseline, PlanMode::BaselineDP, PlanMode::Disaggregated};
  std::vector<bool> swapping{false};
  /// Fixed m for disaggregated candidates; estimated per candidate when unset.
  std::optional<double> stream_overhead;
  /// Upper bound on dp_replicas; 0 means no bound.
  std::int64_t max_dp_replicas = 0;
  std::optional<Millis> partial_batch_timeout_ms;
  unsigned threads = 0;
};

struct Candidate {
  std::int64_t index = 0;
  Plan plan;
  bool feasible = false;
  std::string reason;
  Millis makespan = 0;
  double cost = 0;
  double median_normalized_latency = 0;
  double dp_imbalance = 1.0;
};

struct PlanningResult {
  std::vector<Candidate> ranked;
  std::vector<Candidate> rejected;

  const Candidate* best(PlanMode mode) const {
    for (const auto& c : ranked) {
      if (c.plan.mode == mode) return &c;
    }
    return nullptr;
  }
};

/// Every (mode, split, b, swapping) plan for `machines` machines, in a fixed order.
inline std::vector<Plan> candidate_plans(std::int64_t machines, const SearchSpace& space) {
  std::vector<Plan> out;
  for (auto mode : space.modes) {
    for (bool swap : space.swapping) {
      for (auto b : space.microbatch_sizes) {
        Plan p;
        p.mode = mode;
        p.machines_total = machines;
        p.microbatch_size = b;
        p.swapping = swap;
        switch (mode) {
          case PlanMode::Baseline: out.push_back(p); break;
          case PlanMode::BaselineDP:
            for (std::int64_t d = 2; d <= machines; ++d) {
              if (machines % d != 0) continue;
              if (space.max_dp_replicas > 0 && d > space.max_dp_replicas) continue;
              p.dp_replicas = d;
              out.push_back(p);
            }
            break;
          case PlanMode::Disaggregated:
            for (std::int64_t dp = 1; dp < machines; ++dp) {
              p.prompt_depth = dp;
              p.token_depth = machines - dp;
              out.push_back(p);
            }
            break;
        }
      }
    }
  }
  return out;
}

/// Simulate every feasible candidate on `trace` and rank by makespan, then cost,
/// then microbatch size. Candidates run on worker threads; results are merged
/// by candidate index.
inline PlanningResult enumerate_plans(const ClusterSpec& cluster, const ModelSpec& model, const LatencyProfile& profile,
                                      const Trace& trace, const SearchSpace& space, const SimOptions& options = {}) {
  cluster.validate();
  model.validate();
  trace.validate();
  auto plans = candidate_plans(cluster.machines, space);
  std::vector<Candidate> results(plans.size());
  SimOptions sim_options = options;
  sim_options.transports = cluster.transports;
  sim_options.verbose_events = false;
  const auto max_prompt = trace.max_prompt_len();
  const auto max_seq = trace.max_sequence();

  auto evaluate = [&](std::size_t i) {
    Candidate& c = results[i];
    c.index = static_cast<std::int64_t>(i);
    c.plan = plans[i];
    try {
      if (c.plan.mode == PlanMode::Disaggregated) {
        c.plan.stream_overhead = space.stream_overhead.value_or(
            estimate_m(model, profile, c.plan.prompt_depth, c.plan.microbatch_size, max_prompt, cluster.transports));
      }
      if (auto why = plan_fits(c.plan, model, cluster.memory_bytes, max_prompt, max_seq)) {
        c.reason = *why;
        return;
      }
      const auto workload = form_microbatches(trace, {c.plan.microbatch_size, space.partial_batch_timeout_ms});
      const auto report = simulate(c.plan, model, profile, workload, {}, sim_options);
      c.feasible = true;
      c.makespan = report.makespan;
      c.cost = report.cost();
      c.median_normalized_latency = normalized_latency(report).median;
      c.dp_imbalance = report.dp_imbalance;
    } catch (const Error& e) {
      c.feasible = false;
      c.reason = e.what();
    }
  };

  unsigned threads = space.threads ? space.threads : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(1, plans.size())));
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < plans.size(); i = next++) evaluate(i);
  };
  std::vector<std::thread> pool;
  for (unsigned k = 1; k < threads; ++k) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  PlanningResult out;
  for (auto& c : results) (c.feasible ? out.ranked : out.rejected).push_back(std::move(c));
  std::stable_sort(out.ranked.begin(), out.ranked.end(), [](const Candidate& a, const Candidate& b) {
    if (a.makespan != b.makespan) return a.makespan < b.makespan;
    if (a.cost != b.cost) return a.cost < b.cost;
    return a.plan.microbatch_size < b.plan.microbatch_size;
  });
  return out;
}

}  // namespace pipesim
