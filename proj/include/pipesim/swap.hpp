#pragma once

#include <algorithm>
#include <cstdint>
#include <utility>

#include "pipesim/errors.hpp"
#include "pipesim/units.hpp"

namespace pipesim {

/// Caches a stage may keep on the device under swapping: the running
/// microbatch and the next one, or just one when only two rotate.
inline std::int64_t device_capacity(std::int64_t depth) { return depth > 2 ? 2 : 1; }

struct SwapPlan {
  std::int64_t pipeline_depth = 2;
  std::int64_t batch = 1;
  /// Bytes per token per request over the stage's layers (C).
  Bytes per_token_bytes = 0;
  Bytes per_microbatch_bytes = 0;
  double pcie_bandwidth = 1.0;

  Bytes host_budget() const { return checked_mul(static_cast<Bytes>(pipeline_depth), per_microbatch_bytes); }
  Bytes device_budget() const {
    return checked_mul(static_cast<Bytes>(device_capacity(pipeline_depth)), per_microbatch_bytes);
  }

  void validate() const {
    if (pipeline_depth < 2) throw DomainError("swapping needs at least two microbatches in rotation");
    if (batch < 1) throw DomainError("swap batch must be >= 1");
    if (!(pcie_bandwidth > 0)) throw DomainError("pcie bandwidth must be > 0");
  }
};

/// While x computes, x+1 comes in and x-1 goes out.
inline std::pair<std::int64_t, std::int64_t> swap_rotation(std::int64_t x, std::int64_t n) {
  if (n < 2) throw DomainError("swap rotation needs N >= 2");
  if (x < 0 || x >= n) throw DomainError("microbatch index outside [0, N)");
  return {(x + 1) % n, (x - 1 + n) % n};
}

/// Swap-in time of a cache already holding `i` tokens.
inline Millis step_transfer_time(std::int64_t i, std::int64_t batch, Bytes per_token_bytes, double pcie_bandwidth) {
  if (i < 0) throw DomainError("step index must be >= 0");
  if (!(pcie_bandwidth > 0)) throw DomainError("pcie bandwidth must be > 0");
  return static_cast<double>(i) * static_cast<double>(batch) * static_cast<double>(per_token_bytes) / pcie_bandwidth;
}

struct SwapInequality {
  Millis lhs = 0;  // 2 N t
  Millis rhs = 0;  // sum_{i=p}^{N+p} max(t, transf_i)
  bool beneficial = false;
};

/// Doubling the batch with swapping beats the plain schedule iff the slowed
/// steps still fit in twice the token time.
inline SwapInequality swap_beneficial(Millis t, std::int64_t batch, Bytes per_token_bytes, double pcie_bandwidth,
                                      std::int64_t n, std::int64_t p) {
  if (!(t > 0) || n < 1 || p < 0) throw DomainError("swap_beneficial needs t > 0, N >= 1, p >= 0");
  SwapInequality out;
  out.lhs = 2.0 * static_cast<double>(n) * t;
  for (std::int64_t i = p; i <= n + p; ++i) {
    out.rhs += std::max(t, step_transfer_time(i, batch, per_token_bytes, pcie_bandwidth));
  }
  out.beneficial = out.lhs >= out.rhs;
  return out;
}

struct SwapThroughput {
  double tokens_per_ms_plain = 0;
  double tokens_per_ms_swapped = 0;
  double ratio = 0;
};

/// Plain batch B takes P + N t for B N tokens; swapped batch 2B takes
/// 2P + sum max(t, transf_i) for 2 B N tokens.
inline SwapThroughput simulate_swapping_throughput(const SwapPlan& plan, Millis t, std::int64_t n, std::int64_t p,
                                                   Millis prompt_ms) {
  plan.validate();
  if (prompt_ms < 0) throw DomainError("prompt time must be >= 0");
  const auto ineq = swap_beneficial(t, plan.batch, plan.per_token_bytes, plan.pcie_bandwidth, n, p);
  const double b = static_cast<double>(plan.batch);
  const double tokens = b * static_cast<double>(n);
  SwapThroughput out;
  out.tokens_per_ms_plain = tokens / (prompt_ms + static_cast<double>(n) * t);
  out.tokens_per_ms_swapped = 2.0 * tokens / (2.0 * prompt_ms + ineq.rhs);
  out.ratio = 2.0 * (prompt_ms + static_cast<double>(n) * t) / (2.0 * prompt_ms + ineq.rhs);
  return out;
}

}  // namespace pipesim
