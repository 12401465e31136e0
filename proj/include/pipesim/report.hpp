#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pipesim/errors.hpp"
#include "pipesim/fault_tolerance.hpp"
#include "pipesim/plan.hpp"
#include "pipesim/units.hpp"

namespace pipesim {

struct RequestRecord {
  std::int64_t id = 0;
  std::int64_t microbatch = 0;
  Millis arrival = 0;
  std::int64_t prompt_len = 0;
  std::int64_t tokens = 0;
  Millis completion = 0;
  Millis normalized_latency = 0;
};

struct MicrobatchRecord {
  std::int64_t id = 0;
  std::int64_t batch = 0;
  std::int64_t prompt_len = 0;
  std::int64_t new_tokens = 0;
  std::int64_t pipeline = 0;
  Millis arrival = 0;
  Millis admitted = 0;
  Millis completion = 0;
  std::int64_t restarts = 0;
  std::int64_t redone_token_steps = 0;
  /// Steps leaving the last stage, in order, after any rewinds.
  std::vector<std::int64_t> emitted;

  Millis latency() const { return completion - arrival; }
};

enum class StepKind { Prompt, Token };

struct OccupancyInterval {
  Millis start = 0;
  Millis end = 0;
  std::int64_t microbatch = 0;
  std::int64_t step = 0;
  bool aborted = false;

  StepKind kind() const { return step == 0 ? StepKind::Prompt : StepKind::Token; }
};

struct StageRecord {
  std::int64_t id = 0;
  StageRole role = StageRole::PromptAndToken;
  std::int64_t pipeline = 0;
  std::int64_t layers = 0;
  Millis busy = 0;
  Millis bubble = 0;
  std::int64_t prompt_steps = 0;
  std::int64_t token_steps = 0;
  std::vector<OccupancyInterval> occupancy;
};

/// A microbatch cache held in a stage's device memory over [start, end).
struct ResidencyInterval {
  std::int64_t stage = 0;
  std::int64_t microbatch = 0;
  Millis start = 0;
  Millis end = 0;
};

struct RecoveryRecord {
  std::int64_t failed_stage = 0;
  Millis failure = 0;
  Millis detected = 0;
  Millis repaired = 0;
  bool fault_tolerant = false;
  StepRef restart;
  std::int64_t lag_steps = 0;
  std::int64_t emitted_during_detection = 0;
  std::int64_t redone_token_steps = 0;
  std::int64_t redone_prompt_steps = 0;
  std::int64_t affected_microbatches = 0;
  Millis copy_time = 0;
};

struct RunReport {
  std::string plan_label;
  std::int64_t machines = 0;
  Millis makespan = 0;
  std::vector<RequestRecord> requests;
  std::vector<MicrobatchRecord> microbatches;
  std::vector<StageRecord> stages;
  std::vector<ResidencyInterval> residency;
  std::vector<AckRecord> acks;
  std::vector<RecoveryRecord> recoveries;
  std::map<std::string, std::int64_t> event_counts;
  std::vector<std::string> event_log;
  /// Token steps per request that made it into the output (redone work excluded).
  std::int64_t request_tokens_emitted = 0;
  std::int64_t redone_token_steps = 0;
  std::int64_t redone_prompt_steps = 0;
  /// Round-robin DP load spread: max replica token work / mean (1 when balanced).
  double dp_imbalance = 1.0;
  /// Width of a steady-state round: microbatches completing per pipeline cycle.
  std::int64_t round_width = 1;

  /// Microbatch completion times, ascending.
  std::vector<Millis> completions() const {
    std::vector<Millis> c;
    c.reserve(microbatches.size());
    for (const auto& m : microbatches) c.push_back(m.completion);
    std::sort(c.begin(), c.end());
    return c;
  }

  double cost(double normalization = kMillisPerHour) const {
    return static_cast<double>(machines) * makespan / normalization;
  }

  double throughput_tokens_per_ms() const {
    return makespan > 0 ? static_cast<double>(request_tokens_emitted) / makespan : 0.0;
  }
};

/// Lower median for even counts, so the value is always an observed one.
inline double median_of(std::vector<double> v) {
  if (v.empty()) throw DomainError("median of an empty set");
  std::sort(v.begin(), v.end());
  return v[(v.size() - 1) / 2];
}

/// Nearest-rank percentile, q in (0, 100].
inline double percentile_of(std::vector<double> v, double q) {
  if (v.empty()) throw DomainError("percentile of an empty set");
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * static_cast<double>(v.size())));
  return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

struct LatencySummary {
  std::vector<double> per_request;
  double median = 0;
  double p99 = 0;
};

/// End-to-end latency over generated tokens, per request plus median and p99.
inline LatencySummary normalized_latency(const RunReport& report) {
  LatencySummary out;
  for (const auto& r : report.requests) {
    if (r.tokens <= 0) continue;
    out.per_request.push_back((r.completion - r.arrival) / static_cast<double>(r.tokens));
  }
  if (!out.per_request.empty()) {
    out.median = median_of(out.per_request);
    out.p99 = percentile_of(out.per_request, 99.0);
  }
  return out;
}

/// Per-stage bubble time, in stage-id order.
inline std::vector<Millis> bubble_time(const RunReport& report) {
  std::vector<Millis> out;
  for (const auto& s : report.stages) out.push_back(s.bubble);
  return out;
}

/// Steady-state time per completed microbatch. Skips warmup (the first third,
/// rounded to whole rounds) and measures over whole rounds to the end.
inline Millis steady_state_inverse_throughput(const RunReport& report) {
  const auto c = report.completions();
  const auto n = static_cast<std::int64_t>(c.size());
  const std::int64_t w = std::max<std::int64_t>(1, report.round_width);
  if (n < 3 * w) {
    throw DomainError("steady state needs at least " + std::to_string(3 * w) + " microbatches, got " +
                      std::to_string(n));
  }
  const std::int64_t i0 = w * std::max<std::int64_t>(1, n / (3 * w)) - 1;
  const std::int64_t j = i0 + w * ((n - 1 - i0) / w);
  return (c[static_cast<std::size_t>(j)] - c[static_cast<std::size_t>(i0)]) / static_cast<double>(j - i0);
}

}  // namespace pipesim
