#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pipesim/errors.hpp"
#include "pipesim/streamlib.hpp"
#include "pipesim/units.hpp"

namespace pipesim {

/// (microbatch, step); step 0 is the prompt, steps 1..N are tokens.
struct StepRef {
  std::int64_t microbatch = 0;
  std::int64_t step = 0;

  friend bool operator==(const StepRef&, const StepRef&) = default;
  friend auto operator<=>(const StepRef&, const StepRef&) = default;
};

/// Schedule-diagram label: 1-based microbatch number, then P for the prompt or
/// A, B, C... for token steps. Steps past Z fall back to a number.
inline std::string step_label(StepRef ref) {
  std::string s = std::to_string(ref.microbatch + 1);
  if (ref.step == 0) return s + "P";
  if (ref.step <= 26) return s + static_cast<char>('A' + ref.step - 1);
  return s + "#" + std::to_string(ref.step);
}

struct AckRecord {
  Millis time = 0;
  std::int64_t worker = 0;
  std::int64_t microbatch = 0;
  std::int64_t step = 0;
};

/// Controller-side view of the replication ring. Worker x streams to
/// (x + 1) mod N and acknowledges (x, j, t) once the copy lands.
class ReplicationLog {
 public:
  explicit ReplicationLog(std::int64_t workers) : workers_(workers), entries_(static_cast<std::size_t>(workers)),
                                                  pending_(static_cast<std::size_t>(workers)) {
    if (workers < 1) throw DomainError("replication log needs at least one worker");
  }

  std::int64_t workers() const noexcept { return workers_; }
  std::int64_t replica_holder(std::int64_t x) const { return (check(x) + 1) % workers_; }

  /// Worker x finished computing `ref`; its replication is now owed.
  void note_completed(std::int64_t x, StepRef ref) { pending_[idx(x)].push_back(ref); }

  void record_replication(std::int64_t x, std::int64_t j, std::int64_t t, Millis now) {
    auto& per_mb = entries_[idx(x)];
    const auto it = per_mb.find(j);
    const std::int64_t expected = it == per_mb.end() ? 0 : it->second + 1;
    if (t != expected) {
      throw ProtocolError("worker " + std::to_string(x) + " acked microbatch " + std::to_string(j) + " step " +
                          std::to_string(t) + ", expected step " + std::to_string(expected));
    }
    auto& owed = pending_[idx(x)];
    if (!owed.empty()) {
      if (owed.front() != StepRef{j, t}) {
        throw ProtocolError("worker " + std::to_string(x) + " acked (" + std::to_string(j) + ", " +
                            std::to_string(t) + ") out of completion order");
      }
      owed.pop_front();
    }
    per_mb[j] = t;
    timeline_.push_back({now, x, j, t});
  }

  /// Highest contiguous step of microbatch j replicated from worker x.
  std::optional<std::int64_t> highest(std::int64_t x, std::int64_t j) const {
    const auto& per_mb = entries_[idx(x)];
    const auto it = per_mb.find(j);
    if (it == per_mb.end()) return std::nullopt;
    return it->second;
  }

  /// Earliest step computed at x whose replica has not landed.
  std::optional<StepRef> first_unreplicated(std::int64_t x) const {
    const auto& owed = pending_[idx(x)];
    if (owed.empty()) return std::nullopt;
    return owed.front();
  }

  std::int64_t lag_steps(std::int64_t x) const { return static_cast<std::int64_t>(pending_[idx(x)].size()); }

  /// Forget replicas of microbatch j beyond `last_kept` (-1 forgets all).
  void truncate(std::int64_t j, std::int64_t last_kept) {
    for (auto& per_mb : entries_) {
      const auto it = per_mb.find(j);
      if (it == per_mb.end()) continue;
      if (last_kept < 0) {
        per_mb.erase(it);
      } else if (it->second > last_kept) {
        it->second = last_kept;
      }
    }
  }

  void forget(std::int64_t j) { truncate(j, -1); }

  /// Recovery re-seeds replicas: worker x's copy of microbatch j now covers
  /// exactly steps 0..last (-1 clears it).
  void resync(std::int64_t x, std::int64_t j, std::int64_t last) {
    auto& per_mb = entries_[idx(x)];
    if (last < 0) {
      per_mb.erase(j);
    } else {
      per_mb[j] = last;
    }
  }

  void clear_pending() {
    for (auto& q : pending_) q.clear();
  }

  const std::vector<AckRecord>& timeline() const noexcept { return timeline_; }

 private:
  std::int64_t check(std::int64_t x) const {
    if (x < 0 || x >= workers_) throw DomainError("worker " + std::to_string(x) + " outside the ring");
    return x;
  }
  std::size_t idx(std::int64_t x) const { return static_cast<std::size_t>(check(x)); }

  std::int64_t workers_;
  std::vector<std::map<std::int64_t, std::int64_t>> entries_;
  std::vector<std::deque<StepRef>> pending_;
  std::vector<AckRecord> timeline_;
};

/// Where to resume after x fails: the first step x computed but never got
/// replicated, else `fallback` (x's next assigned step).
inline StepRef restart_point(const ReplicationLog& log, std::int64_t x, StepRef fallback) {
  return log.first_unreplicated(x).value_or(fallback);
}

struct HeartbeatConfig {
  Millis interval = 100;
  Millis timeout = 300;
  /// Controller checks at k * interval + check_offset.
  Millis check_offset = 0;

  void validate() const {
    if (!(interval > 0)) throw ConfigError("heartbeat interval must be > 0");
    if (!(timeout > interval)) throw ConfigError("heartbeat timeout must exceed the interval");
    if (check_offset < 0 || check_offset >= interval) throw ConfigError("check offset must be in [0, interval)");
  }
};

/// Lowest worker whose last heartbeat is more than `timeout` old.
inline std::optional<std::int64_t> detect_failure(std::span<const Millis> last_heartbeat, Millis now,
                                                  const HeartbeatConfig& config) {
  for (std::size_t w = 0; w < last_heartbeat.size(); ++w) {
    if (now - last_heartbeat[w] > config.timeout) return static_cast<std::int64_t>(w);
  }
  return std::nullopt;
}

/// Heartbeats go out at multiples of the interval; the last one before a
/// crash at f is the latest multiple not after f.
inline Millis last_heartbeat_before(Millis failure, const HeartbeatConfig& config) {
  return std::floor(failure / config.interval) * config.interval;
}

/// First controller check that sees the crashed worker as silent.
inline Millis detection_time(Millis failure, const HeartbeatConfig& config) {
  config.validate();
  const Millis last = last_heartbeat_before(failure, config);
  const Millis deadline = last + config.timeout;
  const double k = std::floor((deadline - config.check_offset) / config.interval) + 1.0;
  Millis check = k * config.interval + config.check_offset;
  while (!(check - last > config.timeout)) check += config.interval;
  return check;
}

struct RecoveryStep {
  int order = 0;
  std::int64_t from = -1;
  std::int64_t to = -1;
  Bytes bytes = 0;
  Millis duration = 0;
  std::string what;
};

struct RecoveryPlan {
  std::int64_t failed_worker = 0;
  StepRef restart;
  std::vector<RecoveryStep> steps;
  Millis detection_lag = 0;
  Millis copy_time = 0;
  Millis broadcast = 0;
  Millis repair_duration = 0;
};

/// Device cache restored from a host replica on another machine: network hop, then PCIe.
inline Millis replica_copy_time(Bytes bytes, const TransportSet& transports) {
  if (bytes == 0) return 0;
  return flush(bytes, transports.network) + flush(bytes, transports.pcie);
}

/// The four recovery steps for failed worker x: (1) x+1 returns x's replica,
/// (2) x-1 re-sends its own cache so x again holds its replica, (3) restart
/// point, (4) broadcast and resume from the first stage.
inline RecoveryPlan build_recovery(const ReplicationLog& log, std::int64_t x, StepRef fallback, Bytes replica_bytes,
                                   Bytes predecessor_bytes, const TransportSet& transports, Millis detection_lag,
                                   Millis broadcast, bool parallel_copies = false) {
  const std::int64_t n = log.workers();
  RecoveryPlan plan;
  plan.failed_worker = x;
  plan.restart = restart_point(log, x, fallback);
  plan.detection_lag = detection_lag;
  plan.broadcast = broadcast;
  const Millis c1 = replica_copy_time(replica_bytes, transports);
  const Millis c2 = replica_copy_time(predecessor_bytes, transports);
  plan.steps.push_back({1, (x + 1) % n, x, replica_bytes, c1, "replica copy"});
  plan.steps.push_back({2, (x - 1 + n) % n, x, predecessor_bytes, c2, "own-cache copy"});
  plan.steps.push_back({3, -1, -1, 0, 0, "restart at " + step_label(plan.restart)});
  plan.steps.push_back({4, -1, -1, 0, broadcast, "broadcast and resume"});
  plan.copy_time = parallel_copies ? std::max(c1, c2) : c1 + c2;
  plan.repair_duration = detection_lag + plan.copy_time + broadcast;
  return plan;
}

enum class FaultTrigger { AtTime, AfterStep, AfterTokenSteps };

/// One injected crash of `stage`.
struct FaultSpec {
  std::int64_t stage = 0;
  FaultTrigger trigger = FaultTrigger::AtTime;
  Millis time = 0;
  /// AfterStep: crash right after the stage computes this step.
  StepRef step;
  /// AfterTokenSteps: crash right after the stage's n-th token step.
  std::int64_t token_steps = 0;
};

using FaultSchedule = std::vector<FaultSpec>;

}  // namespace pipesim
