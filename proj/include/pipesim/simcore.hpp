#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <limits>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "pipesim/errors.hpp"
#include "pipesim/fault_tolerance.hpp"
#include "pipesim/latency_profile.hpp"
#include "pipesim/model_memory.hpp"
#include "pipesim/plan.hpp"
#include "pipesim/report.hpp"
#include "pipesim/streamlib.hpp"
#include "pipesim/swap.hpp"
#include "pipesim/units.hpp"

namespace pipesim {

struct Request {
  std::int64_t id = 0;
  Millis arrival = 0;
  std::int64_t prompt_len = 1;
  std::int64_t new_tokens = 1;
};

/// Requests scheduled together. All members generate `new_tokens` tokens.
struct MicrobatchSpec {
  std::int64_t id = 0;
  std::vector<std::int64_t> request_ids;
  std::int64_t batch = 1;
  std::int64_t prompt_len = 1;
  std::int64_t new_tokens = 1;
  Millis arrival = 0;
};

struct Workload {
  std::vector<Request> requests;
  std::vector<MicrobatchSpec> microbatches;

  void validate() const {
    if (microbatches.empty()) throw DomainError("workload has no microbatches");
    for (std::size_t i = 0; i < microbatches.size(); ++i) {
      const auto& m = microbatches[i];
      if (m.id != static_cast<std::int64_t>(i)) throw DomainError("microbatch ids must be 0..n-1 in order");
      if (m.batch < 1 || m.prompt_len < 1 || m.new_tokens < 1) {
        throw DomainError("microbatch " + std::to_string(m.id) + " needs batch, prompt_len, new_tokens >= 1");
      }
      if (m.arrival < 0) throw DomainError("negative arrival time");
    }
  }
};

/// `count` identical microbatches of `batch` requests, all arriving at `arrival`.
inline Workload uniform_workload(std::int64_t count, std::int64_t batch, std::int64_t prompt_len,
                                 std::int64_t new_tokens, Millis arrival = 0) {
  Workload w;
  for (std::int64_t m = 0; m < count; ++m) {
    MicrobatchSpec spec{m, {}, batch, prompt_len, new_tokens, arrival};
    for (std::int64_t r = 0; r < batch; ++r) {
      const std::int64_t id = m * batch + r;
      spec.request_ids.push_back(id);
      w.requests.push_back({id, arrival, prompt_len, new_tokens});
    }
    w.microbatches.push_back(std::move(spec));
  }
  return w;
}

struct SimOptions {
  /// Activation hand-off between adjacent stages, and from the last stage back to the first.
  Millis activation_transfer_ms = 0;
  /// Process restart and reload after a crash without replication.
  Millis restart_overhead_ms = 0;
  /// Same, for a repair that restores caches from replicas.
  Millis ft_restart_overhead_ms = 0;
  Millis broadcast_ms = 0;
  bool parallel_recovery_copies = false;
  HeartbeatConfig heartbeat;
  TransportSet transports;
  /// Packing granularity of a token step's KV update in the key cache.
  Bytes replication_chunk_bytes = 16;
  bool verbose_events = false;
};

namespace detail {

enum class EventKind : int {
  StepComplete = 0,
  ReplicaAck,
  SwapDone,
  ActivationArrive,
  CacheArrive,
  PromptArrive,
  Failure,
  Detect,
  RecoveryDone,
};

inline const char* event_name(EventKind k) {
  switch (k) {
    case EventKind::StepComplete: return "step_complete";
    case EventKind::ReplicaAck: return "replica_ack";
    case EventKind::SwapDone: return "swap_done";
    case EventKind::ActivationArrive: return "activation_arrive";
    case EventKind::CacheArrive: return "cache_arrive";
    case EventKind::PromptArrive: return "prompt_arrive";
    case EventKind::Failure: return "failure";
    case EventKind::Detect: return "detect";
    case EventKind::RecoveryDone: return "recovery_done";
  }
  return "?";
}

struct Event {
  Millis time = 0;
  EventKind kind = EventKind::StepComplete;
  std::int64_t stage = -1;
  std::int64_t mb = -1;
  std::int64_t step = -1;
  /// Run id for StepComplete, epoch for everything a recovery invalidates.
  std::uint64_t token = 0;
  std::uint64_t seq = 0;
};

struct EventAfter {
  bool operator()(const Event& a, const Event& b) const {
    return std::tie(a.time, a.kind, a.stage, a.mb, a.seq) > std::tie(b.time, b.kind, b.stage, b.mb, b.seq);
  }
};

inline constexpr std::int64_t kUnlimited = std::numeric_limits<std::int64_t>::max();

class Engine {
 public:
  Engine(const Plan& plan, const ModelSpec& model, const LatencyProfile& profile, const Workload& workload,
         const FaultSchedule& faults, const SimOptions& options)
      : plan_(plan), model_(model), profile_(profile), work_(workload), faults_(faults), opt_(options),
        log_(validated_depth(plan)) {
    model_.validate();
    work_.validate();
    if (plan_.fault_tolerance) {
      if (plan_.machines_total < 2) throw ConfigError("fault tolerance needs at least two stages");
      opt_.heartbeat.validate();
    }
    build_stages();
    build_microbatches();
    for (const auto& f : faults_) {
      if (f.stage < 0 || f.stage >= static_cast<std::int64_t>(stages_.size())) {
        throw ConfigError("fault on nonexistent stage " + std::to_string(f.stage));
      }
      if (plan_.mode != PlanMode::Baseline) throw ConfigError("fault injection is modeled for baseline plans only");
      opt_.heartbeat.validate();
    }
    fired_.assign(faults_.size(), false);
  }

  static std::int64_t validated_depth(const Plan& plan) {
    plan.validate();
    return plan.pipeline_depth();
  }

  RunReport run() {
    for (const auto& m : work_.microbatches) push({m.arrival, EventKind::PromptArrive, -1, m.id, 0, 0});
    for (std::size_t i = 0; i < faults_.size(); ++i) {
      if (faults_[i].trigger == FaultTrigger::AtTime) {
        fired_[i] = true;
        push({faults_[i].time, EventKind::Failure, faults_[i].stage, -1, -1, 0});
      }
    }
    while (finished_ < static_cast<std::int64_t>(mbs_.size())) {
      if (events_.empty()) throw SimulationError(deadlock_diagnostic());
      const Millis t = events_.top().time;
      account_idle(t);
      now_ = t;
      while (!events_.empty() && events_.top().time == now_) {
        const Event e = events_.top();
        events_.pop();
        handle(e);
      }
      for (auto& s : stages_) dispatch(s);
    }
    // Replications still in flight land after the last completion.
    const Millis end = now_;
    while (!events_.empty()) {
      const Event e = events_.top();
      events_.pop();
      if (e.kind != EventKind::ReplicaAck) continue;
      now_ = e.time;
      handle(e);
    }
    now_ = end;
    return finish_report();
  }

 private:
  struct Resident {
    Millis since = 0;
    Millis ready = 0;
  };

  struct Stage {
    StageLayout layout;
    std::int64_t pipeline = 0;  // index into pipes_
    std::set<std::tuple<Millis, std::int64_t, std::int64_t>> queue;
    bool alive = true;
    bool running = false;
    StepRef current;
    Millis started = 0;
    std::uint64_t run_id = 0;
    std::optional<StepRef> waiting;
    bool swapping = false;
    std::int64_t capacity = 0;
    Bytes per_token_bytes = 0;
    std::map<std::int64_t, Resident> resident;
    Millis swap_channel_free = 0;
    std::optional<std::int64_t> pending_prefetch;
    std::int64_t outstanding = 0;
    Millis repl_channel_free = 0;
    std::map<std::int64_t, std::int64_t> last_done;
    std::int64_t token_steps_done = 0;
    std::int64_t demand = 0;  // prompt stages only
    bool seen_work = false;
    Millis tentative_idle = 0;
    StageRecord record;
  };

  struct Pipe {
    std::vector<std::int64_t> stages;
    std::int64_t slots = 0;
    std::vector<std::int64_t> slot_owner;
    std::deque<std::int64_t> waiting;
    std::int64_t inflight = 0;
    bool prompt_only = false;
    std::int64_t first_step = 0;
  };

  struct Mb {
    MicrobatchSpec spec;
    std::int64_t pipe = 0;
    std::int64_t slot = -1;
    bool admitted = false;
    bool finished = false;
    std::int64_t emitted_last = -1;
    Millis prompt_ms = 0;
    Millis token_ms = 0;
    MicrobatchRecord rec;
  };

  // ---- setup

  void build_stages() {
    const auto layout = stage_layout(plan_, model_);
    std::int64_t pipes = 1;
    if (plan_.mode == PlanMode::BaselineDP) pipes = plan_.dp_replicas;
    if (plan_.mode == PlanMode::Disaggregated) pipes = 2;
    pipes_.resize(static_cast<std::size_t>(pipes));
    for (const auto& l : layout) {
      Stage s;
      s.layout = l;
      s.pipeline = l.pipeline;
      s.per_token_bytes = checked_mul(model_.kv_bytes_per_token_per_layer(), static_cast<Bytes>(l.layers()));
      s.record.id = l.stage_id;
      s.record.role = l.role;
      s.record.pipeline = l.pipeline;
      s.record.layers = l.layers();
      pipes_[static_cast<std::size_t>(l.pipeline)].stages.push_back(l.stage_id);
      stages_.push_back(std::move(s));
    }
    for (std::size_t p = 0; p < pipes_.size(); ++p) {
      auto& pipe = pipes_[p];
      pipe.prompt_only = plan_.mode == PlanMode::Disaggregated && p == 0;
      pipe.first_step = plan_.mode == PlanMode::Disaggregated && p == 1 ? 1 : 0;
      pipe.slots = pipe.prompt_only ? kUnlimited : static_cast<std::int64_t>(pipe.stages.size());
      if (!pipe.prompt_only) pipe.slot_owner.assign(static_cast<std::size_t>(pipe.slots), -1);
      const bool swap = plan_.swapping && !pipe.prompt_only && pipe.slots >= 2;
      for (auto id : pipe.stages) {
        stages_[static_cast<std::size_t>(id)].swapping = swap;
        stages_[static_cast<std::size_t>(id)].capacity = swap ? device_capacity(pipe.slots) : 0;
      }
    }
  }

  void build_microbatches() {
    std::vector<double> work(pipes_.size(), 0.0);
    for (const auto& spec : work_.microbatches) {
      Mb m;
      m.spec = spec;
      if (plan_.mode == PlanMode::BaselineDP) m.pipe = spec.id % plan_.dp_replicas;
      m.prompt_ms = profile_.prompt_time(spec.batch, spec.prompt_len);
      m.token_ms = profile_.token_time(spec.batch);
      m.rec.id = spec.id;
      m.rec.batch = spec.batch;
      m.rec.prompt_len = spec.prompt_len;
      m.rec.new_tokens = spec.new_tokens;
      m.rec.pipeline = m.pipe;
      m.rec.arrival = spec.arrival;
      work[static_cast<std::size_t>(m.pipe)] += static_cast<double>(spec.batch * spec.new_tokens);
      mbs_.push_back(std::move(m));
    }
    if (plan_.mode == PlanMode::BaselineDP) {
      double total = 0, peak = 0;
      for (double w : work) {
        total += w;
        peak = std::max(peak, w);
      }
      dp_imbalance_ = total > 0 ? peak / (total / static_cast<double>(work.size())) : 1.0;
    }
  }

  // ---- helpers

  Stage& st(std::int64_t id) { return stages_[static_cast<std::size_t>(id)]; }
  Mb& mb(std::int64_t id) { return mbs_[static_cast<std::size_t>(id)]; }
  Pipe& pipe_of(const Stage& s) { return pipes_[static_cast<std::size_t>(s.pipeline)]; }

  void push(Event e) {
    e.seq = seq_++;
    events_.push(e);
  }

  Millis duration(const Stage& s, const Mb& m, std::int64_t step) const {
    const double k = static_cast<double>(s.layout.layers());
    const double l = static_cast<double>(model_.layers);
    if (step == 0) {
      const double scale = s.layout.role == StageRole::PromptOnly ? plan_.stream_overhead : 1.0;
      return scale * m.prompt_ms * k / l;
    }
    return m.token_ms * k / l;
  }

  bool is_last(const Stage& s) { return s.layout.position + 1 == static_cast<std::int64_t>(pipe_of(s).stages.size()); }

  bool demand(Stage& s) {
    if (s.layout.role == StageRole::PromptOnly) return s.demand > 0;
    return pipe_of(s).inflight > 0;
  }

  void enqueue(std::int64_t stage, Millis ready, std::int64_t m, std::int64_t step) {
    auto& s = st(stage);
    s.queue.emplace(ready, m, step);
    s.seen_work = true;
  }

  void forward(std::int64_t stage, std::int64_t m, std::int64_t step) {
    if (opt_.activation_transfer_ms > 0) {
      push({now_ + opt_.activation_transfer_ms, EventKind::ActivationArrive, stage, m, step, epoch_});
    } else {
      enqueue(stage, now_, m, step);
    }
  }

  void trace(const Event& e) {
    ++event_counts_[event_name(e.kind)];
    if (!opt_.verbose_events) return;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%.6f %s stage=%lld mb=%lld step=%lld", e.time, event_name(e.kind),
                  static_cast<long long>(e.stage), static_cast<long long>(e.mb), static_cast<long long>(e.step));
    event_log_.emplace_back(buf);
  }

  void account_idle(Millis until) {
    const Millis dt = until - now_;
    if (dt <= 0 || paused_) return;
    for (auto& s : stages_) {
      if (s.alive && !s.running && s.seen_work && demand(s)) s.tentative_idle += dt;
    }
  }

  // ---- admission

  void admit(Pipe& p) {
    if (paused_) return;
    while (p.inflight < p.slots && !p.waiting.empty()) {
      const auto id = p.waiting.front();
      p.waiting.pop_front();
      auto& m = mb(id);
      if (!p.prompt_only) {
        const auto free = std::find(p.slot_owner.begin(), p.slot_owner.end(), -1);
        m.slot = static_cast<std::int64_t>(free - p.slot_owner.begin());
        *free = id;
      } else {
        for (auto sid : p.stages) ++st(sid).demand;
      }
      ++p.inflight;
      if (!m.admitted) {
        m.admitted = true;
        m.rec.admitted = now_;
      }
      enqueue(p.stages.front(), now_, id, p.first_step);
    }
  }

  // ---- swapping

  bool has_cache(const Stage& s, std::int64_t m) const { return s.last_done.count(m) != 0; }

  void evict(Stage& s, std::int64_t m) {
    const auto it = s.resident.find(m);
    if (it == s.resident.end()) return;
    residency_.push_back({s.layout.stage_id, m, it->second.since, now_});
    s.resident.erase(it);
  }

  /// Make `m` device-resident at `s`; returns when it will be, or nothing if
  /// every slot is pinned by an in-flight fetch or the running step.
  std::optional<Millis> ensure_resident(Stage& s, std::int64_t m) {
    if (const auto it = s.resident.find(m); it != s.resident.end()) return it->second.ready;
    while (static_cast<std::int64_t>(s.resident.size()) >= s.capacity) {
      std::optional<std::int64_t> victim;
      for (const auto& [id, r] : s.resident) {
        if ((s.running && id == s.current.microbatch) || r.ready > now_) continue;
        victim = id;
        break;
      }
      if (!victim) return std::nullopt;
      evict(s, *victim);
    }
    Millis ready = now_;
    if (has_cache(s, m)) {
      const auto& x = mb(m);
      const std::int64_t tokens = x.spec.prompt_len + s.last_done.at(m);
      const Millis cost = step_transfer_time(tokens, x.spec.batch, s.per_token_bytes, opt_.transports.pcie.bytes_per_ms);
      if (cost > 0) {
        ready = std::max(now_, s.swap_channel_free) + cost;
        s.swap_channel_free = ready;
      }
    }
    s.resident[m] = {now_, ready};
    if (ready > now_) push({ready, EventKind::SwapDone, s.layout.stage_id, m, -1, epoch_});
    return ready;
  }

  void prefetch_next(Stage& s, std::int64_t running_mb) {
    const auto& p = pipe_of(s);
    const auto slot = mb(running_mb).slot;
    if (slot < 0) return;
    const auto next = p.slot_owner[static_cast<std::size_t>((slot + 1) % p.slots)];
    if (next < 0 || next == running_mb || !has_cache(s, next) || s.resident.count(next)) return;
    if (static_cast<std::int64_t>(s.resident.size()) < s.capacity) {
      ensure_resident(s, next);
    } else {
      s.pending_prefetch = next;
    }
  }

  // ---- replication

  Millis token_replication_cost(const Stage& s, std::int64_t batch) {
    const auto key = std::make_pair(s.layout.stage_id, batch);
    if (const auto it = token_repl_cache_.find(key); it != token_repl_cache_.end()) return it->second;
    const auto region = token_step_region(model_, s.layout.layers(), batch, opt_.replication_chunk_bytes);
    const Millis c = scatter_cost(region, opt_.transports.pcie, true, opt_.transports.device_local) +
                     flush(region.total_bytes(), opt_.transports.network);
    token_repl_cache_[key] = c;
    return c;
  }

  Millis prompt_replication_tail(const Stage& s, const Mb& m) {
    const auto key = std::make_tuple(s.layout.stage_id, m.spec.batch, m.spec.prompt_len);
    if (const auto it = prompt_repl_cache_.find(key); it != prompt_repl_cache_.end()) return it->second;
    const std::int64_t n = s.layout.layers();
    const Millis per_layer = duration(s, m, 0) / static_cast<double>(n);
    std::vector<ComputeInterval> timeline;
    for (std::int64_t k = 0; k < n; ++k) {
      timeline.push_back({per_layer * static_cast<double>(k), per_layer * static_cast<double>(k + 1)});
    }
    const auto stream = prompt_stage_stream(model_, n, m.spec.batch, m.spec.prompt_len, opt_.transports);
    const Millis tail = overlap_schedule(stream, timeline);
    prompt_repl_cache_[key] = tail;
    return tail;
  }

  void replicate(Stage& s, const Mb& m, std::int64_t step) {
    log_.note_completed(s.layout.stage_id, {m.spec.id, step});
    const Millis cost = step == 0 ? prompt_replication_tail(s, m) : token_replication_cost(s, m.spec.batch);
    const Millis ack = std::max(now_, s.repl_channel_free) + cost;
    s.repl_channel_free = ack;
    ++s.outstanding;
    push({ack, EventKind::ReplicaAck, s.layout.stage_id, m.spec.id, step, epoch_});
  }

  // ---- dispatch

  void dispatch(Stage& s) {
    if (!s.alive || paused_ || s.running) return;
    if (plan_.fault_tolerance && s.outstanding > 1) return;
    if (s.waiting) {
      const auto r = ensure_resident(s, s.waiting->microbatch);
      if (!r || *r > now_) return;
      const auto w = *s.waiting;
      s.waiting.reset();
      start(s, w);
      return;
    }
    if (s.queue.empty()) return;
    const auto [ready, m, step] = *s.queue.begin();
    if (ready > now_) return;
    s.queue.erase(s.queue.begin());
    if (s.swapping) {
      const auto r = ensure_resident(s, m);
      if (!r || *r > now_) {
        s.waiting = StepRef{m, step};
        return;
      }
    }
    start(s, {m, step});
  }

  void start(Stage& s, StepRef ref) {
    s.record.bubble += s.tentative_idle;
    s.tentative_idle = 0;
    s.running = true;
    s.current = ref;
    s.started = now_;
    ++s.run_id;
    push({now_ + duration(s, mb(ref.microbatch), ref.step), EventKind::StepComplete, s.layout.stage_id,
          ref.microbatch, ref.step, s.run_id});
    if (s.swapping) prefetch_next(s, ref.microbatch);
  }

  void abort_running(Stage& s) {
    if (!s.running) return;
    s.record.occupancy.push_back({s.started, now_, s.current.microbatch, s.current.step, true});
    s.record.busy += now_ - s.started;
    s.running = false;
    ++s.run_id;
  }

  // ---- event handlers

  void handle(const Event& e) {
    trace(e);
    switch (e.kind) {
      case EventKind::StepComplete: on_step_complete(e); break;
      case EventKind::ReplicaAck: on_ack(e); break;
      case EventKind::SwapDone: break;
      case EventKind::ActivationArrive:
        if (e.token == epoch_) enqueue(e.stage, now_, e.mb, e.step);
        break;
      case EventKind::CacheArrive: {
        auto& p = pipes_[1];
        mb(e.mb).pipe = 1;
        p.waiting.push_back(e.mb);
        admit(p);
        break;
      }
      case EventKind::PromptArrive: {
        auto& p = pipes_[static_cast<std::size_t>(mb(e.mb).pipe)];
        p.waiting.push_back(e.mb);
        admit(p);
        break;
      }
      case EventKind::Failure: on_failure(e); break;
      case EventKind::Detect: on_detect(); break;
      case EventKind::RecoveryDone: on_recovered(); break;
    }
  }

  void on_step_complete(const Event& e) {
    auto& s = st(e.stage);
    if (!s.running || e.token != s.run_id) return;
    s.running = false;
    s.record.occupancy.push_back({s.started, now_, e.mb, e.step, false});
    s.record.busy += now_ - s.started;
    auto& m = mb(e.mb);
    s.last_done[e.mb] = e.step;
    if (e.step == 0) {
      ++s.record.prompt_steps;
      if (s.layout.role == StageRole::PromptOnly) --s.demand;
    } else {
      ++s.record.token_steps;
      ++s.token_steps_done;
    }
    if (s.swapping) {
      evict(s, e.mb);
      if (s.pending_prefetch) {
        const auto y = *s.pending_prefetch;
        s.pending_prefetch.reset();
        if (!mb(y).finished && has_cache(s, y) && !s.resident.count(y) &&
            static_cast<std::int64_t>(s.resident.size()) < s.capacity) {
          ensure_resident(s, y);
        }
      }
    }
    if (plan_.fault_tolerance) replicate(s, m, e.step);
    route(s, m, e.step);
    check_triggers(s, e.mb, e.step);
  }

  void route(Stage& s, Mb& m, std::int64_t step) {
    auto& p = pipe_of(s);
    if (!is_last(s)) {
      forward(p.stages[static_cast<std::size_t>(s.layout.position + 1)], m.spec.id, step);
      return;
    }
    m.emitted_last = step;
    m.rec.emitted.push_back(step);
    if (failure_active_) ++emitted_during_detection_;
    if (p.prompt_only) {
      --p.inflight;
      push({now_ + opt_.activation_transfer_ms, EventKind::CacheArrive, -1, m.spec.id, step, epoch_});
      return;
    }
    if (step < m.spec.new_tokens) {
      forward(p.stages.front(), m.spec.id, step + 1);
      return;
    }
    m.finished = true;
    m.rec.completion = now_;
    ++finished_;
    p.slot_owner[static_cast<std::size_t>(m.slot)] = -1;
    m.slot = -1;
    --p.inflight;
    for (auto sid : p.stages) {
      auto& x = st(sid);
      evict(x, m.spec.id);
      if (x.pending_prefetch == m.spec.id) x.pending_prefetch.reset();
    }
    admit(p);
  }

  void check_triggers(const Stage& s, std::int64_t m, std::int64_t step) {
    for (std::size_t i = 0; i < faults_.size(); ++i) {
      const auto& f = faults_[i];
      if (fired_[i] || f.stage != s.layout.stage_id) continue;
      const bool hit = (f.trigger == FaultTrigger::AfterStep && f.step == StepRef{m, step}) ||
                       (f.trigger == FaultTrigger::AfterTokenSteps && step > 0 && s.token_steps_done == f.token_steps);
      if (hit) {
        fired_[i] = true;
        push({now_, EventKind::Failure, f.stage, -1, -1, 0});
      }
    }
  }

  void on_ack(const Event& e) {
    if (e.token != epoch_) return;
    auto& s = st(e.stage);
    --s.outstanding;
    const auto holder = log_.replica_holder(e.stage);
    if (!s.alive || !st(holder).alive) return;
    log_.record_replication(e.stage, e.mb, e.step, now_);
  }

  void on_failure(const Event& e) {
    if (failure_active_) {
      throw SimulationError("unrecoverable: stage " + std::to_string(e.stage) + " failed at " + std::to_string(now_) +
                            " while stage " + std::to_string(failed_stage_) + " was still being repaired");
    }
    auto& s = st(e.stage);
    failure_active_ = true;
    failed_stage_ = e.stage;
    failure_time_ = now_;
    emitted_during_detection_ = 0;
    fallback_ = StepRef{0, 0};
    if (s.running) {
      fallback_ = s.current;
    } else if (s.waiting) {
      fallback_ = *s.waiting;
    } else if (!s.queue.empty()) {
      fallback_ = {std::get<1>(*s.queue.begin()), std::get<2>(*s.queue.begin())};
    }
    abort_running(s);
    s.alive = false;
    lag_at_failure_ = plan_.fault_tolerance ? log_.lag_steps(e.stage) : 0;
    push({detection_time(now_, opt_.heartbeat), EventKind::Detect, e.stage, -1, -1, 0});
  }

  void on_detect() {
    paused_ = true;
    for (auto& s : stages_) abort_running(s);
    const std::int64_t x = failed_stage_;
    RecoveryRecord rec;
    rec.failed_stage = x;
    rec.failure = failure_time_;
    rec.detected = now_;
    rec.fault_tolerant = plan_.fault_tolerance;
    rec.lag_steps = lag_at_failure_;
    rec.emitted_during_detection = emitted_during_detection_;
    rec.restart = plan_.fault_tolerance ? restart_point(log_, x, fallback_) : StepRef{0, 0};
    resume_.clear();
    const auto& pipe = pipes_.front();
    const auto n = static_cast<std::int64_t>(pipe.stages.size());
    Bytes replica_bytes = 0, predecessor_bytes = 0;
    for (auto& m : mbs_) {
      if (!m.admitted || m.finished) continue;
      const std::int64_t e = m.emitted_last;
      std::int64_t resume = 0;
      if (plan_.fault_tolerance) {
        const std::int64_t a = log_.highest(x, m.spec.id).value_or(-1);
        resume = std::min(a, e) + 1;
        if (a >= 0) {
          replica_bytes += checked_mul(static_cast<Bytes>(m.spec.batch * (m.spec.prompt_len + a)),
                                       st(x).per_token_bytes);
        }
        const auto& pred = st((x - 1 + n) % n);
        if (const auto it = pred.last_done.find(m.spec.id); it != pred.last_done.end()) {
          const std::int64_t held = std::min(it->second, resume - 1);
          if (held >= 0) {
            predecessor_bytes += checked_mul(static_cast<Bytes>(m.spec.batch * (m.spec.prompt_len + held)),
                                             pred.per_token_bytes);
          }
        }
      }
      const std::int64_t redone_tokens = std::max<std::int64_t>(0, e - std::max<std::int64_t>(resume, 1) + 1);
      const bool redo_prompt = resume == 0 && e >= 0;
      rec.redone_token_steps += redone_tokens;
      rec.redone_prompt_steps += redo_prompt ? 1 : 0;
      ++rec.affected_microbatches;
      m.rec.redone_token_steps += redone_tokens;
      ++m.rec.restarts;
      std::erase_if(m.rec.emitted, [resume](std::int64_t step) { return step >= resume; });
      m.emitted_last = resume - 1;
      log_.truncate(m.spec.id, resume - 1);
      resume_.emplace_back(m.spec.id, resume);
    }
    if (plan_.fault_tolerance) {
      const auto plan = build_recovery(log_, x, fallback_, replica_bytes, predecessor_bytes, opt_.transports,
                                       now_ - failure_time_, opt_.broadcast_ms, opt_.parallel_recovery_copies);
      rec.copy_time = plan.copy_time;
      rec.repaired = failure_time_ + plan.repair_duration + opt_.ft_restart_overhead_ms;
    } else {
      rec.repaired = now_ + opt_.restart_overhead_ms;
    }
    ++epoch_;
    recoveries_.push_back(rec);
    push({rec.repaired, EventKind::RecoveryDone, x, -1, -1, 0});
  }

  void on_recovered() {
    for (auto& s : stages_) {
      s.alive = true;
      s.queue.clear();
      s.waiting.reset();
      s.pending_prefetch.reset();
      for (auto it = s.resident.begin(); it != s.resident.end();) {
        residency_.push_back({s.layout.stage_id, it->first, it->second.since, now_});
        it = s.resident.erase(it);
      }
      s.swap_channel_free = now_;
      s.outstanding = 0;
      s.repl_channel_free = now_;
      s.tentative_idle = 0;
      for (const auto& [id, resume] : resume_) {
        const auto it = s.last_done.find(id);
        if (it == s.last_done.end()) continue;
        if (resume == 0) {
          s.last_done.erase(it);
        } else {
          it->second = std::min(it->second, resume - 1);
        }
        if (plan_.fault_tolerance) log_.resync(s.layout.stage_id, id, resume == 0 ? -1 : it->second);
      }
    }
    log_.clear_pending();
    auto& pipe = pipes_.front();
    for (const auto& [id, resume] : resume_) enqueue(pipe.stages.front(), now_, id, resume);
    paused_ = false;
    failure_active_ = false;
    for (auto& p : pipes_) admit(p);
  }

  // ---- diagnostics and report

  std::string deadlock_diagnostic() {
    std::string msg = "deadlock at " + std::to_string(now_) + ": " +
                      std::to_string(static_cast<std::int64_t>(mbs_.size()) - finished_) + " microbatches unfinished";
    for (const auto& s : stages_) {
      msg += "; stage " + std::to_string(s.layout.stage_id) + (s.alive ? "" : " (dead)");
      if (s.waiting) msg += " waits for cache of mb " + std::to_string(s.waiting->microbatch);
      if (!s.queue.empty()) {
        msg += " next mb " + std::to_string(std::get<1>(*s.queue.begin())) + " step " +
               std::to_string(std::get<2>(*s.queue.begin()));
      }
      if (s.outstanding > 1) msg += " blocked on " + std::to_string(s.outstanding) + " unacked replications";
    }
    return msg;
  }

  RunReport finish_report() {
    RunReport r;
    r.plan_label = plan_.label();
    r.machines = plan_.machines_total;
    for (auto& s : stages_) {
      for (const auto& [id, res] : s.resident) residency_.push_back({s.layout.stage_id, id, res.since, now_});
      s.resident.clear();
      r.stages.push_back(std::move(s.record));
    }
    for (auto& m : mbs_) {
      r.makespan = std::max(r.makespan, m.rec.completion);
      r.request_tokens_emitted +=
          m.spec.batch * static_cast<std::int64_t>(std::count_if(m.rec.emitted.begin(), m.rec.emitted.end(),
                                                                  [](std::int64_t s) { return s > 0; }));
      r.microbatches.push_back(std::move(m.rec));
    }
    std::map<std::int64_t, std::int64_t> owner;
    for (const auto& m : work_.microbatches) {
      for (auto id : m.request_ids) owner[id] = m.id;
    }
    for (const auto& q : work_.requests) {
      const auto it = owner.find(q.id);
      if (it == owner.end()) continue;
      const auto& rec = r.microbatches[static_cast<std::size_t>(it->second)];
      RequestRecord rr{q.id, it->second, q.arrival, q.prompt_len, rec.new_tokens, rec.completion, 0};
      rr.normalized_latency = (rr.completion - rr.arrival) / static_cast<double>(rr.tokens);
      r.requests.push_back(rr);
    }
    std::sort(residency_.begin(), residency_.end(), [](const ResidencyInterval& a, const ResidencyInterval& b) {
      return std::tie(a.stage, a.start, a.microbatch, a.end) < std::tie(b.stage, b.start, b.microbatch, b.end);
    });
    r.residency = std::move(residency_);
    r.acks = log_.timeline();
    r.recoveries = recoveries_;
    for (const auto& rec : recoveries_) {
      r.redone_token_steps += rec.redone_token_steps;
      r.redone_prompt_steps += rec.redone_prompt_steps;
    }
    r.event_counts = event_counts_;
    r.event_log = std::move(event_log_);
    r.dp_imbalance = dp_imbalance_;
    r.round_width = plan_.mode == PlanMode::Disaggregated ? plan_.token_depth : plan_.machines_total;
    return r;
  }

  Plan plan_;
  ModelSpec model_;
  const LatencyProfile& profile_;
  const Workload& work_;
  FaultSchedule faults_;
  SimOptions opt_;

  std::vector<Stage> stages_;
  std::vector<Pipe> pipes_;
  std::vector<Mb> mbs_;
  std::priority_queue<Event, std::vector<Event>, EventAfter> events_;
  std::uint64_t seq_ = 0;
  std::uint64_t epoch_ = 1;
  Millis now_ = 0;
  std::int64_t finished_ = 0;
  bool paused_ = false;

  ReplicationLog log_;
  std::vector<bool> fired_;
  bool failure_active_ = false;
  std::int64_t failed_stage_ = -1;
  Millis failure_time_ = 0;
  StepRef fallback_;
  std::int64_t lag_at_failure_ = 0;
  std::int64_t emitted_during_detection_ = 0;
  std::vector<std::pair<std::int64_t, std::int64_t>> resume_;
  std::vector<RecoveryRecord> recoveries_;

  std::vector<ResidencyInterval> residency_;
  std::map<std::string, std::int64_t> event_counts_;
  std::vector<std::string> event_log_;
  double dp_imbalance_ = 1.0;
  std::map<std::pair<std::int64_t, std::int64_t>, Millis> token_repl_cache_;
  std::map<std::tuple<std::int64_t, std::int64_t, std::int64_t>, Millis> prompt_repl_cache_;
};

}  // namespace detail

/// Run `workload` under `plan` to completion. Deterministic: the same inputs
/// always give the same report.
inline RunReport simulate(const Plan& plan, const ModelSpec& model, const LatencyProfile& profile,
                          const Workload& workload, const FaultSchedule& faults = {},
                          const SimOptions& options = {}) {
  return detail::Engine(plan, model, profile, workload, faults, options).run();
}

}  // namespace pipesim
