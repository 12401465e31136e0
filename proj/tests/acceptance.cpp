// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria.

#include <algorithm>
#include <cstdarg>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pipesim/pipesim.hpp"

using namespace pipesim;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string title;
  double time_limit_s;  // 0 = none
  std::function<Outcome()> run;
};

std::string str(const char* fmt_str, ...) __attribute__((format(printf, 1, 2)));
std::string str(const char* fmt_str, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, fmt_str);
  std::vsnprintf(buf, sizeof buf, fmt_str, ap);
  va_end(ap);
  return buf;
}

ModelSpec model840() {
  ModelSpec m;
  m.name = "divisible";
  m.layers = 840;
  m.hidden = 64;
  m.max_seq = 8192;
  return m;
}

Plan baseline(std::int64_t d, bool ft = false) {
  Plan p;
  p.machines_total = d;
  p.fault_tolerance = ft;
  return p;
}

Plan disaggregated(std::int64_t dp, std::int64_t dt, double m) {
  Plan p;
  p.mode = PlanMode::Disaggregated;
  p.machines_total = dp + dt;
  p.prompt_depth = dp;
  p.token_depth = dt;
  p.stream_overhead = m;
  return p;
}

Workload workload_from(const std::vector<std::int64_t>& tokens, std::int64_t batch, std::int64_t prompt) {
  Workload w;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto id = static_cast<std::int64_t>(i);
    MicrobatchSpec m{id, {}, batch, prompt, tokens[i], 0};
    for (std::int64_t r = 0; r < batch; ++r) {
      m.request_ids.push_back(id * batch + r);
      w.requests.push_back({id * batch + r, 0, prompt, tokens[i]});
    }
    w.microbatches.push_back(m);
  }
  return w;
}

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

// ---- 1

Outcome closed_form_equivalence() {
  std::mt19937_64 rng(1001);
  std::uniform_int_distribution<std::int64_t> depth(1, 8), tokens(1, 200);
  std::uniform_real_distribution<double> ratio(1, 50), tok(0.5, 5);
  double worst = 0;
  for (int i = 0; i < 50; ++i) {
    const auto d = depth(rng), n = tokens(rng);
    const double t = tok(rng), y = t * ratio(rng);
    const auto dd = static_cast<double>(d);
    const auto r = simulate(baseline(d), model840(), constant_profile(y * dd, t * dd), uniform_workload(4 * d, 1, 8, n));
    const double err = rel(steady_state_inverse_throughput(r), baseline_inverse_throughput(d, y, t, n).inverse_throughput_baseline);
    worst = std::max(worst, err);
  }
  return {worst < 1e-6, str("50 tuples, worst relative error %.3g", worst)};
}

// ---- 2

Outcome split_optimum() {
  std::mt19937_64 rng(1002);
  std::uniform_int_distribution<std::int64_t> depth(2, 16), tokens(1, 1000);
  std::uniform_real_distribution<double> tok(0.1, 10), ratio(1, 120), mdist(1.0, 2.0);
  double worst_balance = 0;
  int bad_splits = 0, cases = 0;
  for (int i = 0; i < 2000; ++i) {
    const auto d = depth(rng), n = tokens(rng);
    const double t = tok(rng), y = t * ratio(rng), m = mdist(rng);
    const double dt = continuous_token_depth(d, y, t, n, m);
    const double it = n * d * t / dt, ip = m * d * y / (d - dt);
    worst_balance = std::max(worst_balance, std::abs(it - ip) / ip);
    const auto part = disagg_partition(d, y, t, n, m);
    const double chosen = std::max(token_side_inverse_throughput(d, part.token_depth, t, n),
                                   prompt_side_inverse_throughput(d, part.prompt_depth, y, m));
    for (std::int64_t alt = 1; alt < d; ++alt) {
      const double other = std::max(token_side_inverse_throughput(d, alt, t, n),
                                    prompt_side_inverse_throughput(d, d - alt, y, m));
      if (chosen > other * (1 + 1e-12)) ++bad_splits;
    }
    ++cases;
  }
  return {worst_balance < 1e-9 && bad_splits == 0,
          str("%d tuples, worst |I_t - I_p|/I_p %.3g, %d splits beaten by an alternative", cases, worst_balance,
              bad_splits)};
}

// ---- 3

Outcome benefit_condition() {
  std::mt19937_64 rng(1003);
  std::uniform_int_distribution<std::int64_t> depth(16, 32), tokens(10, 100);
  std::uniform_real_distribution<double> ratio(10, 100), mdist(1.0, 2.0);
  const double t = 1.0;
  int beneficial = 0, exceptions = 0, unexplained = 0, draws = 0;
  std::vector<std::string> log;
  while (beneficial < 150 && draws < 4000) {
    ++draws;
    const auto d = depth(rng), n = tokens(rng);
    const double y = ratio(rng) * t, m = mdist(rng);
    if (!disagg_beneficial(d, y, t, m)) continue;
    ++beneficial;
    const auto part = disagg_partition(d, y, t, n, m);
    const auto dd = static_cast<double>(d);
    const auto profile = constant_profile(y * dd, t * dd);
    const auto work = uniform_workload(3 * d, 1, 8, n);
    const double base = steady_state_inverse_throughput(simulate(baseline(d), model840(), profile, work));
    const double dis = steady_state_inverse_throughput(
        simulate(disaggregated(part.prompt_depth, part.token_depth, m), model840(), profile, work));
    if (dis <= base * (1 + 1e-9)) continue;
    const double dt = part.token_depth_continuous;
    const double continuous = std::max(n * dd * t / dt, m * dd * y / (dd - dt));
    if (continuous < base) {
      ++exceptions;
      log.push_back(str("    rounding exception: D=%lld Y/t=%.3f N=%lld m=%.4f split=(%lldp, %lldt) D_t*=%.3f "
                        "disagg=%.4f baseline=%.4f",
                        static_cast<long long>(d), y / t, static_cast<long long>(n), m,
                        static_cast<long long>(part.prompt_depth), static_cast<long long>(part.token_depth), dt, dis,
                        base));
    } else {
      ++unexplained;
      log.push_back(str("    violation: D=%lld Y/t=%.3f N=%lld m=%.4f", static_cast<long long>(d), y / t,
                        static_cast<long long>(n), m));
    }
  }
  for (const auto& l : log) std::printf("%s\n", l.c_str());
  const double rate = beneficial ? static_cast<double>(exceptions) / beneficial : 1.0;
  return {beneficial > 0 && unexplained == 0 && rate < 0.10,
          str("%d beneficial cases, %d rounding exceptions (%.1f%%), %d violations", beneficial, exceptions,
              100 * rate, unexplained)};
}

// ---- 4

Outcome plans_fit_memory() {
  std::mt19937_64 rng(1004);
  std::uniform_int_distribution<std::int64_t> layers(2, 48), hidden_k(2, 32), machines(1, 6), prompt(16, 512),
      tokens(4, 64), count(4, 12);
  std::uniform_real_distribution<double> mem_scale(0.05, 1.5);
  int emitted = 0, rejected = 0, violations = 0;
  for (int i = 0; i < 200; ++i) {
    ModelSpec model;
    model.layers = layers(rng);
    model.hidden = 128 * hidden_k(rng);
    model.max_seq = 1024;
    ClusterSpec cluster;
    cluster.machines = machines(rng);
    const auto p = prompt(rng), n = tokens(rng);
    const Bytes whole = model.attn_weight_bytes() * static_cast<Bytes>(model.layers) +
                        kv_cache_bytes(model, 4, p + n) * 4;
    cluster.memory_bytes = static_cast<Bytes>(static_cast<double>(whole) * mem_scale(rng)) + 1;
    SearchSpace space;
    space.microbatch_sizes = {1, 2, 4};
    space.swapping = {false, true};
    space.stream_overhead = 1.0;
    space.threads = 1;
    Trace trace = uniform_trace(count(rng), p, n);
    const auto result = enumerate_plans(cluster, model, constant_profile(20, 2), trace, space);
    rejected += static_cast<int>(result.rejected.size());
    for (const auto& c : result.ranked) {
      ++emitted;
      const auto& plan = c.plan;
      const auto depth = plan.pipeline_depth();
      const std::int64_t resident = plan.swapping && depth >= 2 ? (depth > 2 ? 2 : 1) : depth;
      const Bytes per_token_layer = 2 * static_cast<Bytes>(model.hidden) * static_cast<Bytes>(model.element_bytes);
      for (const auto& s : stage_layout(plan, model)) {
        const Bytes per_layer =
            s.role == StageRole::PromptOnly
                ? per_token_layer * static_cast<Bytes>(plan.microbatch_size * p)
                : per_token_layer * static_cast<Bytes>(plan.microbatch_size * (p + n) * resident);
        if (!stage_fits(s.layers(), model, per_layer * static_cast<Bytes>(s.layers()), cluster.memory_bytes)) {
          ++violations;
        }
      }
    }
  }
  return {violations == 0 && emitted > 0,
          str("200 clusters, %d plans emitted, %d rejected, %d stage overcommits", emitted, rejected, violations)};
}

// ---- 5

Outcome swap_analysis() {
  bool ok = true;
  const auto worked = swap_beneficial(10, 1, 2'000'000, 2'000'000.0, 20, 0);
  ok = ok && worked.rhs == 265 && worked.lhs == 400 && worked.beneficial;
  std::mt19937_64 rng(1005);
  std::uniform_real_distribution<double> t(0.5, 30), bw(1e2, 1e6), prompt(0, 2000);
  std::uniform_int_distribution<std::int64_t> b(1, 32), n(1, 400), p(0, 1000);
  std::uniform_int_distribution<Bytes> c(1, 8192);
  int yes = 0, no = 0, mismatch = 0;
  for (int i = 0; i < 100; ++i) {
    const double tt = t(rng), pcie = bw(rng);
    const auto bb = b(rng), nn = n(rng), pp = p(rng);
    const Bytes cc = c(rng);
    double lhs = 2.0 * static_cast<double>(nn) * tt, rhs = 0;
    for (std::int64_t k = pp; k <= nn + pp; ++k) {
      const double transf = static_cast<double>(k) * static_cast<double>(bb) * static_cast<double>(cc) / pcie;
      rhs += transf > tt ? transf : tt;
    }
    const auto ineq = swap_beneficial(tt, bb, cc, pcie, nn, pp);
    const auto thr = simulate_swapping_throughput({4, bb, cc, 0, pcie}, tt, nn, pp, prompt(rng));
    if (ineq.lhs != lhs || ineq.rhs != rhs) ++mismatch;
    if (ineq.beneficial != (thr.ratio - 1.0 >= 0)) ++mismatch;
    (ineq.beneficial ? yes : no)++;
  }
  return {ok && mismatch == 0,
          str("worked example RHS=%g LHS=%g; 100 sets (%d beneficial, %d not), %d mismatches", worked.rhs, worked.lhs,
              yes, no, mismatch)};
}

// ---- 6

Outcome swap_residency() {
  int violations = 0, uncovered = 0;
  std::size_t intervals = 0;
  for (std::int64_t depth : {4, 2}) {
    Plan plan = baseline(depth);
    plan.swapping = true;
    SimOptions opt;
    opt.transports.pcie.bytes_per_ms = 5e4;
    const auto r = simulate(plan, model840(), constant_profile(160, 16), uniform_workload(depth, 4, 64, 8), {}, opt);
    const int cap = depth > 2 ? 2 : 1;
    intervals += r.residency.size();
    for (std::int64_t s = 0; s < depth; ++s) {
      std::vector<std::pair<Millis, int>> edges;
      for (const auto& iv : r.residency) {
        if (iv.stage != s) continue;
        edges.emplace_back(iv.start, +1);
        edges.emplace_back(iv.end, -1);
      }
      std::sort(edges.begin(), edges.end());
      int live = 0;
      for (const auto& e : edges) {
        live += e.second;
        if (live > cap) ++violations;
      }
      for (const auto& o : r.stages[static_cast<std::size_t>(s)].occupancy) {
        if (o.step == 0) continue;
        const bool covered = std::any_of(r.residency.begin(), r.residency.end(), [&](const ResidencyInterval& iv) {
          return iv.stage == s && iv.microbatch == o.microbatch && iv.start <= o.start && iv.end >= o.end;
        });
        if (!covered) ++uncovered;
      }
    }
  }
  return {violations == 0 && uncovered == 0 && intervals > 0,
          str("%zu residency intervals; %d over-budget instants, %d token steps without a resident cache", intervals,
              violations, uncovered)};
}

// ---- 7

struct Injection {
  FaultSpec fault;
  Millis at = 0;
};

// Earliest step the failed stage completed whose replica never landed, from the
// raw occupancy log and ack timeline; the step running at the crash otherwise.
std::optional<StepRef> brute_force_restart(const RunReport& r, std::int64_t x, Millis f) {
  std::set<std::pair<std::int64_t, std::int64_t>> acked;
  for (const auto& a : r.acks) {
    if (a.worker == x && a.time <= f) acked.insert({a.microbatch, a.step});
  }
  std::vector<OccupancyInterval> done;
  std::optional<StepRef> running;
  for (const auto& o : r.stages[static_cast<std::size_t>(x)].occupancy) {
    if (o.end > f) continue;
    if (o.aborted) {
      if (o.end == f) running = StepRef{o.microbatch, o.step};
      continue;
    }
    done.push_back(o);
  }
  std::stable_sort(done.begin(), done.end(), [](const auto& a, const auto& b) { return a.end < b.end; });
  for (const auto& o : done) {
    if (!acked.count({o.microbatch, o.step})) return StepRef{o.microbatch, o.step};
  }
  return running;
}

Outcome recovery_correctness() {
  const auto model = model840();
  const auto profile = constant_profile(80, 8);
  const auto work = workload_from({30, 22, 41, 17, 35, 28, 19, 33}, 2, 32);
  SimOptions opt;
  opt.restart_overhead_ms = 300;
  opt.ft_restart_overhead_ms = 50;
  const auto clean = simulate(baseline(4, true), model, profile, work, {}, opt);
  std::mt19937_64 rng(1007);
  std::uniform_int_distribution<std::int64_t> stage(0, 3), kind(0, 1), mbd(0, 7);
  int seq_mismatch = 0, restart_mismatch = 0, checked = 0, lagging = 0;
  for (int i = 0; i < 50; ++i) {
    FaultSpec f;
    f.stage = stage(rng);
    if (kind(rng) == 0) {
      f.trigger = FaultTrigger::AfterStep;
      const auto j = mbd(rng);
      f.step = {j, std::uniform_int_distribution<std::int64_t>(0, work.microbatches[j].new_tokens)(rng)};
    } else {
      f.trigger = FaultTrigger::AtTime;
      const auto& occ = clean.stages[static_cast<std::size_t>(f.stage)].occupancy;
      const auto& o = occ[std::uniform_int_distribution<std::size_t>(0, occ.size() - 1)(rng)];
      f.time = (o.start + o.end) / 2;
    }
    const auto r = simulate(baseline(4, true), model, profile, work, {f}, opt);
    if (r.recoveries.size() != 1) return {false, str("injection %d produced %zu recoveries", i, r.recoveries.size())};
    for (std::size_t k = 0; k < r.microbatches.size(); ++k) {
      if (r.microbatches[k].emitted != clean.microbatches[k].emitted) ++seq_mismatch;
    }
    const auto& rec = r.recoveries.front();
    const auto expected = brute_force_restart(r, f.stage, rec.failure);
    if (expected) {
      ++checked;
      if (rec.lag_steps > 0) ++lagging;
      if (*expected != rec.restart) ++restart_mismatch;
    }
  }
  FaultSpec fig;
  fig.stage = 1;
  fig.trigger = FaultTrigger::AfterStep;
  fig.step = {0, 3};
  const auto r10 = simulate(baseline(4, true), model, profile, uniform_workload(4, 1, 16, 6), {fig}, opt);
  const bool fig_ok = r10.recoveries.size() == 1 && r10.recoveries[0].restart == StepRef{0, 3};
  return {seq_mismatch == 0 && restart_mismatch == 0 && checked == 50 && fig_ok,
          str("50 injections (%d with unreplicated steps): %d sequence mismatches, %d/%d restart points off; "
              "four-stage example restarts at %s",
              lagging, seq_mismatch, restart_mismatch, checked,
              r10.recoveries.empty() ? "-" : step_label(r10.recoveries[0].restart).c_str())};
}

// ---- 8

Outcome redone_work() {
  const auto model = model840();
  const Millis y = 400, t = 34;
  const auto profile = constant_profile(y, t);
  const auto work = uniform_workload(8, 8, 500, 1000);
  int failures = 0;
  double off_ratio = 0, on_ratio = 0;
  std::string notes;
  SimOptions base_opt;
  base_opt.restart_overhead_ms = 5000;
  base_opt.ft_restart_overhead_ms = 500;
  const auto clean = simulate(baseline(4, false), model, profile, work, {}, base_opt);
  double clean_total = 0;
  for (const auto& m : clean.microbatches) clean_total += m.latency();
  const int seeds = 8;
  for (int seed = 0; seed < seeds; ++seed) {
    SimOptions opt = base_opt;
    opt.heartbeat.check_offset = 12.5 * seed;
    FaultSpec f;
    f.stage = seed % 4;
    f.trigger = FaultTrigger::AfterTokenSteps;
    f.token_steps = 1200 + 13 * seed;
    const auto off = simulate(baseline(4, false), model, profile, work, {f}, opt);
    const auto on = simulate(baseline(4, true), model, profile, work, {f}, opt);
    const auto& roff = off.recoveries.at(0);
    const auto& ron = on.recoveries.at(0);

    // Everything the in-flight microbatches emitted before the pause.
    std::int64_t progress = 0;
    const auto& last = off.stages.back().occupancy;
    for (const auto& m : off.microbatches) {
      bool finished_before = false;
      std::int64_t emitted = 0;
      for (const auto& o : last) {
        if (o.microbatch != m.id || o.aborted || o.end > roff.detected) continue;
        if (o.step == m.new_tokens) finished_before = true;
        if (o.step > 0) ++emitted;
      }
      if (!finished_before) progress += emitted;
    }
    // Replication lag at the crash plus what left the pipeline while the crash went unnoticed.
    std::set<std::pair<std::int64_t, std::int64_t>> acked;
    for (const auto& a : on.acks) {
      if (a.worker == f.stage && a.time <= ron.failure) acked.insert({a.microbatch, a.step});
    }
    std::int64_t lag = 0, window = 0;
    for (const auto& o : on.stages[static_cast<std::size_t>(f.stage)].occupancy) {
      if (!o.aborted && o.end <= ron.failure && !acked.count({o.microbatch, o.step})) ++lag;
    }
    for (const auto& o : on.stages.back().occupancy) {
      if (!o.aborted && o.step > 0 && o.end > ron.failure && o.end <= ron.detected) ++window;
    }
    double lat_off = 0, lat_on = 0;
    for (const auto& m : off.microbatches) lat_off += m.latency();
    for (const auto& m : on.microbatches) lat_on += m.latency();
    off_ratio += lat_off / clean_total / seeds;
    on_ratio += lat_on / clean_total / seeds;
    const bool ok = roff.redone_token_steps == progress && ron.redone_token_steps <= lag + window && lat_on < lat_off;
    if (!ok) {
      ++failures;
      notes += str(" [seed %d: off %lld vs %lld, on %lld vs bound %lld, latency %.1f vs %.1f]", seed,
                   static_cast<long long>(roff.redone_token_steps), static_cast<long long>(progress),
                   static_cast<long long>(ron.redone_token_steps), static_cast<long long>(lag + window), lat_on,
                   lat_off);
    }
  }
  // Single request, restart from scratch after token 250 of 500 on one stage.
  SimOptions single;
  single.restart_overhead_ms = 1500;
  single.heartbeat = {100, 300, 0};
  FaultSpec f;
  f.trigger = FaultTrigger::AfterTokenSteps;
  f.token_steps = 250;
  const Millis ys = 1000, ts = 20;
  const auto r = simulate(baseline(1), model, constant_profile(ys, ts), uniform_workload(1, 1, 500, 500), {f}, single);
  // Crash at Y + 250 t = 6000; first check past 6000 + 300 is 6400. R covers detection and restart.
  const Millis restart_cost = (6400 - 6000) + 1500;
  const Millis closed = 2 * ys + 750 * ts + restart_cost;
  const double err = rel(r.microbatches.at(0).latency(), closed);
  return {failures == 0 && err < 1e-9,
          str("%d seeds; mean cumulative latency vs fault-free: ft_off %.3fx, ft_on %.3fx; closed form error %.2g%s",
              seeds, off_ratio, on_ratio, err, notes.c_str())};
}

// ---- 9

Outcome bubble_reproduction() {
  // Y = 2t on four stages; microbatches stop early at random and free slots
  // are refilled with fresh prompts.
  const auto profile = constant_profile(8, 4);
  std::mt19937_64 rng(1009);
  std::uniform_int_distribution<std::int64_t> count(8, 64), longest(6, 40);
  int traces = 0, zero_baseline = 0, not_smaller = 0;
  double worst = 0;
  for (int i = 0; i < 25; ++i) {
    const auto k = count(rng);
    std::uniform_int_distribution<std::int64_t> tokens(2, longest(rng));
    std::vector<std::int64_t> n;
    double mean = 0;
    for (std::int64_t j = 0; j < k; ++j) {
      n.push_back(tokens(rng));
      mean += static_cast<double>(n.back()) / static_cast<double>(k);
    }
    const auto work = workload_from(n, 1, 16);
    const auto part = disagg_partition(4, 2, 1, std::max<std::int64_t>(1, std::llround(mean)), 1.0);
    const auto base = simulate(baseline(4), model840(), profile, work);
    const auto dis = simulate(disaggregated(part.prompt_depth, part.token_depth, 1.0), model840(), profile, work);
    double b = 0, d = 0;
    for (const auto& s : base.stages) b += s.bubble;
    for (const auto& s : dis.stages) {
      if (s.role == StageRole::TokenOnly) d += s.bubble;
    }
    ++traces;
    if (b <= 0) ++zero_baseline;
    if (!(d < b)) ++not_smaller;
    if (b > 0) worst = std::max(worst, d / b);
  }
  // The four-microbatch picture itself: the third stops after one round and a fifth takes its slot.
  const auto fig = simulate(baseline(4), model840(), profile, workload_from({8, 8, 3, 8, 8}, 1, 16));
  double fig_bubble = 0;
  for (const auto& s : fig.stages) fig_bubble += s.bubble;
  return {zero_baseline == 0 && not_smaller == 0 && fig_bubble > 0,
          str("%d early-stop traces: %d without baseline bubbles, %d where disaggregation did not shrink them, worst "
              "token/baseline bubble ratio %.3f; four-microbatch picture baseline bubble %.1f ms",
              traces, zero_baseline, not_smaller, worst, fig_bubble)};
}

// ---- 10

Outcome planner_structure() {
  // OPT-66B attention stack on machines with two 80 GB accelerators. Prompt
  // work is compute-bound (about 0.3 ms per request-token for the whole
  // model); decoding reads the weights once per step (about 45 ms).
  ModelSpec model;
  model.name = "opt-66b-attn";
  model.layers = 64;
  model.hidden = 9216;
  model.max_seq = 2048;
  const LatencyProfile profile({{1, 1000, 300}, {8, 1000, 2400}, {16, 1000, 4800}},
                               {{1, 45}, {4, 46}, {8, 47}, {16, 50}}, ScalingMode::Bilinear, false);
  GeneratorSpec g;
  g.rate_per_s = 1e6;
  g.count = 1024;
  g.prompt_len = {DistKind::Fixed, 1000};
  g.new_tokens = {DistKind::Lognormal, 1, 1, 1000, 100, 1.0};
  g.seed = 1010;
  const auto trace = generate_trace(g);
  ClusterSpec cluster;
  cluster.memory_bytes = 160 * kGiB;

  SearchSpace base_space;
  base_space.modes = {PlanMode::Baseline};
  base_space.microbatch_sizes = {4, 8, 16};
  SearchSpace dis_space = base_space;
  dis_space.modes = {PlanMode::Disaggregated};
  double lo = 1e300, hi = 0;
  for (auto b : base_space.microbatch_sizes) {
    const double r = profile.prompt_time(b, 1000) / profile.token_time(b);
    lo = std::min(lo, r);
    hi = std::max(hi, r);
  }
  if (lo < 10 || hi > 106) return {false, str("calibrated Y/t spans [%.1f, %.1f]", lo, hi)};

  std::string detail;
  bool ok = true;
  std::vector<double> cost;
  for (std::int64_t machines : {4, 6, 8, 12, 16}) {
    cluster.machines = machines;
    const auto b = enumerate_plans(cluster, model, profile, trace, base_space);
    const auto d = enumerate_plans(cluster, model, profile, trace, dis_space);
    const auto* bb = b.best(PlanMode::Baseline);
    const auto* db = d.best(PlanMode::Disaggregated);
    if (!bb || !db) {
      ok = false;
      detail += str(" [%lld: no feasible %s]", static_cast<long long>(machines), bb ? "disaggregated" : "baseline");
      cost.push_back(bb ? bb->cost : 0);
      continue;
    }
    ok = ok && db->makespan <= bb->makespan;
    cost.push_back(bb->cost);
    detail += str(" [%lld: %s %.0f ms vs %s %.0f ms]", static_cast<long long>(machines), db->plan.label().c_str(),
                  db->makespan, bb->plan.label().c_str(), bb->makespan);
  }
  const auto knee = static_cast<std::size_t>(std::min_element(cost.begin(), cost.end()) - cost.begin());
  bool monotone = true;
  for (std::size_t i = knee + 1; i < cost.size(); ++i) monotone = monotone && cost[i] >= cost[i - 1];
  std::string costs;
  for (double c : cost) costs += str(" %.3f", c);
  return {ok && monotone, str("Y/t in [%.1f, %.1f]; baseline cost (machine-hours):", lo, hi) + costs + ";" + detail};
}

// ---- 11

std::map<std::string, std::string> read_tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    out[fs::relative(e.path(), dir).string()] =
        std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  return out;
}

Outcome cli_determinism() {
  const fs::path configs = PIPESIM_CONFIG_DIR;
  const fs::path root = fs::temp_directory_path() / "pipesim_acceptance_determinism";
  fs::remove_all(root);
  const std::vector<std::pair<std::string, std::string>> runs{
      {"plan", "plan.json"},         {"simulate", "simulate.json"},          {"simulate", "simulate_disagg.json"},
      {"sweep", "sweep.json"},       {"ft-demo", "ft_demo.json"},            {"analyze-swap", "analyze_swap.json"}};
  int differing = 0, failed = 0, files = 0;
  for (const auto& [cmd, file] : runs) {
    std::vector<std::map<std::string, std::string>> outputs;
    for (int rep = 0; rep < 3; ++rep) {
      const auto out = root / (cmd + "_" + file + "_" + std::to_string(rep));
      const std::string line = std::string(PIPESIM_CLI) + " " + cmd + " --config " + (configs / file).string() +
                               " --seed 42 --verbose-events --out " + out.string() + " > /dev/null 2>&1";
      if (std::system(line.c_str()) != 0) ++failed;
      outputs.push_back(read_tree(out));
    }
    files += static_cast<int>(outputs[0].size());
    if (outputs[0].empty() || outputs[0] != outputs[1] || outputs[1] != outputs[2]) ++differing;
  }
  fs::remove_all(root);
  return {differing == 0 && failed == 0,
          str("%zu commands x 3 runs, %d output files each round, %d differing, %d failed runs", runs.size(), files,
              differing, failed)};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "steady-state inverse throughput matches the baseline closed form", 10, closed_form_equivalence},
      {2, "balanced split and integer split optimality", 1, split_optimum},
      {3, "disaggregation wins whenever the benefit condition holds", 30, benefit_condition},
      {4, "every planned stage fits in machine memory", 0, plans_fit_memory},
      {5, "swap inequality and throughput ratio agree", 5, swap_analysis},
      {6, "swap residency stays within the device budget", 0, swap_residency},
      {7, "recovery reproduces fault-free output and the earliest unreplicated step", 30, recovery_correctness},
      {8, "replication bounds redone work; restart-from-scratch closed form", 0, redone_work},
      {9, "early stops cause bubbles that disaggregation shrinks", 0, bubble_reproduction},
      {10, "planner: disaggregated best plan vs baseline, diminishing returns", 0, planner_structure},
      {11, "CLI outputs are byte-identical across runs", 0, cli_determinism},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.time_limit_s > 0 && secs > c.time_limit_s) {
      o.pass = false;
      o.detail += str(" (over the %.0f s budget)", c.time_limit_s);
    }
    std::printf("%s criterion %d: %s -- %s [%.2f s]\n", o.pass ? "PASS" : "FAIL", c.id, c.title.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  return failed;
}
