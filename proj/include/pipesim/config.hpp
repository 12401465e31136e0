#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pipesim/errors.hpp"
#include "pipesim/fault_tolerance.hpp"
#include "pipesim/latency_profile.hpp"
#include "pipesim/model_memory.hpp"
#include "pipesim/plan.hpp"
#include "pipesim/planner.hpp"
#include "pipesim/simcore.hpp"
#include "pipesim/streamlib.hpp"
#include "pipesim/trace.hpp"

namespace pipesim {

struct SweepSpec {
  std::vector<double> rates_per_s;
  std::vector<std::int64_t> microbatch_sizes;
  std::vector<std::int64_t> machines;
};

struct SwapAnalysisSpec {
  std::vector<std::int64_t> batches{1, 2, 4, 8, 16};
  std::vector<std::int64_t> new_tokens{32, 128, 512};
  std::int64_t prompt_len = 0;  // 0: trace maximum
  std::optional<double> pcie_bytes_per_ms;
};

/// Everything one CLI invocation needs, parsed from a JSON document.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  ModelSpec model;
  ClusterSpec cluster;
  LatencyProfile profile;
  std::optional<Plan> plan;
  bool auto_stream_overhead = false;
  SearchSpace search;
  std::optional<std::string> trace_file;
  std::optional<GeneratorSpec> generator;
  std::optional<Millis> partial_batch_timeout_ms;
  FaultSchedule faults;
  SimOptions sim;
  SweepSpec sweep;
  SwapAnalysisSpec swap_analysis;
  std::string output_dir = "out";

  /// The configured trace; generator traces use `seed`.
  Trace load_trace() const {
    if (trace_file) return load_trace_file(*trace_file);
    if (!generator) throw ConfigError("config has no trace section");
    auto g = *generator;
    g.seed = seed;
    return generate_trace(g);
  }
};

namespace config_detail {

using nlohmann::json;

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("field '") + key + "': " + e.what());
  }
}

template <class T>
T require(const json& j, const char* key, const std::string& section) {
  if (!j.contains(key)) throw ConfigError(section + "." + key + " is required");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(section + "." + key + ": " + e.what());
  }
}

inline TransportSpec transport_preset(const std::string& name) {
  if (name == "device_local") return device_local_preset();
  if (name == "host_local") return host_local_preset();
  if (name == "pcie3") return pcie3_preset();
  if (name == "pcie4") return pcie4_preset();
  if (name == "network_40g") return network_40g_preset();
  if (name == "network_32g") return network_32g_preset();
  if (name == "ssd") return ssd_preset();
  throw ConfigError("unknown transport preset '" + name + "'");
}

inline TransportSpec parse_transport(const json& j, TransportSpec fallback) {
  if (j.is_string()) return transport_preset(j.get<std::string>());
  if (!j.is_object()) throw ConfigError("transport must be a preset name or an object");
  TransportSpec t = j.contains("preset") ? transport_preset(j.at("preset").get<std::string>()) : fallback;
  t.bytes_per_ms = get_or(j, "bytes_per_ms", t.bytes_per_ms);
  t.per_call_overhead = get_or(j, "per_call_overhead_ms", t.per_call_overhead);
  t.duplex = get_or(j, "duplex", t.duplex);
  t.validate();
  return t;
}

inline LengthDistribution parse_distribution(const json& j, const std::string& what) {
  LengthDistribution d;
  if (j.is_number_integer()) {
    d.kind = DistKind::Fixed;
    d.value = j.get<std::int64_t>();
  } else {
    const auto kind = require<std::string>(j, "kind", what);
    if (kind == "fixed") {
      d.kind = DistKind::Fixed;
      d.value = require<std::int64_t>(j, "value", what);
    } else if (kind == "uniform") {
      d.kind = DistKind::Uniform;
      d.min = require<std::int64_t>(j, "min", what);
      d.max = require<std::int64_t>(j, "max", what);
    } else if (kind == "lognormal") {
      d.kind = DistKind::Lognormal;
      d.median = require<double>(j, "median", what);
      d.sigma = require<double>(j, "sigma", what);
      d.min = get_or<std::int64_t>(j, "min", 1);
      d.max = require<std::int64_t>(j, "max", what);
    } else {
      throw ConfigError(what + ": unknown distribution kind '" + kind + "'");
    }
  }
  d.validate(what);
  return d;
}

inline Plan parse_plan(const json& j, std::int64_t default_machines, bool& auto_m) {
  Plan p;
  p.mode = parse_plan_mode(get_or<std::string>(j, "mode", "baseline"));
  p.machines_total = get_or<std::int64_t>(j, "machines", default_machines);
  p.dp_replicas = get_or<std::int64_t>(j, "dp_replicas", 1);
  p.prompt_depth = get_or<std::int64_t>(j, "prompt_depth", 0);
  p.token_depth = get_or<std::int64_t>(j, "token_depth", 0);
  p.microbatch_size = get_or<std::int64_t>(j, "microbatch_size", 1);
  p.swapping = get_or(j, "swapping", false);
  p.fault_tolerance = get_or(j, "fault_tolerance", false);
  auto_m = false;
  if (j.contains("stream_overhead")) {
    const auto& m = j.at("stream_overhead");
    if (m.is_string()) {
      if (m.get<std::string>() != "auto") throw ConfigError("plan.stream_overhead must be a number or \"auto\"");
      auto_m = true;
    } else {
      p.stream_overhead = m.get<double>();
    }
  }
  if (p.mode == PlanMode::Disaggregated && p.prompt_depth == 0 && p.token_depth > 0) {
    p.prompt_depth = p.machines_total - p.token_depth;
  }
  if (p.mode == PlanMode::Disaggregated && p.token_depth == 0 && p.prompt_depth > 0) {
    p.token_depth = p.machines_total - p.prompt_depth;
  }
  p.validate();
  return p;
}

inline FaultSpec parse_fault(const json& j) {
  FaultSpec f;
  f.stage = require<std::int64_t>(j, "stage", "faults[]");
  if (j.contains("time_ms")) {
    f.trigger = FaultTrigger::AtTime;
    f.time = j.at("time_ms").get<double>();
  } else if (j.contains("after_step")) {
    f.trigger = FaultTrigger::AfterStep;
    f.step = {require<std::int64_t>(j.at("after_step"), "microbatch", "after_step"),
              require<std::int64_t>(j.at("after_step"), "step", "after_step")};
  } else if (j.contains("after_token_steps")) {
    f.trigger = FaultTrigger::AfterTokenSteps;
    f.token_steps = j.at("after_token_steps").get<std::int64_t>();
    if (f.token_steps < 1) throw ConfigError("after_token_steps must be >= 1");
  } else {
    throw ConfigError("fault needs one of time_ms, after_step, after_token_steps");
  }
  return f;
}

inline std::vector<PlanMode> parse_modes(const json& j) {
  std::vector<PlanMode> out;
  for (const auto& m : j) out.push_back(parse_plan_mode(m.get<std::string>()));
  return out;
}

}  // namespace config_detail

/// Parse a config document. Relative trace paths resolve against `base_dir`.
inline ExperimentConfig parse_config(const nlohmann::json& root, const std::filesystem::path& base_dir = {}) {
  using namespace config_detail;
  if (!root.is_object()) throw ConfigError("config root must be an object");
  ExperimentConfig cfg;
  cfg.seed = get_or<std::uint64_t>(root, "seed", 0);

  const auto& m = root.contains("model") ? root.at("model") : throw ConfigError("model section is required");
  cfg.model.name = get_or<std::string>(m, "name", "model");
  cfg.model.layers = require<std::int64_t>(m, "layers", "model");
  cfg.model.hidden = require<std::int64_t>(m, "hidden", "model");
  cfg.model.element_bytes = get_or<std::int64_t>(m, "element_bytes", 2);
  cfg.model.attn_weight_bytes_per_layer = get_or<Bytes>(m, "attn_weight_bytes_per_layer", 0);
  cfg.model.max_seq = get_or<std::int64_t>(m, "max_seq", 2048);
  cfg.model.validate();

  const auto& c = root.contains("cluster") ? root.at("cluster") : throw ConfigError("cluster section is required");
  cfg.cluster.machines = require<std::int64_t>(c, "machines", "cluster");
  if (c.contains("memory_gib")) {
    cfg.cluster.memory_bytes = static_cast<Bytes>(c.at("memory_gib").get<double>() * static_cast<double>(kGiB));
  } else {
    cfg.cluster.memory_bytes = require<Bytes>(c, "memory_bytes", "cluster");
  }
  if (c.contains("transports")) {
    const auto& t = c.at("transports");
    auto& ts = cfg.cluster.transports;
    if (t.contains("device_local")) ts.device_local = parse_transport(t.at("device_local"), ts.device_local);
    if (t.contains("pcie")) ts.pcie = parse_transport(t.at("pcie"), ts.pcie);
    if (t.contains("network")) ts.network = parse_transport(t.at("network"), ts.network);
    if (t.contains("ssd")) ts.ssd = parse_transport(t.at("ssd"), ts.ssd);
  }
  cfg.cluster.validate();

  const auto& p = root.contains("profile") ? root.at("profile") : throw ConfigError("profile section is required");
  const auto mode = get_or<std::string>(p, "mode", "bilinear");
  if (mode != "bilinear" && mode != "table") throw ConfigError("profile.mode must be bilinear or table");
  std::vector<PromptPoint> prompt;
  for (const auto& row : require<nlohmann::json>(p, "prompt", "profile")) {
    if (!row.is_array() || row.size() != 3) throw ConfigError("profile.prompt rows are [batch, prompt_len, ms]");
    prompt.push_back({row[0].get<std::int64_t>(), row[1].get<std::int64_t>(), row[2].get<double>()});
  }
  std::vector<TokenPoint> token;
  for (const auto& row : require<nlohmann::json>(p, "token", "profile")) {
    if (!row.is_array() || row.size() != 2) throw ConfigError("profile.token rows are [batch, ms]");
    token.push_back({row[0].get<std::int64_t>(), row[1].get<double>()});
  }
  cfg.profile = LatencyProfile(std::move(prompt), std::move(token),
                               mode == "table" ? ScalingMode::Table : ScalingMode::Bilinear,
                               get_or(p, "fit_intercept", true));

  if (root.contains("plan")) cfg.plan = parse_plan(root.at("plan"), cfg.cluster.machines, cfg.auto_stream_overhead);

  if (root.contains("search")) {
    const auto& s = root.at("search");
    if (s.contains("microbatch_sizes")) cfg.search.microbatch_sizes = s.at("microbatch_sizes").get<std::vector<std::int64_t>>();
    if (s.contains("modes")) cfg.search.modes = parse_modes(s.at("modes"));
    if (s.contains("swapping")) cfg.search.swapping = s.at("swapping").get<std::vector<bool>>();
    if (s.contains("stream_overhead") && !s.at("stream_overhead").is_string()) {
      cfg.search.stream_overhead = s.at("stream_overhead").get<double>();
    }
    cfg.search.max_dp_replicas = get_or<std::int64_t>(s, "max_dp_replicas", 0);
    cfg.search.threads = get_or<unsigned>(s, "threads", 0);
  }

  if (root.contains("trace")) {
    const auto& t = root.at("trace");
    if (t.contains("file")) {
      std::filesystem::path f = t.at("file").get<std::string>();
      if (f.is_relative() && !base_dir.empty()) f = base_dir / f;
      cfg.trace_file = f.string();
    } else if (t.contains("generator")) {
      const auto& g = t.at("generator");
      GeneratorSpec spec;
      spec.rate_per_s = require<double>(g, "rate_per_s", "generator");
      spec.count = get_or<std::int64_t>(g, "count", 0);
      spec.horizon_ms = get_or<double>(g, "horizon_ms", 0);
      spec.prompt_len = parse_distribution(require<nlohmann::json>(g, "prompt_len", "generator"), "prompt_len");
      spec.new_tokens = parse_distribution(require<nlohmann::json>(g, "new_tokens", "generator"), "new_tokens");
      spec.validate();
      cfg.generator = spec;
    } else {
      throw ConfigError("trace needs a file or a generator");
    }
    if (t.contains("partial_batch_timeout_ms")) cfg.partial_batch_timeout_ms = t.at("partial_batch_timeout_ms").get<double>();
    cfg.search.partial_batch_timeout_ms = cfg.partial_batch_timeout_ms;
  }

  if (root.contains("faults")) {
    for (const auto& f : root.at("faults")) cfg.faults.push_back(parse_fault(f));
  }
  if (root.contains("heartbeat")) {
    const auto& h = root.at("heartbeat");
    cfg.sim.heartbeat.interval = get_or(h, "interval_ms", cfg.sim.heartbeat.interval);
    cfg.sim.heartbeat.timeout = get_or(h, "timeout_ms", cfg.sim.heartbeat.timeout);
    cfg.sim.heartbeat.check_offset = get_or(h, "check_offset_ms", cfg.sim.heartbeat.check_offset);
    cfg.sim.heartbeat.validate();
  }
  if (root.contains("sim")) {
    const auto& s = root.at("sim");
    cfg.sim.activation_transfer_ms = get_or(s, "activation_transfer_ms", 0.0);
    cfg.sim.restart_overhead_ms = get_or(s, "restart_overhead_ms", 0.0);
    cfg.sim.ft_restart_overhead_ms = get_or(s, "ft_restart_overhead_ms", 0.0);
    cfg.sim.broadcast_ms = get_or(s, "broadcast_ms", 0.0);
    cfg.sim.parallel_recovery_copies = get_or(s, "parallel_recovery_copies", false);
    cfg.sim.replication_chunk_bytes = get_or<Bytes>(s, "replication_chunk_bytes", 16);
  }
  cfg.sim.transports = cfg.cluster.transports;

  if (root.contains("sweep")) {
    const auto& s = root.at("sweep");
    cfg.sweep.rates_per_s = get_or(s, "rates_per_s", std::vector<double>{});
    cfg.sweep.microbatch_sizes = get_or(s, "microbatch_sizes", std::vector<std::int64_t>{});
    cfg.sweep.machines = get_or(s, "machines", std::vector<std::int64_t>{});
  }
  if (root.contains("swap_analysis")) {
    const auto& s = root.at("swap_analysis");
    cfg.swap_analysis.batches = get_or(s, "batches", cfg.swap_analysis.batches);
    cfg.swap_analysis.new_tokens = get_or(s, "new_tokens", cfg.swap_analysis.new_tokens);
    cfg.swap_analysis.prompt_len = get_or<std::int64_t>(s, "prompt_len", 0);
    if (s.contains("pcie_bytes_per_ms")) cfg.swap_analysis.pcie_bytes_per_ms = s.at("pcie_bytes_per_ms").get<double>();
  }
  if (root.contains("output")) cfg.output_dir = get_or<std::string>(root.at("output"), "dir", cfg.output_dir);
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(e.what(), 0);
  }
  return parse_config(root, std::filesystem::path(path).parent_path());
}

}  // namespace pipesim
