#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pipesim/errors.hpp"
#include "pipesim/model_memory.hpp"
#include "pipesim/streamlib.hpp"
#include "pipesim/units.hpp"

namespace pipesim {

enum class PlanMode { Baseline, BaselineDP, Disaggregated };

inline const char* to_string(PlanMode mode) {
  switch (mode) {
    case PlanMode::Baseline: return "baseline";
    case PlanMode::BaselineDP: return "baseline_dp";
    case PlanMode::Disaggregated: return "disaggregated";
  }
  return "?";
}

inline PlanMode parse_plan_mode(const std::string& s) {
  if (s == "baseline") return PlanMode::Baseline;
  if (s == "baseline_dp") return PlanMode::BaselineDP;
  if (s == "disaggregated") return PlanMode::Disaggregated;
  throw ConfigError("unknown plan mode '" + s + "'");
}

struct ClusterSpec {
  std::int64_t machines = 1;
  Bytes memory_bytes = 0;
  TransportSet transports;

  void validate() const {
    if (machines < 1) throw ConfigError("cluster.machines must be >= 1");
    if (memory_bytes == 0) throw ConfigError("cluster.memory_bytes must be > 0");
    transports.validate();
  }
};

/// One deployment of D machines.
struct Plan {
  PlanMode mode = PlanMode::Baseline;
  std::int64_t machines_total = 1;
  std::int64_t dp_replicas = 1;
  std::int64_t prompt_depth = 0;
  std::int64_t token_depth = 0;
  std::int64_t microbatch_size = 1;
  bool swapping = false;
  bool fault_tolerance = false;
  /// Prompt-stage slowdown from cache streaming (m); disaggregated plans only.
  double stream_overhead = 1.0;

  /// Stages in one pipeline (the token pipeline for disaggregated plans).
  std::int64_t pipeline_depth() const {
    switch (mode) {
      case PlanMode::Baseline: return machines_total;
      case PlanMode::BaselineDP: return machines_total / dp_replicas;
      case PlanMode::Disaggregated: return token_depth;
    }
    return machines_total;
  }

  void validate() const {
    if (machines_total < 1) throw ConfigError("plan needs at least one machine");
    if (microbatch_size < 1) throw ConfigError("microbatch size must be >= 1");
    switch (mode) {
      case PlanMode::Baseline: break;
      case PlanMode::BaselineDP:
        if (dp_replicas < 1 || machines_total % dp_replicas != 0) {
          throw ConfigError("dp_replicas must divide the machine count");
        }
        break;
      case PlanMode::Disaggregated:
        if (prompt_depth < 1 || token_depth < 1) throw ConfigError("prompt and token depth must both be >= 1");
        if (prompt_depth + token_depth != machines_total) {
          throw ConfigError("prompt_depth + token_depth must equal the machine count");
        }
        if (stream_overhead < 1.0) throw ConfigError("stream overhead must be >= 1");
        break;
    }
    if (fault_tolerance && mode != PlanMode::Baseline) {
      throw ConfigError("fault tolerance is modeled for baseline plans only");
    }
  }

  /// Short label: (8p, 16b) / (2d, 4p, 16b) / ((3p, 16b), (5p, 16b)).
  std::string label() const {
    const std::string b = std::to_string(microbatch_size) + "b";
    std::string s;
    switch (mode) {
      case PlanMode::Baseline: s = "(" + std::to_string(machines_total) + "p, " + b + ")"; break;
      case PlanMode::BaselineDP:
        s = "(" + std::to_string(dp_replicas) + "d, " + std::to_string(pipeline_depth()) + "p, " + b + ")";
        break;
      case PlanMode::Disaggregated:
        s = "((" + std::to_string(prompt_depth) + "p, " + b + "), (" + std::to_string(token_depth) + "p, " + b + "))";
        break;
    }
    if (swapping) s += " swap";
    return s;
  }
};

enum class StageRole { PromptAndToken, PromptOnly, TokenOnly };

inline const char* to_string(StageRole role) {
  switch (role) {
    case StageRole::PromptAndToken: return "prompt_and_token";
    case StageRole::PromptOnly: return "prompt_only";
    case StageRole::TokenOnly: return "token_only";
  }
  return "?";
}

struct StageLayout {
  std::int64_t stage_id = 0;
  StageRole role = StageRole::PromptAndToken;
  /// Pipeline the stage belongs to: DP replica index, or 0 = prompt / 1 = token.
  std::int64_t pipeline = 0;
  std::int64_t position = 0;
  std::int64_t layer_first = 0;
  std::int64_t layer_last = 0;

  std::int64_t layers() const { return layer_last - layer_first; }
};

/// Every machine of `plan` with its layers. Stage ids are global; prompt stages
/// come before token stages, DP replicas are laid out back to back.
inline std::vector<StageLayout> stage_layout(const Plan& plan, const ModelSpec& model) {
  plan.validate();
  std::vector<StageLayout> out;
  auto add_pipeline = [&](std::int64_t depth, StageRole role, std::int64_t pipeline) {
    const auto ranges = stage_layer_ranges(model.layers, depth);
    for (std::int64_t i = 0; i < depth; ++i) {
      out.push_back({static_cast<std::int64_t>(out.size()), role, pipeline, i, ranges[i].first, ranges[i].second});
    }
  };
  switch (plan.mode) {
    case PlanMode::Baseline: add_pipeline(plan.machines_total, StageRole::PromptAndToken, 0); break;
    case PlanMode::BaselineDP:
      for (std::int64_t r = 0; r < plan.dp_replicas; ++r) add_pipeline(plan.pipeline_depth(), StageRole::PromptAndToken, r);
      break;
    case PlanMode::Disaggregated:
      add_pipeline(plan.prompt_depth, StageRole::PromptOnly, 0);
      add_pipeline(plan.token_depth, StageRole::TokenOnly, 1);
      break;
  }
  return out;
}

}  // namespace pipesim
