#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pipesim/errors.hpp"
#include "pipesim/units.hpp"

namespace pipesim {

/// Shape of a decoder-only transformer as far as memory accounting goes.
/// Layers are homogeneous; only attention weights are counted.
struct ModelSpec {
  std::string name = "model";
  std::int64_t layers = 1;
  std::int64_t hidden = 1;
  std::int64_t element_bytes = 2;
  /// Attention weight bytes per layer. Zero selects the Q/K/V/O default of
  /// 4 * hidden^2 * element_bytes (see attn_weight_bytes()).
  Bytes attn_weight_bytes_per_layer = 0;
  std::int64_t max_seq = 2048;

  Bytes attn_weight_bytes() const {
    if (attn_weight_bytes_per_layer != 0) return attn_weight_bytes_per_layer;
    const auto h = static_cast<Bytes>(hidden);
    return checked_mul(checked_mul(4, checked_mul(h, h)), static_cast<Bytes>(element_bytes));
  }

  /// Bytes of K plus V for one token of one request in one layer.
  Bytes kv_bytes_per_token_per_layer() const {
    return 2 * static_cast<Bytes>(hidden) * static_cast<Bytes>(element_bytes);
  }

  void validate() const {
    if (layers < 1) throw ConfigError("model.layers must be >= 1");
    if (hidden < 1) throw ConfigError("model.hidden must be >= 1");
    if (element_bytes != 1 && element_bytes != 2 && element_bytes != 4) {
      throw ConfigError("model.element_bytes must be 1, 2 or 4");
    }
    if (max_seq < 1) throw ConfigError("model.max_seq must be >= 1");
    if (attn_weight_bytes() == 0) throw ConfigError("attention weight bytes must be > 0");
  }
};

/// Per-layer KV footprints for a microbatch of `batch` requests.
struct KvFootprint {
  Bytes per_layer_per_token_per_request = 0;
  Bytes prompt_per_layer = 0;      // C0
  Bytes token_step_per_layer = 0;  // K0
};

/// Total KV cache bytes for `batch` requests holding `seq` tokens each.
inline Bytes kv_cache_bytes(const ModelSpec& model, std::int64_t batch, std::int64_t seq) {
  if (batch < 0 || seq < 0) throw DomainError("batch and seq must be non-negative");
  if (seq > model.max_seq) {
    throw DomainError("sequence length " + std::to_string(seq) + " exceeds model max_seq " +
                      std::to_string(model.max_seq));
  }
  Bytes total = model.kv_bytes_per_token_per_layer();
  total = checked_mul(total, static_cast<Bytes>(model.layers));
  total = checked_mul(total, static_cast<Bytes>(batch));
  return checked_mul(total, static_cast<Bytes>(seq));
}

inline KvFootprint kv_footprints(const ModelSpec& model, std::int64_t batch, std::int64_t prompt_len) {
  if (batch < 1 || prompt_len < 1) throw DomainError("batch and prompt_len must be >= 1");
  KvFootprint fp;
  fp.per_layer_per_token_per_request = model.kv_bytes_per_token_per_layer();
  fp.token_step_per_layer = checked_mul(fp.per_layer_per_token_per_request, static_cast<Bytes>(batch));
  fp.prompt_per_layer = checked_mul(fp.token_step_per_layer, static_cast<Bytes>(prompt_len));
  return fp;
}

/// True iff the stage's weights plus its KV bytes fit in `capacity`.
inline bool stage_fits(std::int64_t layers_on_stage, const ModelSpec& model, Bytes kv_bytes_on_stage,
                       Bytes capacity) {
  if (layers_on_stage < 1) throw DomainError("a stage hosts at least one layer");
  const Bytes weights = checked_mul(static_cast<Bytes>(layers_on_stage), model.attn_weight_bytes());
  return checked_add(weights, kv_bytes_on_stage) <= capacity;
}

/// Contiguous layer ranges [first, last) for `depth` stages; earlier stages
/// take the remainder when `layers` is not divisible by `depth`.
inline std::vector<std::pair<std::int64_t, std::int64_t>> stage_layer_ranges(std::int64_t layers,
                                                                             std::int64_t depth) {
  if (depth < 1) throw DomainError("pipeline depth must be >= 1");
  if (depth > layers) {
    throw InfeasibleError("pipeline depth " + std::to_string(depth) + " exceeds layer count " +
                          std::to_string(layers));
  }
  std::vector<std::pair<std::int64_t, std::int64_t>> ranges;
  ranges.reserve(static_cast<std::size_t>(depth));
  const std::int64_t base = layers / depth;
  const std::int64_t extra = layers % depth;
  std::int64_t first = 0;
  for (std::int64_t s = 0; s < depth; ++s) {
    const std::int64_t n = base + (s < extra ? 1 : 0);
    ranges.emplace_back(first, first + n);
    first += n;
  }
  return ranges;
}

}  // namespace pipesim
