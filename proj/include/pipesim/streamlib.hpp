#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "pipesim/errors.hpp"
#include "pipesim/latency_profile.hpp"
#include "pipesim/model_memory.hpp"
#include "pipesim/units.hpp"

namespace pipesim {

enum class TransportKind { DeviceLocal, HostLocal, HostToHostNetwork, DeviceHostPCIe, HostSSD };

inline const char* to_string(TransportKind k) {
  switch (k) {
    case TransportKind::DeviceLocal: return "device_local";
    case TransportKind::HostLocal: return "host_local";
    case TransportKind::HostToHostNetwork: return "network";
    case TransportKind::DeviceHostPCIe: return "pcie";
    case TransportKind::HostSSD: return "ssd";
  }
  return "?";
}

/// A copy mechanism reduced to bandwidth plus a fixed cost per call.
struct TransportSpec {
  TransportKind kind = TransportKind::HostToHostNetwork;
  double bytes_per_ms = 1.0;
  Millis per_call_overhead = 0.0;
  bool duplex = true;

  void validate() const {
    if (!(bytes_per_ms > 0)) throw ConfigError(std::string(to_string(kind)) + ": bandwidth must be > 0");
    if (per_call_overhead < 0) throw ConfigError(std::string(to_string(kind)) + ": overhead must be >= 0");
  }
};

// Presets. Bandwidths are effective rates in bytes per millisecond.
inline TransportSpec device_local_preset() { return {TransportKind::DeviceLocal, 1.5e9, 0.0, true}; }
inline TransportSpec host_local_preset() { return {TransportKind::HostLocal, 1.0e7, 0.001, true}; }
inline TransportSpec pcie3_preset() { return {TransportKind::DeviceHostPCIe, 1.2e7, 0.01, true}; }
inline TransportSpec pcie4_preset() { return {TransportKind::DeviceHostPCIe, 2.5e7, 0.01, true}; }
/// 40 Gbps inter-VM link.
inline TransportSpec network_40g_preset() { return {TransportKind::HostToHostNetwork, 5.0e6, 0.05, true}; }
/// 32 Gbps inter-VM link.
inline TransportSpec network_32g_preset() { return {TransportKind::HostToHostNetwork, 4.0e6, 0.05, true}; }
inline TransportSpec ssd_preset() { return {TransportKind::HostSSD, 2.0e6, 0.1, false}; }

struct TransportSet {
  TransportSpec device_local = device_local_preset();
  TransportSpec pcie = pcie4_preset();
  TransportSpec network = network_40g_preset();
  TransportSpec ssd = ssd_preset();

  void validate() const {
    device_local.validate();
    pcie.validate();
    network.validate();
    ssd.validate();
  }
};

/// Copy one contiguous chunk.
inline Millis flush(Bytes chunk_bytes, const TransportSpec& transport) {
  return transport.per_call_overhead + static_cast<double>(chunk_bytes) / transport.bytes_per_ms;
}

/// Dual of flush; same cost model in the other direction.
inline Millis fetch(Bytes chunk_bytes, const TransportSpec& transport) { return flush(chunk_bytes, transport); }

/// A non-contiguous slice of one worker's KV cache: `chunk_count` equal pieces.
struct KvRegion {
  std::int64_t layer_first = 0;
  std::int64_t layer_last = 0;
  std::int64_t token_first = 0;
  std::int64_t token_last = 0;
  Bytes bytes_per_chunk = 0;
  std::int64_t chunk_count = 1;

  Bytes total_bytes() const { return checked_mul(bytes_per_chunk, static_cast<Bytes>(chunk_count)); }

  void validate() const {
    if (chunk_count < 1) throw DomainError("region needs at least one chunk");
    if (layer_last < layer_first || token_last < token_first) throw DomainError("region ranges are inverted");
  }
};

enum class MemoryTier { Device, Host, Ssd };

struct Endpoint {
  std::int64_t worker = 0;
  MemoryTier tier = MemoryTier::Device;

  friend bool operator==(const Endpoint&, const Endpoint&) = default;
};

struct TransferStep {
  Endpoint source;
  Endpoint destination;
  Bytes bytes = 0;
  TransportKind transport = TransportKind::DeviceLocal;
  Millis time = 0;
  /// Layer index (prompt streaming) or step index (token streaming) the copy belongs to.
  std::int64_t segment = 0;
};

enum class OverlapClass { None, LayerByLayer, TokenMasked };

/// Piece of a KV cache routed between two pipeline layouts. Ranges are half-open.
struct KvPiece {
  std::int64_t source_worker = 0;
  std::int64_t destination_worker = 0;
  std::int64_t source_microbatch = 0;
  std::int64_t destination_microbatch = 0;
  std::int64_t layer_first = 0, layer_last = 0;
  std::int64_t request_first = 0, request_last = 0;
  std::int64_t token_first = 0, token_last = 0;

  Bytes bytes(const ModelSpec& model) const {
    Bytes b = model.kv_bytes_per_token_per_layer();
    b = checked_mul(b, static_cast<Bytes>(layer_last - layer_first));
    b = checked_mul(b, static_cast<Bytes>(request_last - request_first));
    return checked_mul(b, static_cast<Bytes>(token_last - token_first));
  }

  friend bool operator==(const KvPiece&, const KvPiece&) = default;
};

struct TransferPlan {
  std::vector<TransferStep> steps;
  std::vector<KvPiece> pieces;
  Millis total_time_unoverlapped = 0;
  OverlapClass overlap_class = OverlapClass::None;

  void append(TransferStep step) {
    total_time_unoverlapped += step.time;
    steps.push_back(step);
  }

  void append(const TransferPlan& other) {
    for (const auto& s : other.steps) append(s);
    pieces.insert(pieces.end(), other.pieces.begin(), other.pieces.end());
  }
};

/// Move a non-contiguous region to `destination`. Unbuffered issues one call per
/// chunk; buffered first packs every chunk into a device staging buffer, then
/// ships the buffer in one call.
inline TransferPlan scatter(const KvRegion& region, const TransportSpec& target, bool buffered,
                            const TransportSpec& staging = device_local_preset(), Endpoint source = {},
                            Endpoint destination = {0, MemoryTier::Host}, std::int64_t segment = 0) {
  region.validate();
  TransferPlan plan;
  if (!buffered) {
    for (std::int64_t c = 0; c < region.chunk_count; ++c) {
      plan.append({source, destination, region.bytes_per_chunk, target.kind, flush(region.bytes_per_chunk, target),
                   segment});
    }
    return plan;
  }
  for (std::int64_t c = 0; c < region.chunk_count; ++c) {
    plan.append({source, source, region.bytes_per_chunk, staging.kind, flush(region.bytes_per_chunk, staging), segment});
  }
  plan.append({source, destination, region.total_bytes(), target.kind, flush(region.total_bytes(), target), segment});
  return plan;
}

/// Cost of scatter(region, target, buffered, staging) without building the step list.
inline Millis scatter_cost(const KvRegion& region, const TransportSpec& target, bool buffered,
                           const TransportSpec& staging = device_local_preset()) {
  region.validate();
  const auto n = static_cast<double>(region.chunk_count);
  if (!buffered) return n * flush(region.bytes_per_chunk, target);
  return n * flush(region.bytes_per_chunk, staging) + flush(region.total_bytes(), target);
}

/// Dual of scatter: one bulk fetch into a staging buffer, then chunk_count local unpacks.
inline TransferPlan gather(const KvRegion& region, const TransportSpec& target, bool buffered,
                           const TransportSpec& staging = device_local_preset(),
                           Endpoint source = {0, MemoryTier::Host}, Endpoint destination = {},
                           std::int64_t segment = 0) {
  region.validate();
  TransferPlan plan;
  if (!buffered) {
    for (std::int64_t c = 0; c < region.chunk_count; ++c) {
      plan.append({source, destination, region.bytes_per_chunk, target.kind, fetch(region.bytes_per_chunk, target),
                   segment});
    }
    return plan;
  }
  plan.append({source, destination, region.total_bytes(), target.kind, fetch(region.total_bytes(), target), segment});
  for (std::int64_t c = 0; c < region.chunk_count; ++c) {
    plan.append({destination, destination, region.bytes_per_chunk, staging.kind, fetch(region.bytes_per_chunk, staging),
                 segment});
  }
  return plan;
}

/// Region written by one token step for `batch` requests over `layers` layers.
/// The key cache packs `chunk_bytes`-sized vectors along the sequence axis, so a
/// single new token touches hidden*element_bytes/chunk_bytes separate spots per
/// layer, request and K/V half.
inline KvRegion token_step_region(const ModelSpec& model, std::int64_t layers, std::int64_t batch,
                                  Bytes chunk_bytes = 16) {
  const Bytes row = static_cast<Bytes>(model.hidden) * static_cast<Bytes>(model.element_bytes);
  if (chunk_bytes == 0 || row % chunk_bytes != 0) throw DomainError("chunk size must divide the hidden row");
  KvRegion r;
  r.layer_first = 0;
  r.layer_last = layers;
  r.token_first = 0;
  r.token_last = 1;
  r.bytes_per_chunk = chunk_bytes;
  r.chunk_count = 2 * layers * batch * static_cast<std::int64_t>(row / chunk_bytes);
  return r;
}

/// Prompt KV of one layer for `batch` requests: one contiguous run per request and K/V half.
inline KvRegion prompt_layer_region(const ModelSpec& model, std::int64_t layer, std::int64_t batch,
                                    std::int64_t prompt_len) {
  KvRegion r;
  r.layer_first = layer;
  r.layer_last = layer + 1;
  r.token_first = 0;
  r.token_last = prompt_len;
  r.bytes_per_chunk = checked_mul(static_cast<Bytes>(model.hidden) * static_cast<Bytes>(model.element_bytes),
                                  static_cast<Bytes>(prompt_len));
  r.chunk_count = 2 * batch;
  return r;
}

/// Layer assignment and batching of one pipeline.
struct PipelineLayout {
  std::int64_t depth = 1;
  std::int64_t layers = 1;
  std::int64_t batch = 1;
  std::int64_t microbatches = 1;

  std::int64_t requests() const { return batch * microbatches; }
};

/// Source and destination layouts for one cache hand-off, plus the token span moved.
struct StreamSetup {
  PipelineLayout source;
  PipelineLayout destination;
  std::int64_t token_first = 0;
  std::int64_t token_last = 1;
};

/// All pieces of a layout change: every (source stage, source microbatch) slab
/// split or merged onto the destination stages and microbatches it overlaps.
inline std::vector<KvPiece> map_pieces(const StreamSetup& setup) {
  const auto& src = setup.source;
  const auto& dst = setup.destination;
  if (src.layers != dst.layers) {
    throw DomainError("layout mismatch: " + std::to_string(src.layers) + " vs " + std::to_string(dst.layers) +
                      " layers");
  }
  if (src.requests() != dst.requests()) {
    throw DomainError("layout mismatch: " + std::to_string(src.requests()) + " vs " +
                      std::to_string(dst.requests()) + " requests");
  }
  if (src.batch < 1 || dst.batch < 1) throw DomainError("layout batch must be >= 1");
  const auto src_layers = stage_layer_ranges(src.layers, src.depth);
  const auto dst_layers = stage_layer_ranges(dst.layers, dst.depth);
  std::vector<KvPiece> out;
  for (std::int64_t sw = 0; sw < src.depth; ++sw) {
    for (std::int64_t dw = 0; dw < dst.depth; ++dw) {
      const auto lf = std::max(src_layers[sw].first, dst_layers[dw].first);
      const auto ll = std::min(src_layers[sw].second, dst_layers[dw].second);
      if (lf >= ll) continue;
      for (std::int64_t sm = 0; sm < src.microbatches; ++sm) {
        const std::int64_t rf0 = sm * src.batch, rl0 = rf0 + src.batch;
        for (std::int64_t dm = rf0 / dst.batch; dm * dst.batch < rl0; ++dm) {
          const auto rf = std::max(rf0, dm * dst.batch);
          const auto rl = std::min(rl0, (dm + 1) * dst.batch);
          if (rf >= rl) continue;
          out.push_back({sw, dw, sm, dm, lf, ll, rf, rl, setup.token_first, setup.token_last});
        }
      }
    }
  }
  return out;
}

namespace detail {

inline TransferPlan route_pieces(const std::vector<KvPiece>& pieces, const ModelSpec& model,
                                 const TransportSpec& transport, bool buffered, const TransportSpec& staging) {
  TransferPlan plan;
  for (const auto& p : pieces) {
    KvRegion region;
    region.layer_first = p.layer_first;
    region.layer_last = p.layer_last;
    region.token_first = p.token_first;
    region.token_last = p.token_last;
    region.chunk_count = 2 * (p.layer_last - p.layer_first) * (p.request_last - p.request_first);
    region.bytes_per_chunk = p.bytes(model) / static_cast<Bytes>(region.chunk_count);
    auto part = scatter(region, transport, buffered, staging, {p.source_worker, MemoryTier::Device},
                        {p.destination_worker, MemoryTier::Host}, p.layer_first);
    part.pieces.push_back(p);
    plan.append(part);
  }
  return plan;
}

}  // namespace detail

/// Everything `worker` in the source layout must send, one piece per overlapping
/// destination stage and microbatch.
inline TransferPlan stream_out(std::int64_t worker, const StreamSetup& setup, const ModelSpec& model,
                               const TransportSpec& transport, bool buffered = true,
                               const TransportSpec& staging = device_local_preset()) {
  if (worker < 0 || worker >= setup.source.depth) throw DomainError("stream_out: worker outside source layout");
  std::vector<KvPiece> mine;
  for (const auto& p : map_pieces(setup)) {
    if (p.source_worker == worker) mine.push_back(p);
  }
  return detail::route_pieces(mine, model, transport, buffered, staging);
}

/// Everything `worker` in the destination layout receives.
inline TransferPlan stream_in(std::int64_t worker, const StreamSetup& setup, const ModelSpec& model,
                              const TransportSpec& transport, bool buffered = true,
                              const TransportSpec& staging = device_local_preset()) {
  if (worker < 0 || worker >= setup.destination.depth) {
    throw DomainError("stream_in: worker outside destination layout");
  }
  std::vector<KvPiece> mine;
  for (const auto& p : map_pieces(setup)) {
    if (p.destination_worker == worker) mine.push_back(p);
  }
  return detail::route_pieces(mine, model, transport, buffered, staging);
}

struct ComputeInterval {
  Millis start = 0;
  Millis end = 0;

  Millis duration() const { return end - start; }
};

/// Layer k's transfer starts once layer k is computed and the previous transfer
/// is done. Returns how far the last transfer finishes past the last compute.
inline Millis overlap_layer_by_layer(std::span<const Millis> transfer, std::span<const ComputeInterval> compute) {
  if (transfer.size() != compute.size()) throw DomainError("one compute interval per transferred layer");
  if (transfer.empty()) return 0;
  Millis finish = compute.front().start;
  for (std::size_t k = 0; k < transfer.size(); ++k) {
    finish = std::max(finish, compute[k].end) + transfer[k];
  }
  return std::max(0.0, finish - compute.back().end);
}

/// Step j streams while step j+1 computes; the last step is masked by a compute
/// of its own length.
inline Millis overlap_token_masked(std::span<const Millis> stream, std::span<const ComputeInterval> compute) {
  if (stream.size() != compute.size()) throw DomainError("one compute interval per streamed step");
  Millis added = 0;
  for (std::size_t j = 0; j < stream.size(); ++j) {
    const Millis mask = j + 1 < compute.size() ? compute[j + 1].duration() : compute[j].duration();
    added += std::max(0.0, stream[j] - mask);
  }
  return added;
}

/// Layer-by-layer streaming over several hops. Each (transport, source,
/// destination) link is one serial channel; a segment's steps run in plan order, the first after the
/// segment's compute ends. Hops of different layers overlap, so a single-hop
/// plan reduces to overlap_layer_by_layer.
inline Millis overlap_hops(const TransferPlan& plan, std::span<const ComputeInterval> compute) {
  if (compute.empty()) return 0;
  std::vector<std::vector<const TransferStep*>> by_segment(compute.size());
  for (const auto& s : plan.steps) {
    if (s.segment < 0 || static_cast<std::size_t>(s.segment) >= compute.size()) {
      throw DomainError("transfer segment outside the compute timeline");
    }
    by_segment[static_cast<std::size_t>(s.segment)].push_back(&s);
  }
  using Link = std::tuple<TransportKind, std::int64_t, MemoryTier, std::int64_t, MemoryTier>;
  std::map<Link, Millis> channel_free;
  Millis finish = compute.back().end;
  for (std::size_t k = 0; k < compute.size(); ++k) {
    Millis ready = compute[k].end;
    for (const auto* s : by_segment[k]) {
      const Link link{s->transport, s->source.worker, s->source.tier, s->destination.worker, s->destination.tier};
      auto& free = channel_free.try_emplace(link, compute.front().start).first->second;
      ready = std::max(ready, free) + s->time;
      free = ready;
    }
    finish = std::max(finish, ready);
  }
  return finish - compute.back().end;
}

/// Added latency of `plan` against a compute timeline with one interval per segment.
inline Millis overlap_schedule(const TransferPlan& plan, std::span<const ComputeInterval> compute) {
  std::vector<Millis> per_segment(compute.size(), 0.0);
  for (const auto& s : plan.steps) {
    if (s.segment < 0 || static_cast<std::size_t>(s.segment) >= per_segment.size()) {
      throw DomainError("transfer segment outside the compute timeline");
    }
    per_segment[static_cast<std::size_t>(s.segment)] += s.time;
  }
  switch (plan.overlap_class) {
    case OverlapClass::LayerByLayer: return overlap_hops(plan, compute);
    case OverlapClass::TokenMasked: return overlap_token_masked(per_segment, compute);
    case OverlapClass::None: break;
  }
  return plan.total_time_unoverlapped;
}

/// Prompt-side streaming plan for one prompt stage: each hosted layer packs its
/// prompt KV, crosses PCIe to host memory, then the network. Segments are
/// stage-local layer indices.
inline TransferPlan prompt_stage_stream(const ModelSpec& model, std::int64_t stage_layers, std::int64_t batch,
                                        std::int64_t prompt_len, const TransportSet& transports) {
  TransferPlan plan;
  plan.overlap_class = OverlapClass::LayerByLayer;
  for (std::int64_t k = 0; k < stage_layers; ++k) {
    const auto region = prompt_layer_region(model, k, batch, prompt_len);
    auto to_host = scatter(region, transports.pcie, true, transports.device_local, {0, MemoryTier::Device},
                           {0, MemoryTier::Host}, k);
    plan.append(to_host);
    plan.append({{0, MemoryTier::Host}, {1, MemoryTier::Host}, region.total_bytes(), transports.network.kind,
                 flush(region.total_bytes(), transports.network), k});
  }
  return plan;
}

/// (compute + unhidden streaming) / compute; exactly 1 when everything hides.
inline double overhead_factor(Millis compute, Millis added) {
  if (!(compute > 0)) throw DomainError("compute time must be > 0");
  return (compute + added) / compute;
}

/// Streaming overhead m for a prompt pipeline of `prompt_depth` stages. Every
/// layer computes for Y/L; the slowest stage sets m.
inline double estimate_m(const ModelSpec& model, const LatencyProfile& profile, std::int64_t prompt_depth,
                         std::int64_t batch, std::int64_t prompt_len, const TransportSet& transports) {
  const Millis per_layer = profile.prompt_time(batch, prompt_len) / static_cast<double>(model.layers);
  double m = 1.0;
  for (const auto& [first, last] : stage_layer_ranges(model.layers, prompt_depth)) {
    const std::int64_t n = last - first;
    std::vector<ComputeInterval> timeline;
    for (std::int64_t k = 0; k < n; ++k) {
      timeline.push_back({per_layer * static_cast<double>(k), per_layer * static_cast<double>(k + 1)});
    }
    const auto plan = prompt_stage_stream(model, n, batch, prompt_len, transports);
    m = std::max(m, overhead_factor(per_layer * static_cast<double>(n), overlap_schedule(plan, timeline)));
  }
  return m;
}

}  // namespace pipesim
