#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "pipesim/errors.hpp"
#include "pipesim/simcore.hpp"
#include "pipesim/units.hpp"

namespace pipesim {

struct TraceRecord {
  Millis arrival = 0;
  std::int64_t prompt_len = 1;
  std::int64_t new_tokens = 1;
};

struct Trace {
  std::vector<TraceRecord> records;

  void validate() const {
    if (records.empty()) throw ConfigError("trace is empty");
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& r = records[i];
      if (r.arrival < 0 || r.prompt_len < 1 || r.new_tokens < 1) {
        throw ConfigError("trace record " + std::to_string(i) + ": arrival >= 0, prompt_len >= 1, new_tokens >= 1");
      }
      if (i > 0 && r.arrival < records[i - 1].arrival) {
        throw ConfigError("trace record " + std::to_string(i) + ": arrivals must be non-decreasing");
      }
    }
  }

  std::int64_t max_prompt_len() const {
    std::int64_t m = 0;
    for (const auto& r : records) m = std::max(m, r.prompt_len);
    return m;
  }

  std::int64_t max_sequence() const {
    std::int64_t m = 0;
    for (const auto& r : records) m = std::max(m, r.prompt_len + r.new_tokens);
    return m;
  }
};

/// CSV with header `arrival_ms,prompt_len,new_tokens`.
inline Trace parse_trace_csv(std::istream& in) {
  Trace trace;
  std::string line;
  long lineno = 0;
  bool header = true;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    if (header) {
      header = false;
      if (line.find("arrival") != std::string::npos) continue;
    }
    std::istringstream fields(line);
    std::string a, p, n, extra;
    if (!std::getline(fields, a, ',') || !std::getline(fields, p, ',') || !std::getline(fields, n, ',') ||
        std::getline(fields, extra, ',')) {
      throw ParseError("expected 3 comma-separated fields", lineno);
    }
    TraceRecord r;
    try {
      std::size_t used = 0;
      r.arrival = std::stod(a, &used);
      if (a.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(a);
      r.prompt_len = std::stoll(p, &used);
      if (p.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(p);
      r.new_tokens = std::stoll(n, &used);
      if (n.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(n);
    } catch (const std::logic_error&) {
      throw ParseError("malformed number in '" + line + "'", lineno);
    }
    if (r.arrival < 0 || r.prompt_len < 1 || r.new_tokens < 1) {
      throw ParseError("negative arrival or non-positive length in '" + line + "'", lineno);
    }
    trace.records.push_back(r);
  }
  trace.validate();
  return trace;
}

inline Trace load_trace_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open trace file " + path);
  return parse_trace_csv(in);
}

enum class DistKind { Fixed, Uniform, Lognormal };

/// Integer length distribution. Lognormal samples are rounded and clipped to [min, max].
struct LengthDistribution {
  DistKind kind = DistKind::Fixed;
  std::int64_t value = 1;
  std::int64_t min = 1;
  std::int64_t max = 1;
  double median = 1;
  double sigma = 1;

  void validate(const std::string& what) const {
    if (kind == DistKind::Fixed && value < 1) throw ConfigError(what + ": fixed value must be >= 1");
    if (kind != DistKind::Fixed && (min < 1 || max < min)) throw ConfigError(what + ": need 1 <= min <= max");
    if (kind == DistKind::Lognormal && (!(median > 0) || !(sigma >= 0))) {
      throw ConfigError(what + ": lognormal needs median > 0, sigma >= 0");
    }
  }

  template <class Rng>
  std::int64_t sample(Rng& rng) const {
    switch (kind) {
      case DistKind::Fixed: return value;
      case DistKind::Uniform: return std::uniform_int_distribution<std::int64_t>(min, max)(rng);
      case DistKind::Lognormal: {
        const double x = std::lognormal_distribution<double>(std::log(median), sigma)(rng);
        return std::clamp(static_cast<std::int64_t>(std::llround(x)), min, max);
      }
    }
    return value;
  }
};

/// Open-loop Poisson arrivals: either `count` requests or everything before `horizon_ms`.
struct GeneratorSpec {
  double rate_per_s = 1.0;
  std::int64_t count = 0;
  Millis horizon_ms = 0;
  LengthDistribution prompt_len;
  LengthDistribution new_tokens;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(rate_per_s > 0)) throw ConfigError("generator rate must be > 0");
    if (count < 0 || horizon_ms < 0 || (count == 0 && horizon_ms == 0)) {
      throw ConfigError("generator needs a positive count or horizon");
    }
    prompt_len.validate("prompt_len");
    new_tokens.validate("new_tokens");
  }
};

inline Trace generate_trace(const GeneratorSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::exponential_distribution<double> gap(spec.rate_per_s / 1000.0);
  Trace trace;
  Millis t = 0;
  while (true) {
    t += gap(rng);
    if (spec.count > 0 && static_cast<std::int64_t>(trace.records.size()) >= spec.count) break;
    if (spec.count == 0 && t > spec.horizon_ms) break;
    TraceRecord r;
    r.arrival = t;
    r.prompt_len = spec.prompt_len.sample(rng);
    r.new_tokens = spec.new_tokens.sample(rng);
    trace.records.push_back(r);
  }
  if (trace.records.empty()) throw ConfigError("generator produced no requests; raise the horizon or rate");
  return trace;
}

struct BatchingOptions {
  std::int64_t microbatch_size = 1;
  /// Close a short batch once its oldest request has waited this long. Off by default.
  std::optional<Millis> partial_batch_timeout_ms;
};

/// Groups requests into microbatches of b in arrival order. A batch is ready when
/// its last member arrives; it runs for the longest member's token count and pads
/// to the longest prompt. A short final batch is released at its last arrival.
inline Workload form_microbatches(const Trace& trace, const BatchingOptions& options) {
  trace.validate();
  if (options.microbatch_size < 1) throw ConfigError("microbatch size must be >= 1");
  Workload w;
  const auto n = trace.records.size();
  std::size_t i = 0;
  while (i < n) {
    MicrobatchSpec m;
    m.id = static_cast<std::int64_t>(w.microbatches.size());
    m.prompt_len = 0;
    m.new_tokens = 0;
    const Millis opened = trace.records[i].arrival;
    std::size_t j = i;
    while (j < n && static_cast<std::int64_t>(j - i) < options.microbatch_size) {
      if (options.partial_batch_timeout_ms && j > i && trace.records[j].arrival > opened + *options.partial_batch_timeout_ms) {
        break;
      }
      const auto& r = trace.records[j];
      const auto id = static_cast<std::int64_t>(j);
      w.requests.push_back({id, r.arrival, r.prompt_len, r.new_tokens});
      m.request_ids.push_back(id);
      m.prompt_len = std::max(m.prompt_len, r.prompt_len);
      m.new_tokens = std::max(m.new_tokens, r.new_tokens);
      m.arrival = r.arrival;
      ++j;
    }
    m.batch = static_cast<std::int64_t>(j - i);
    if (m.batch < options.microbatch_size && options.partial_batch_timeout_ms) {
      m.arrival = std::max(m.arrival, opened + *options.partial_batch_timeout_ms);
    }
    w.microbatches.push_back(std::move(m));
    i = j;
  }
  return w;
}

/// A trace of `count` identical requests arriving together.
inline Trace uniform_trace(std::int64_t count, std::int64_t prompt_len, std::int64_t new_tokens, Millis arrival = 0) {
  Trace t;
  for (std::int64_t i = 0; i < count; ++i) t.records.push_back({arrival, prompt_len, new_tokens});
  return t;
}

}  // namespace pipesim
