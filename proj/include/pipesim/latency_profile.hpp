#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <vector>

#include "pipesim/errors.hpp"
#include "pipesim/units.hpp"

namespace pipesim {

struct PromptPoint {
  std::int64_t batch = 0;
  std::int64_t prompt_len = 0;
  Millis ms = 0;
};

struct TokenPoint {
  std::int64_t batch = 0;
  Millis ms = 0;
};

enum class ScalingMode { Bilinear, Table };

/// Whole-model latencies: prompt time Y(b, p) and per-token time t(b) for one
/// microbatch with every layer on one machine. A stage hosting k of L layers
/// takes k/L of these.
class LatencyProfile {
 public:
  LatencyProfile() = default;

  LatencyProfile(std::vector<PromptPoint> prompt_table, std::vector<TokenPoint> token_table,
                 ScalingMode mode = ScalingMode::Bilinear, bool fit_intercept = true)
      : prompt_table_(std::move(prompt_table)), token_table_(std::move(token_table)), mode_(mode) {
    if (prompt_table_.empty()) throw ConfigError("prompt calibration table is empty");
    if (token_table_.empty()) throw ConfigError("token calibration table is empty");
    for (const auto& p : prompt_table_) {
      if (p.batch < 1 || p.prompt_len < 1) throw ConfigError("prompt calibration needs batch, prompt_len >= 1");
      if (!(p.ms > 0)) throw ConfigError("prompt calibration latencies must be > 0");
    }
    for (const auto& t : token_table_) {
      if (t.batch < 1) throw ConfigError("token calibration needs batch >= 1");
      if (!(t.ms > 0)) throw ConfigError("token calibration latencies must be > 0");
    }
    std::sort(token_table_.begin(), token_table_.end(),
              [](const TokenPoint& a, const TokenPoint& b) { return a.batch < b.batch; });
    for (std::size_t i = 1; i < token_table_.size(); ++i) {
      if (token_table_[i].batch == token_table_[i - 1].batch) {
        throw ConfigError("duplicate batch in token calibration table");
      }
    }
    for (const auto& p : prompt_table_) rows_[p.batch].emplace_back(p.prompt_len, p.ms);
    for (auto& [batch, row] : rows_) {
      std::sort(row.begin(), row.end());
      for (std::size_t i = 1; i < row.size(); ++i) {
        if (row[i].first == row[i - 1].first) throw ConfigError("duplicate (batch, prompt_len) calibration point");
        if (row[i].second < row[i - 1].second) {
          throw ConfigError("prompt time must be non-decreasing in prompt_len for fixed batch");
        }
      }
    }
    fit(fit_intercept);
  }

  ScalingMode mode() const noexcept { return mode_; }
  double slope() const noexcept { return alpha_; }
  double intercept() const noexcept { return beta_; }

  /// Y(b, p) in ms.
  Millis prompt_time(std::int64_t batch, std::int64_t prompt_len) const {
    if (batch < 1 || prompt_len < 1) throw DomainError("prompt_time needs batch, prompt_len >= 1");
    require_calibrated();
    if (mode_ == ScalingMode::Bilinear) return alpha_ * static_cast<double>(batch * prompt_len) + beta_;
    auto hi = rows_.lower_bound(batch);
    if (hi == rows_.end()) return interpolate_row(std::prev(hi)->second, prompt_len);
    if (hi->first == batch || hi == rows_.begin()) return interpolate_row(hi->second, prompt_len);
    auto lo = std::prev(hi);
    const double y0 = interpolate_row(lo->second, prompt_len);
    const double y1 = interpolate_row(hi->second, prompt_len);
    const double f = static_cast<double>(batch - lo->first) / static_cast<double>(hi->first - lo->first);
    return y0 + f * (y1 - y0);
  }

  /// t(b) in ms; linear between entries, constant beyond the table edges.
  Millis token_time(std::int64_t batch) const {
    if (batch < 1) throw DomainError("token_time needs batch >= 1");
    require_calibrated();
    if (batch <= token_table_.front().batch) return token_table_.front().ms;
    if (batch >= token_table_.back().batch) return token_table_.back().ms;
    auto hi = std::lower_bound(token_table_.begin(), token_table_.end(), batch,
                               [](const TokenPoint& p, std::int64_t b) { return p.batch < b; });
    if (hi->batch == batch) return hi->ms;
    auto lo = std::prev(hi);
    const double f = static_cast<double>(batch - lo->batch) / static_cast<double>(hi->batch - lo->batch);
    return lo->ms + f * (hi->ms - lo->ms);
  }

  /// Y / t.
  double bimodal_ratio(std::int64_t batch, std::int64_t prompt_len) const {
    return prompt_time(batch, prompt_len) / token_time(batch);
  }

  /// Measured minus fitted prompt time at every calibration point (bilinear mode).
  std::vector<double> fit_residuals() const {
    std::vector<double> out;
    out.reserve(prompt_table_.size());
    for (const auto& p : prompt_table_) {
      out.push_back(p.ms - (alpha_ * static_cast<double>(p.batch * p.prompt_len) + beta_));
    }
    return out;
  }

  const std::vector<PromptPoint>& prompt_table() const noexcept { return prompt_table_; }
  const std::vector<TokenPoint>& token_table() const noexcept { return token_table_; }

 private:
  void require_calibrated() const {
    if (prompt_table_.empty() || token_table_.empty()) throw ConfigError("latency profile is not calibrated");
  }

  // Least squares of ms against b*p. A single point (or a degenerate x spread)
  // pins the intercept at zero.
  void fit(bool fit_intercept) {
    const auto n = static_cast<double>(prompt_table_.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (const auto& p : prompt_table_) {
      const double x = static_cast<double>(p.batch * p.prompt_len);
      sx += x;
      sy += p.ms;
      sxx += x * x;
      sxy += x * p.ms;
    }
    const double denom = n * sxx - sx * sx;
    if (fit_intercept && prompt_table_.size() > 1 && denom > 0) {
      alpha_ = (n * sxy - sx * sy) / denom;
      beta_ = (sy - alpha_ * sx) / n;
    } else {
      alpha_ = sxy / sxx;
      beta_ = 0;
    }
    if (mode_ == ScalingMode::Bilinear && alpha_ < 0) {
      throw ConfigError("bilinear prompt fit has a negative slope");
    }
  }

  static double interpolate_row(const std::vector<std::pair<std::int64_t, double>>& row, std::int64_t p) {
    if (p <= row.front().first) return row.front().second;
    if (p >= row.back().first) return row.back().second;
    auto hi = std::lower_bound(row.begin(), row.end(), p,
                               [](const std::pair<std::int64_t, double>& e, std::int64_t v) { return e.first < v; });
    if (hi->first == p) return hi->second;
    auto lo = std::prev(hi);
    const double f = static_cast<double>(p - lo->first) / static_cast<double>(hi->first - lo->first);
    return lo->second + f * (hi->second - lo->second);
  }

  std::vector<PromptPoint> prompt_table_;
  std::vector<TokenPoint> token_table_;
  std::map<std::int64_t, std::vector<std::pair<std::int64_t, double>>> rows_;
  ScalingMode mode_ = ScalingMode::Bilinear;
  double alpha_ = 0;
  double beta_ = 0;
};

/// Profile with constant whole-model times, independent of batch and prompt length.
inline LatencyProfile constant_profile(Millis prompt_ms, Millis token_ms) {
  return LatencyProfile({{1, 1, prompt_ms}}, {{1, token_ms}}, ScalingMode::Table);
}

}  // namespace pipesim
