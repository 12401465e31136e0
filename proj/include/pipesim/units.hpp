#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

#include "pipesim/errors.hpp"

namespace pipesim {

/// Exact byte counts. Memory arithmetic never rounds.
using Bytes = std::uint64_t;

/// Simulated time in milliseconds.
using Millis = double;

inline constexpr Bytes kKiB = 1024;
inline constexpr Bytes kMiB = 1024 * kKiB;
inline constexpr Bytes kGiB = 1024 * kMiB;

/// Milliseconds in one machine-hour; the unit for normalized cost.
inline constexpr double kMillisPerHour = 3'600'000.0;

inline Bytes checked_mul(Bytes a, Bytes b) {
  if (a != 0 && b > std::numeric_limits<Bytes>::max() / a) {
    throw DomainError("byte count overflows 64 bits");
  }
  return a * b;
}

inline Bytes checked_add(Bytes a, Bytes b) {
  if (b > std::numeric_limits<Bytes>::max() - a) {
    throw DomainError("byte count overflows 64 bits");
  }
  return a + b;
}

inline constexpr std::uint64_t ceil_div(std::uint64_t num, std::uint64_t den) {
  return num / den + (num % den != 0 ? 1 : 0);
}

inline bool nearly_equal(double a, double b, double rel = 1e-9) {
  const double scale = std::max({1.0, std::fabs(a), std::fabs(b)});
  return std::fabs(a - b) <= rel * scale;
}

}  // namespace pipesim
