#pragma once

#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace parafreq {

inline constexpr double kPi = std::numbers::pi;

// Runtime failure inside the numerical pipeline (positivity loss, extinction,
// stability violation, mismatched grids, ...).
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid scenario/configuration input. Kept separate so the CLI can map it
// to its own exit code.
struct ConfigError : Error {
  using Error::Error;
};

inline std::string strfmt(const char* fmt, ...) {
  va_list args;
  va_start(args, fmt);
  char buf[512];
  vsnprintf(buf, sizeof(buf), fmt, args);
  va_end(args);
  return std::string(buf);
}

// Deterministic shortest round-trip double formatting for artifacts.
inline std::string fmt_double(double x) {
  char buf[40];
  snprintf(buf, sizeof(buf), "%.17g", x);
  return std::string(buf);
}

struct Tolerances {
  double eps_floor = 1e-6;       // positivity floor for Ricci bounds
  double mass_tol = 1e-6;        // weighted-measure unit-mass drift
  double quad_rel = 1e-8;        // adaptive Simpson relative tolerance
  double envelope_margin = 1e-6; // max-principle envelope slack
  double mono_rel = 1e-8;        // monotonicity margin, relative part
  double harnack_rel = 1e-6;     // Harnack margin, relative to I scale
  double scale = 1.0;            // global multiplier (CLI --tol-scale)
};

inline double sq(double x) { return x * x; }

}  // namespace parafreq
