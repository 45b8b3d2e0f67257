#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <random>
#include <string>

namespace lcdet {

enum class LogLevel { kDebug = 0, kInfo = 1, kWarn = 2, kOff = 3 };

// Level comes from TFH_LOG (debug|info), read once. Default: warnings only.
inline LogLevel log_level() {
  static LogLevel level = [] {
    const char* env = std::getenv("TFH_LOG");
    if (env == nullptr) return LogLevel::kWarn;
    std::string v(env);
    if (v == "debug") return LogLevel::kDebug;
    if (v == "info") return LogLevel::kInfo;
    return LogLevel::kWarn;
  }();
  return level;
}

inline void log_msg(LogLevel lvl, const std::string& msg) {
  if (lvl < log_level()) return;
  const char* tag = lvl == LogLevel::kDebug ? "debug" : lvl == LogLevel::kInfo ? "info" : "warn";
  std::fprintf(stderr, "[lcdet %s] %s\n", tag, msg.c_str());
}

inline void log_warn(const std::string& msg) { log_msg(LogLevel::kWarn, msg); }
inline void log_info(const std::string& msg) { log_msg(LogLevel::kInfo, msg); }
inline void log_debug(const std::string& msg) { log_msg(LogLevel::kDebug, msg); }

// Deterministic RNG. mt19937_64 has a standardized output sequence; the
// derived distributions below are implemented here (not via <random>
// distribution classes, whose output is implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t bits() { return gen_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t index(std::uint64_t n) {
    // Rejection sampling keeps the draw unbiased.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace lcdet
