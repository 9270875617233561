#pragma once

// Shared error types, logging, RNG stream derivation and small string helpers.

#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace asr {

// Shape/axis mismatches between tensors or layers.
class DimensionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller broke an API precondition (non-scalar loss, missing gradient, ...).
class ContractError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration value or combination.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File / serialization failures.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string str_format(const char* fmt, ...) {
  va_list args;
  va_start(args, fmt);
  va_list args2;
  va_copy(args2, args);
  int n = std::vsnprintf(nullptr, 0, fmt, args);
  va_end(args);
  std::string out(n > 0 ? static_cast<size_t>(n) : 0, '\0');
  if (n > 0) std::vsnprintf(out.data(), out.size() + 1, fmt, args2);
  va_end(args2);
  return out;
}

// Deterministic float formatting for logs/CSV (C locale, shortest round-trip-ish).
inline std::string fmt_g(double v, int digits = 9) {
  return str_format("%.*g", digits, v);
}

enum class LogLevel : int { Error = 0, Warn = 1, Info = 2, Debug = 3 };

// Verbosity from ASR_LOG (error|warn|info|debug); default warn.
inline int log_level() {
  static int level = [] {
    const char* env = std::getenv("ASR_LOG");
    if (!env) return 1;
    if (std::strcmp(env, "error") == 0) return 0;
    if (std::strcmp(env, "warn") == 0) return 1;
    if (std::strcmp(env, "info") == 0) return 2;
    if (std::strcmp(env, "debug") == 0) return 3;
    return 1;
  }();
  return level;
}

inline void log_msg(LogLevel lvl, const std::string& msg) {
  static const char* names[] = {"error", "warn", "info", "debug"};
  if (static_cast<int>(lvl) <= log_level()) {
    std::fprintf(stderr, "[asr:%s] %s\n", names[static_cast<int>(lvl)], msg.c_str());
  }
}

template <typename... Args>
void log_warn(const char* fmt, Args... args) {
  log_msg(LogLevel::Warn, str_format(fmt, args...));
}
template <typename... Args>
void log_info(const char* fmt, Args... args) {
  log_msg(LogLevel::Info, str_format(fmt, args...));
}
template <typename... Args>
void log_debug(const char* fmt, Args... args) {
  log_msg(LogLevel::Debug, str_format(fmt, args...));
}

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent deterministic RNG streams derived from one user seed.
inline uint64_t derive_seed(uint64_t base, uint64_t stream) {
  return splitmix64(base ^ splitmix64(stream + 0x51ed2701));
}

inline std::mt19937_64 make_rng(uint64_t seed) { return std::mt19937_64(seed); }

}  // namespace asr
