#pragma once

#include <cstdlib>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace kgcg {

// All recoverable failures surface as kgcg::Error; the CLI turns them into
// a one-line diagnostic and exit code 1.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

inline void require(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

enum class LogLevel { error = 0, info = 1, debug = 2 };

// Level comes from the KGCG_LOG environment variable: error|info|debug.
inline LogLevel log_level() {
  static const LogLevel level = [] {
    const char* env = std::getenv("KGCG_LOG");
    if (!env) return LogLevel::info;
    std::string v(env);
    if (v == "error") return LogLevel::error;
    if (v == "debug") return LogLevel::debug;
    return LogLevel::info;
  }();
  return level;
}

inline void log_info(const std::string& msg) {
  if (log_level() >= LogLevel::info) std::fprintf(stderr, "[kgcg] %s\n", msg.c_str());
}

inline void log_debug(const std::string& msg) {
  if (log_level() >= LogLevel::debug) std::fprintf(stderr, "[kgcg:debug] %s\n", msg.c_str());
}

}  // namespace kgcg
