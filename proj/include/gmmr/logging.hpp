#pragma once

// Minimal stderr logging. Verbosity comes from GMMR_LOG:
// error | warn | info | debug (default warn).

#include <cstdio>
#include <cstdlib>
#include <string>
#include <string_view>

#include <fmt/format.h>

namespace gmmr::logging {

enum class Level { error = 0, warn = 1, info = 2, debug = 3 };

inline Level level_from_env() {
  const char* v = std::getenv("GMMR_LOG");
  if (!v) return Level::warn;
  const std::string_view s(v);
  if (s == "error") return Level::error;
  if (s == "info") return Level::info;
  if (s == "debug") return Level::debug;
  return Level::warn;
}

inline Level& threshold() {
  static Level level = level_from_env();
  return level;
}

inline bool enabled(Level l) { return static_cast<int>(l) <= static_cast<int>(threshold()); }

template <typename... Args>
void write(Level l, fmt::format_string<Args...> f, Args&&... args) {
  if (!enabled(l)) return;
  static constexpr const char* names[] = {"error", "warn", "info", "debug"};
  std::string line = fmt::format("[{}] ", names[static_cast<int>(l)]);
  line += fmt::format(f, std::forward<Args>(args)...);
  line += '\n';
  std::fputs(line.c_str(), stderr);
}

template <typename... Args>
void info(fmt::format_string<Args...> f, Args&&... args) {
  write(Level::info, f, std::forward<Args>(args)...);
}

template <typename... Args>
void debug(fmt::format_string<Args...> f, Args&&... args) {
  write(Level::debug, f, std::forward<Args>(args)...);
}

template <typename... Args>
void warn(fmt::format_string<Args...> f, Args&&... args) {
  write(Level::warn, f, std::forward<Args>(args)...);
}

}  // namespace gmmr::logging
