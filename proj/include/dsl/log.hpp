#pragma once

#include <functional>
#include <iostream>
#include <string_view>

namespace dsl {

enum class LogLevel { info, warning };

using LogSink = std::function<void(LogLevel, std::string_view)>;

/// Process-wide log hook. Defaults to stderr; tests swap it to capture warnings.
inline LogSink& log_sink() {
  static LogSink sink = [](LogLevel level, std::string_view msg) {
    std::clog << (level == LogLevel::warning ? "[warn] " : "[info] ") << msg << '\n';
  };
  return sink;
}

inline void log_info(std::string_view msg) {
  if (log_sink()) log_sink()(LogLevel::info, msg);
}

inline void log_warning(std::string_view msg) {
  if (log_sink()) log_sink()(LogLevel::warning, msg);
}

}  // namespace dsl
