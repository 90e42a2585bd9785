#pragma once

#include <cstddef>
#include <string_view>

namespace mocl {

enum class LogLevel { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

void set_log_level(LogLevel level);
LogLevel log_level();

void log(LogLevel level, std::string_view msg);
inline void log_info(std::string_view msg) { log(LogLevel::info, msg); }
inline void log_warn(std::string_view msg) { log(LogLevel::warn, msg); }

/// Number of warnings emitted so far (including suppressed ones).
std::size_t warning_count();

}  // namespace mocl
