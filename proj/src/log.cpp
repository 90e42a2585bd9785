#include "mocl/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace mocl {

namespace {

std::atomic<LogLevel> g_level{LogLevel::warn};
std::atomic<std::size_t> g_warnings{0};
std::mutex g_mutex;

const char* tag(LogLevel level) {
    switch (level) {
        case LogLevel::debug:
            return "debug";
        case LogLevel::info:
            return "info";
        case LogLevel::warn:
            return "warn";
        case LogLevel::error:
            return "error";
        default:
            return "";
    }
}

}  // namespace

void set_log_level(LogLevel level) { g_level = level; }
LogLevel log_level() { return g_level; }

void log(LogLevel level, std::string_view msg) {
    if (level == LogLevel::warn) ++g_warnings;
    if (level < g_level.load()) return;
    std::lock_guard lock(g_mutex);
    std::clog << "[mocl " << tag(level) << "] " << msg << '\n';
}

std::size_t warning_count() { return g_warnings; }

}  // namespace mocl
