#include "lmreg/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace lmreg {

namespace {
std::atomic<LogLevel> g_level{LogLevel::Warning};
std::mutex g_mutex;
constexpr const char *kNames[] = {"debug", "info", "warning", "error"};
} // namespace

void set_log_level(LogLevel level) { g_level = level; }
LogLevel log_level() { return g_level; }

void log(LogLevel level, std::string_view message) {
    if (level < g_level.load() || level == LogLevel::Silent) return;
    std::lock_guard lock(g_mutex);
    std::cerr << "[lmreg " << kNames[static_cast<int>(level)] << "] " << message << '\n';
}

} // namespace lmreg
