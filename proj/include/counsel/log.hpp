#pragma once

#include <iostream>
#include <mutex>
#include <string_view>

namespace counsel {

enum class LogLevel { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

inline LogLevel& log_threshold() {
    static LogLevel level = LogLevel::warn;
    return level;
}

inline void log(LogLevel level, std::string_view message) {
    if (level < log_threshold()) return;
    static std::mutex mu;
    static constexpr const char* names[] = {"debug", "info", "warn", "error"};
    std::lock_guard lock(mu);
    std::clog << "[" << names[static_cast<int>(level)] << "] " << message << '\n';
}

}  // namespace counsel
