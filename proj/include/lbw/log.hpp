// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <mutex>
#include <string>
#include <string_view>

namespace lbw::log {

enum class Level { error = 0, warn = 1, info = 2, debug = 3 };

/// LBW_LOG = error | warn | info | debug (or 0..3). Default warn.
inline Level parse_level(const char* s) {
    if (!s) return Level::warn;
    const std::string_view v(s);
    if (v == "error" || v == "0") return Level::error;
    if (v == "warn" || v == "1") return Level::warn;
    if (v == "info" || v == "2") return Level::info;
    if (v == "debug" || v == "3") return Level::debug;
    return Level::warn;
}

inline Level& threshold() {
    static Level level = parse_level(std::getenv("LBW_LOG"));
    return level;
}

inline bool enabled(Level l) { return static_cast<int>(l) <= static_cast<int>(threshold()); }

inline void write(Level l, std::string_view msg) {
    if (!enabled(l)) return;
    static constexpr const char* tags[] = {"E", "W", "I", "D"};
    static std::mutex mu;
    const double t = std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
    std::lock_guard lock(mu);
    std::fprintf(stderr, "[%s %.3f] %.*s\n", tags[static_cast<int>(l)], t, static_cast<int>(msg.size()), msg.data());
}

inline void error(std::string_view m) { write(Level::error, m); }
inline void warn(std::string_view m) { write(Level::warn, m); }
inline void info(std::string_view m) { write(Level::info, m); }
inline void debug(std::string_view m) { write(Level::debug, m); }

}  // namespace lbw::log
