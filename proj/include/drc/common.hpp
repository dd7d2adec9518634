#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace drc {

using Bytes = std::vector<uint8_t>;

/// Base error type for all failures raised by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A wire buffer or file could not be decoded (bad magic, truncation, ...).
struct DecodeError : Error {
    using Error::Error;
};

/// A fabric operation did not complete within its deadline.
struct TimeoutError : Error {
    using Error::Error;
};

/// Monotonic wall time in seconds since an arbitrary process-local epoch.
inline double monotonic_seconds() {
    using namespace std::chrono;
    return duration<double>(steady_clock::now().time_since_epoch()).count();
}

class StopWatch {
public:
    StopWatch() : start_(std::chrono::steady_clock::now()) {}
    double elapsed_s() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }
    void restart() { start_ = std::chrono::steady_clock::now(); }

private:
    std::chrono::steady_clock::time_point start_;
};

namespace logging {

enum class Level : int { Off = 0, Error = 1, Warn = 2, Info = 3, Debug = 4 };

inline Level level_from_name(std::string_view name) {
    if (name == "off") return Level::Off;
    if (name == "error") return Level::Error;
    if (name == "warn") return Level::Warn;
    if (name == "info") return Level::Info;
    if (name == "debug") return Level::Debug;
    return Level::Warn;
}

inline Level& current_level() {
    static Level lvl = [] {
        const char* env = std::getenv("DRC_LOG");
        return env ? level_from_name(env) : Level::Warn;
    }();
    return lvl;
}

inline void set_level(Level lvl) { current_level() = lvl; }

inline void write(Level lvl, const std::string& msg) {
    if (static_cast<int>(lvl) > static_cast<int>(current_level())) return;
    static std::mutex mu;
    static const char* names[] = {"off", "error", "warn", "info", "debug"};
    std::lock_guard<std::mutex> lock(mu);
    std::fprintf(stderr, "[drc %s] %s\n", names[static_cast<int>(lvl)], msg.c_str());
}

}  // namespace logging

inline void log_error(const std::string& msg) { logging::write(logging::Level::Error, msg); }
inline void log_warn(const std::string& msg) { logging::write(logging::Level::Warn, msg); }
inline void log_info(const std::string& msg) { logging::write(logging::Level::Info, msg); }
inline void log_debug(const std::string& msg) { logging::write(logging::Level::Debug, msg); }

}  // namespace drc
