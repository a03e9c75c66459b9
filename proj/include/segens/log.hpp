#ifndef SEGENS_LOG_HPP
#define SEGENS_LOG_HPP

#include <sstream>
#include <string>
#include <string_view>

namespace segens::log {

enum class Level { Debug = 0, Info = 1, Warn = 2, Quiet = 3 };

Level& threshold();

/// Writes one line to the shared stderr logger, bypassing the threshold.
void emit(Level level, const std::string& line);

template <typename... Args>
void write(Level level, const Args&... args) {
    if (level < threshold()) return;
    std::ostringstream line;
    (line << ... << args);
    emit(level, line.str());
}

template <typename... Args>
void debug(const Args&... args) { write(Level::Debug, args...); }
template <typename... Args>
void info(const Args&... args) { write(Level::Info, args...); }
template <typename... Args>
void warn(const Args&... args) { write(Level::Warn, args...); }

}  // namespace segens::log

#endif  // SEGENS_LOG_HPP
