#include "segens/log.hpp"

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

namespace segens::log {

void emit(Level level, const std::string& line) {
    static const auto logger = [] {
        auto l = spdlog::stderr_color_mt("segens");
        l->set_level(spdlog::level::debug);
        l->set_pattern("[%l] %v");
        return l;
    }();
    const auto lvl = level == Level::Debug ? spdlog::level::debug
                     : level == Level::Info ? spdlog::level::info
                                            : spdlog::level::warn;
    logger->log(lvl, "{}", line);
}

}  // namespace segens::log
