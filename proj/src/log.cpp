#include "sigstyle/log.hpp"

#include <spdlog/sinks/stdout_sinks.h>

#include "sigstyle/errors.hpp"

namespace sigstyle {

spdlog::logger& log() {
    static std::shared_ptr<spdlog::logger> logger = [] {
        auto l = spdlog::stderr_logger_mt("sigstyle");
        l->set_pattern("[%Y-%m-%d %H:%M:%S.%e] [%l] %v");
        l->set_level(spdlog::level::info);
        return l;
    }();
    return *logger;
}

void set_log_level(const std::string& level) {
    const auto lvl = spdlog::level::from_str(level);
    if (lvl == spdlog::level::off && level != "off") throw ConfigError("unknown log level '" + level + "'");
    log().set_level(lvl);
}

}  // namespace sigstyle
