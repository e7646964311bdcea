#pragma once

#include <spdlog/spdlog.h>

#include <memory>
#include <string>

namespace sigstyle {

// Library-wide logger ("sigstyle"), writing to stderr.
spdlog::logger& log();
// Accepts trace, debug, info, warn, error, critical, off.
void set_log_level(const std::string& level);

}  // namespace sigstyle
