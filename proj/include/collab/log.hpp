#pragma once

#include <spdlog/spdlog.h>

#include <utility>

namespace collab::log {

/// Shared stderr logger. Level comes from COLLAB_LOG (off, error, warn, info,
/// debug, trace); the default is warn.
spdlog::logger& logger();

/// Overrides the environment, e.g. for a --verbose flag.
void set_level(spdlog::level::level_enum level);

template <typename... Args>
void error(fmt::format_string<Args...> fmt, Args&&... args) {
  logger().error(fmt, std::forward<Args>(args)...);
}
template <typename... Args>
void warn(fmt::format_string<Args...> fmt, Args&&... args) {
  logger().warn(fmt, std::forward<Args>(args)...);
}
template <typename... Args>
void info(fmt::format_string<Args...> fmt, Args&&... args) {
  logger().info(fmt, std::forward<Args>(args)...);
}
template <typename... Args>
void debug(fmt::format_string<Args...> fmt, Args&&... args) {
  logger().debug(fmt, std::forward<Args>(args)...);
}

}  // namespace collab::log
