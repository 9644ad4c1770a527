#pragma once

// Thin logging front end. Messages are formatted here and handed to an
// spdlog sink compiled in a separate translation unit, which keeps the
// fmt copy bundled with libtorch away from the one spdlog was built with.

#include <fmt/format.h>

#include <string>
#include <utility>

namespace cfdiff::log {

enum class Level { debug, info, warn, error, off };

void emit(Level level, const std::string& message);
void set_level(Level level);
/// "debug", "info", "warn", "error" or "off"; unknown names map to info.
Level parse_level(const std::string& name);

template <typename... Args>
void debug(fmt::format_string<Args...> f, Args&&... args) {
  emit(Level::debug, fmt::format(f, std::forward<Args>(args)...));
}
template <typename... Args>
void info(fmt::format_string<Args...> f, Args&&... args) {
  emit(Level::info, fmt::format(f, std::forward<Args>(args)...));
}
template <typename... Args>
void warn(fmt::format_string<Args...> f, Args&&... args) {
  emit(Level::warn, fmt::format(f, std::forward<Args>(args)...));
}
template <typename... Args>
void error(fmt::format_string<Args...> f, Args&&... args) {
  emit(Level::error, fmt::format(f, std::forward<Args>(args)...));
}

}  // namespace cfdiff::log
