#pragma once

#include <cstddef>
#include <string_view>

namespace ferl {

/// Warnings go to stderr unless silenced (tests silence them).
void log_warning(std::string_view message);
void set_warnings_enabled(bool enabled);
/// Number of warnings issued since start-up, silenced ones included.
std::size_t warning_count();

}  // namespace ferl
