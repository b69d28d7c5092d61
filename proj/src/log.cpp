#include "ferl/log.hpp"

#include <atomic>
#include <cstddef>
#include <iostream>

namespace ferl {

namespace {
std::atomic<bool> g_enabled{true};
std::atomic<std::size_t> g_count{0};
}  // namespace

void log_warning(std::string_view message) {
  ++g_count;
  if (g_enabled) std::cerr << "warning: " << message << '\n';
}

void set_warnings_enabled(bool enabled) { g_enabled = enabled; }

std::size_t warning_count() { return g_count; }

}  // namespace ferl
