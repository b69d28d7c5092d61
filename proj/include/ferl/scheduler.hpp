#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string_view>

#include "ferl/rewards.hpp"

namespace ferl {

struct SchedulerConfig {
  double ema = 0.9;
  double delta = 0.05;
  double tau_high = 0.7;
  double tau_low = 0.4;
  double rho_min = 0.1;
  double rho_max = 0.6;
  double rho0 = 0.3;
};

void validate(const SchedulerConfig& cfg);

/// Routing probability rho and the EMA r_hat of CE-path rewards.
struct SchedulerState {
  std::size_t epoch = 0;
  double rho = 0.3;
  double r_hat = 0.0;
  bool initialized = false;

  friend bool operator==(const SchedulerState&, const SchedulerState&) = default;
};

SchedulerState initial_state(const SchedulerConfig& cfg);

/// NS iff u < rho.
RewardPath choose_path(const SchedulerState& state, double u);

/// r_hat = ema * r_hat + (1 - ema) * r_bar; the first observed epoch sets
/// r_hat = r_bar. Without a CE batch (nullopt) r_hat is kept and a warning
/// is logged.
SchedulerState update_ema(SchedulerState state, std::optional<double> r_bar, const SchedulerConfig& cfg);

/// Step rho up by delta when r_hat >= tau_high, down when r_hat < tau_low,
/// then clamp to [rho_min, rho_max]. No change before r_hat exists.
SchedulerState update_rho(SchedulerState state, const SchedulerConfig& cfg);

/// update_ema, update_rho, then advance the epoch counter.
SchedulerState end_epoch(SchedulerState state, std::optional<double> r_bar, const SchedulerConfig& cfg);

inline constexpr std::string_view kSchedulerTraceHeader = "epoch,r_bar_e,r_hat,rho,ns_batches,ce_batches";

/// One trace row; r_hat and rho are the values after the epoch's update.
struct SchedulerTraceRow {
  std::size_t epoch = 0;
  std::optional<double> r_bar;
  SchedulerState after;
  std::size_t ns_batches = 0;
  std::size_t ce_batches = 0;
};

void write_trace_row(std::ostream& os, const SchedulerTraceRow& row);

}  // namespace ferl
