#include "ferl/scheduler.hpp"

#include <algorithm>
#include <ostream>

#include "ferl/errors.hpp"
#include "ferl/format.hpp"
#include "ferl/log.hpp"

namespace ferl {

void validate(const SchedulerConfig& cfg) {
  if (!(cfg.ema >= 0.0 && cfg.ema < 1.0)) throw ValidationError("scheduler: ema must lie in [0,1)");
  if (!(cfg.delta > 0.0)) throw ValidationError("scheduler: delta must be > 0");
  if (!(cfg.tau_low < cfg.tau_high)) throw ValidationError("scheduler: tau_low must be < tau_high");
  if (!(cfg.rho_min >= 0.0 && cfg.rho_min <= cfg.rho_max && cfg.rho_max <= 1.0)) {
    throw ValidationError("scheduler: need 0 <= rho_min <= rho_max <= 1");
  }
  if (!(cfg.rho0 >= cfg.rho_min && cfg.rho0 <= cfg.rho_max)) {
    throw ValidationError("scheduler: rho0 must lie in [rho_min, rho_max]");
  }
}

SchedulerState initial_state(const SchedulerConfig& cfg) {
  SchedulerState s;
  s.rho = cfg.rho0;
  return s;
}

RewardPath choose_path(const SchedulerState& state, double u) {
  return u < state.rho ? RewardPath::kNS : RewardPath::kCE;
}

SchedulerState update_ema(SchedulerState state, std::optional<double> r_bar, const SchedulerConfig& cfg) {
  if (!r_bar) {
    log_warning("scheduler: epoch " + std::to_string(state.epoch) + " had no CE batch; r_hat carried over");
    return state;
  }
  if (!state.initialized) {
    state.r_hat = *r_bar;
    state.initialized = true;
  } else {
    state.r_hat = cfg.ema * state.r_hat + (1.0 - cfg.ema) * *r_bar;
  }
  return state;
}

SchedulerState update_rho(SchedulerState state, const SchedulerConfig& cfg) {
  if (!state.initialized) return state;
  if (state.r_hat >= cfg.tau_high) {
    state.rho += cfg.delta;
  } else if (state.r_hat < cfg.tau_low) {
    state.rho -= cfg.delta;
  }
  state.rho = std::clamp(state.rho, cfg.rho_min, cfg.rho_max);
  return state;
}

SchedulerState end_epoch(SchedulerState state, std::optional<double> r_bar, const SchedulerConfig& cfg) {
  state = update_rho(update_ema(state, r_bar, cfg), cfg);
  ++state.epoch;
  return state;
}

void write_trace_row(std::ostream& os, const SchedulerTraceRow& row) {
  os << row.epoch << ',' << (row.r_bar ? format_real(*row.r_bar) : "n/a") << ','
     << (row.after.initialized ? format_real(row.after.r_hat) : "n/a") << ',' << format_real(row.after.rho) << ','
     << row.ns_batches << ',' << row.ce_batches << '\n';
}

}  // namespace ferl
