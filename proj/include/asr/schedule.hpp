#pragma once

// Per-scale gate ramp for incremental training. Gates multiply modeler
// outputs; scale 0 stays at 1 while finer scales ramp linearly from their
// start epoch, clamped at 1. The first increment lands at the end of the
// start epoch, so it is visible from start_epoch + 1 on.

#include <algorithm>
#include <vector>

#include "asr/common.hpp"

namespace asr {

struct ScheduleConfig {
  std::vector<double> gate_init = {1.0, 0.01, 0.01};
  std::vector<double> gamma = {0.0, 0.1, 0.1};
  std::vector<int> gate_start_epoch = {0, 8, 20};
  int reg_start_epoch = 35;
};

struct ScheduleState {
  std::vector<double> gates;
  bool reg_active = false;
};

inline ScheduleState schedule_step(int epoch, const ScheduleConfig& cfg) {
  if (epoch < 1) throw ContractError("schedule_step: epochs are 1-based");
  ScheduleState st;
  for (size_t j = 0; j < cfg.gate_init.size(); ++j) {
    // literal recurrence, one increment per completed epoch from the start
    double gate = cfg.gate_init[j];
    for (int e = cfg.gate_start_epoch[j]; e < epoch; ++e) {
      gate = std::min(1.0, gate + cfg.gamma[j]);
    }
    st.gates.push_back(gate);
  }
  st.reg_active = epoch >= cfg.reg_start_epoch;
  return st;
}

}  // namespace asr
