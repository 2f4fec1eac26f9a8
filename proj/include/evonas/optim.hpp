#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "evonas/tensor.hpp"

namespace evonas {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// One bias-corrected Adam update in place; `step` counts from 1.
void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m, std::span<double> v,
                 double lr, const AdamConfig& config, long step);

// Adam with per-parameter moment state and step count, keyed by parameter
// name. Parameters that are never stepped keep no state.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  // Every listed parameter must carry a gradient.
  void step(const std::vector<std::pair<std::string, Tensor>>& params, double lr);

  long steps_taken(const std::string& name) const;
  const AdamConfig& config() const { return config_; }

  // Moments as "adam.m.<name>", "adam.v.<name>", "adam.t.<name>".
  void save_state(ParameterStore& out) const;
  void load_state(const ParameterStore& in);

 private:
  struct Slot {
    std::vector<double> m, v;
    long t = 0;
  };
  AdamConfig config_;
  std::map<std::string, Slot> slots_;
};

}  // namespace evonas
