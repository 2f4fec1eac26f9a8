#include "evonas/optim.hpp"

#include <cmath>

namespace evonas {

void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m, std::span<double> v,
                 double lr, const AdamConfig& config, long step) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size())
    throw ContractError("adam_update: parameter, gradient and moment sizes differ");
  if (step < 1) throw ContractError("adam_update: step counts from 1");
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grad[i];
    v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
    param[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.epsilon);
  }
}

void Adam::step(const std::vector<std::pair<std::string, Tensor>>& params, double lr) {
  for (const auto& [name, tensor] : params)
    if (!tensor.has_grad()) throw ContractError("Adam: parameter '" + name + "' has no gradient");
  for (auto [name, tensor] : params) {
    Slot& slot = slots_[name];
    if (slot.m.empty()) {
      slot.m.assign(tensor.numel(), 0.0);
      slot.v.assign(tensor.numel(), 0.0);
    }
    adam_update(tensor.mutable_data(), tensor.grad(), slot.m, slot.v, lr, config_, ++slot.t);
  }
}

long Adam::steps_taken(const std::string& name) const {
  auto it = slots_.find(name);
  return it == slots_.end() ? 0 : it->second.t;
}

void Adam::save_state(ParameterStore& out) const {
  for (const auto& [name, slot] : slots_) {
    out.add("adam.m." + name, Tensor({slot.m.size()}, slot.m));
    out.add("adam.v." + name, Tensor({slot.v.size()}, slot.v));
    out.add("adam.t." + name, Tensor::scalar(static_cast<double>(slot.t)));
  }
}

void Adam::load_state(const ParameterStore& in) {
  slots_.clear();
  const std::string prefix = "adam.t.";
  for (const auto& [key, tensor] : in.items()) {
    if (key.rfind(prefix, 0) != 0) continue;
    const std::string name = key.substr(prefix.size());
    Slot slot;
    slot.t = static_cast<long>(tensor.item());
    auto m = in.at("adam.m." + name).data();
    auto v = in.at("adam.v." + name).data();
    slot.m.assign(m.begin(), m.end());
    slot.v.assign(v.begin(), v.end());
    slots_[name] = std::move(slot);
  }
}

}  // namespace evonas
