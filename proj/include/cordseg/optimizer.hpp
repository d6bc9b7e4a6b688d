#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cordseg/error.hpp"
#include "cordseg/tensor.hpp"

namespace cordseg {

struct AdadeltaConfig {
  double learning_rate = 1.0;
  double rho = 0.95;
  double epsilon = 1e-6;

  void validate() const {
    require(learning_rate > 0.0, ErrorCode::invalid_argument, "learning rate must be positive");
    require(rho > 0.0 && rho < 1.0, ErrorCode::invalid_argument, "rho must lie in (0, 1)");
    require(epsilon > 0.0, ErrorCode::invalid_argument, "epsilon must be positive");
  }

  bool operator==(const AdadeltaConfig&) const = default;
};

/// Running averages E[g^2] and E[dx^2] per named parameter.
struct OptimizerState {
  std::map<std::string, std::vector<double>> mean_sq_grad;
  std::map<std::string, std::vector<double>> mean_sq_update;
  bool operator==(const OptimizerState&) const = default;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// One Adadelta update from the gradients accumulated on `params`. Parameters without
/// a gradient count as zero gradient. Nothing changes if any gradient is not finite.
inline void adadelta_step(NamedTensors& params, OptimizerState& state, const AdadeltaConfig& config) {
  config.validate();
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (auto& [name, t] : params) {
    grads.push_back(t.grad());
    for (double g : grads.back())
      require(std::isfinite(g), ErrorCode::not_finite, "gradient of " + name + " is not finite");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, t] = params[i];
    const std::vector<double>& g = grads[i];
    auto& eg = state.mean_sq_grad[name];
    auto& edx = state.mean_sq_update[name];
    if (eg.empty()) eg.assign(g.size(), 0.0);
    if (edx.empty()) edx.assign(g.size(), 0.0);
    require(eg.size() == g.size() && edx.size() == g.size(), ErrorCode::shape_mismatch,
            "optimizer state for " + name + " does not match the parameter");
    auto values = t.values();
    for (std::size_t j = 0; j < g.size(); ++j) {
      eg[j] = config.rho * eg[j] + (1.0 - config.rho) * g[j] * g[j];
      const double dx = -(std::sqrt(edx[j] + config.epsilon) / std::sqrt(eg[j] + config.epsilon)) * g[j] *
                        config.learning_rate;
      edx[j] = config.rho * edx[j] + (1.0 - config.rho) * dx * dx;
      values[j] += dx;
    }
  }
}

}  // namespace cordseg
