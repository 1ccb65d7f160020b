#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "imr/autodiff.hpp"

namespace imr {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;
};

// One bias-corrected Adam update of `params` in place.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, double lr,
                      const AdamConfig& cfg = {}) {
  if (params.size() != grads.size()) {
    throw DimensionError(detail::concat("adam: ", params.size(), " parameters but ", grads.size(), " gradients"));
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) throw NumericError(detail::concat("adam: non-finite gradient at index ", i));
  }
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
    state.step = 0;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

// Adam over a fixed list of parameter tensors sharing one learning rate.
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<ad::Tensor> params, double lr, AdamConfig cfg = {})
      : params_(std::move(params)), states_(params_.size()), lr_(lr), cfg_(cfg) {}

  const std::vector<ad::Tensor>& params() const { return params_; }
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

  // Parameters the tape never reached take a zero-gradient step.
  void step(const ad::Gradients& grads) {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto g = grads.raw(params_[k]);
      if (g.empty()) {
        std::vector<double> zero(params_[k].numel(), 0.0);
        adam_step(params_[k].mutable_data(), zero, states_[k], lr_, cfg_);
      } else {
        adam_step(params_[k].mutable_data(), g, states_[k], lr_, cfg_);
      }
    }
  }

  // Explicit gradients, one buffer per parameter in construction order.
  void step(const std::vector<std::vector<double>>& grads) {
    if (grads.size() != params_.size()) throw DimensionError("adam: gradient list does not match parameters");
    for (std::size_t k = 0; k < params_.size(); ++k) adam_step(params_[k].mutable_data(), grads[k], states_[k], lr_, cfg_);
  }

  const std::vector<AdamState>& states() const { return states_; }
  std::vector<AdamState>& states() { return states_; }

 private:
  std::vector<ad::Tensor> params_;
  std::vector<AdamState> states_;
  double lr_ = 1e-3;
  AdamConfig cfg_;
};

}  // namespace imr
