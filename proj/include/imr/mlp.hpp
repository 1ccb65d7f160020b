#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "imr/autodiff.hpp"

namespace imr {

// Four-layer feedforward network with tanh hidden activations and a linear
// output head. Weights are stored (in, out) so a batch (N, in) maps to (N, out).
struct MLPParams {
  std::size_t input_width = 0;
  std::size_t hidden_width = 0;
  std::size_t output_width = 0;
  std::vector<ad::Tensor> weights;
  std::vector<ad::Tensor> biases;

  static constexpr std::size_t kLayers = 4;

  static MLPParams create(std::size_t input, std::size_t hidden, std::size_t output, std::uint64_t seed,
                          bool zero_output_layer) {
    MLPParams p;
    p.input_width = input;
    p.hidden_width = hidden;
    p.output_width = output;
    std::mt19937_64 rng(seed);
    const std::size_t widths[kLayers + 1] = {input, hidden, hidden, hidden, output};
    for (std::size_t l = 0; l < kLayers; ++l) {
      const std::size_t in = widths[l], out = widths[l + 1];
      std::vector<double> w(in * out, 0.0);
      const bool zero = zero_output_layer && l + 1 == kLayers;
      if (!zero) {
        const double bound = std::sqrt(6.0 / double(in + out));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (double& v : w) v = dist(rng);
      }
      p.weights.emplace_back(ad::Shape{in, out}, std::move(w), true);
      p.biases.push_back(ad::Tensor::zeros({out}, true));
    }
    return p;
  }

  ad::Tensor forward(const ad::Tensor& x) const {
    if (x.rank() != 2 || x.size(1) != input_width) {
      throw DimensionError(detail::concat("mlp: expected (N, ", input_width, ") input, got ", ad::to_string(x.shape())));
    }
    ad::Tensor h = x;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      h = ad::add(ad::matmul(h, weights[l]), biases[l]);
      if (l + 1 < weights.size()) h = ad::tanh(h);
    }
    return h;
  }

  std::vector<ad::Tensor> parameters() const {
    std::vector<ad::Tensor> out;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      out.push_back(weights[l]);
      out.push_back(biases[l]);
    }
    return out;
  }

  void set_grad_enabled(bool on) {
    for (auto& w : weights) w.set_grad_enabled(on);
    for (auto& b : biases) b.set_grad_enabled(on);
  }

  bool finite() const {
    for (const auto& t : parameters())
      for (double v : t.data())
        if (!std::isfinite(v)) return false;
    return true;
  }

  // Independent copy of every parameter.
  MLPParams clone() const {
    MLPParams c = *this;
    for (auto& w : c.weights) w = w.clone(w.grad_enabled());
    for (auto& b : c.biases) b = b.clone(b.grad_enabled());
    return c;
  }
};

}  // namespace imr
