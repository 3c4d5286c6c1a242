#pragma once

// Adam with decoupled weight decay.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "marrow/error.hpp"
#include "marrow/tensor.hpp"

namespace marrow {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double clip_norm = 0.0;  // global gradient-norm clip; 0 disables
};

class AdamW {
 public:
  explicit AdamW(AdamConfig config = {}) : config_(config) {
    if (config_.lr < 0 || config_.beta1 < 0 || config_.beta1 >= 1 || config_.beta2 < 0 || config_.beta2 >= 1 ||
        config_.eps <= 0 || config_.weight_decay < 0 || config_.clip_norm < 0) {
      throw ConfigError("invalid optimizer settings");
    }
  }

  /// One update of every parameter from its gradient (same order, same sizes).
  void step(std::span<Tensor<float>* const> params, const std::vector<std::vector<float>>& grads) {
    if (params.size() != grads.size()) {
      throw ContractError("optimizer: " + std::to_string(params.size()) + " parameters but " +
                          std::to_string(grads.size()) + " gradients");
    }
    if (m_.empty()) {
      for (auto* p : params) {
        m_.emplace_back(p->size(), 0.0f);
        v_.emplace_back(p->size(), 0.0f);
      }
    }
    if (m_.size() != params.size()) throw ContractError("optimizer: parameter list changed between steps");
    ++t_;
    double clip = 1.0;
    if (config_.clip_norm > 0) {
      double sq = 0;
      for (const auto& g : grads)
        for (float x : g) sq += static_cast<double>(x) * x;
      const double norm = std::sqrt(sq);
      if (norm > config_.clip_norm) clip = config_.clip_norm / norm;
    }
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    const float lr = static_cast<float>(config_.lr);
    const float decay = static_cast<float>(1.0 - config_.lr * config_.weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto w = params[i]->values();
      const auto& g = grads[i];
      if (g.size() != w.size()) throw ContractError("optimizer: gradient size mismatch");
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const float gj = static_cast<float>(g[j] * clip);
        m[j] = static_cast<float>(b1 * m[j] + (1.0 - b1) * gj);
        v[j] = static_cast<float>(b2 * v[j] + (1.0 - b2) * gj * gj);
        const float update = static_cast<float>((m[j] / c1) / (std::sqrt(v[j] / c2) + config_.eps));
        w[j] = w[j] * decay - lr * update;
      }
    }
  }

  std::size_t steps() const noexcept { return t_; }

 private:
  AdamConfig config_;
  std::vector<std::vector<float>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace marrow
