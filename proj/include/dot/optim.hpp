#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "dot/tensor.hpp"

namespace dot {

// A trainable tensor. learning_rate_scale lets classifier heads take the
// 10x step size while sharing one optimizer.
struct Parameter {
  std::string name;
  Tensor tensor;
  double learning_rate_scale = 1.0;

  Parameter() = default;
  Parameter(std::string n, Tensor t, double lr_scale = 1.0)
      : name(std::move(n)), tensor(std::move(t)),
        learning_rate_scale(lr_scale) {
    if (lr_scale <= 0.0)
      throw std::invalid_argument("Parameter " + name +
                                  ": learning_rate_scale must be positive");
    tensor.impl()->requires_grad = true;
  }
};

// SGD with momentum and weight decay:
//   v <- momentum * v + (grad + weight_decay * theta)
//   theta <- theta - lr * learning_rate_scale * v
// Velocity buffers persist across steps and are keyed by parameter order,
// which must not change between calls.
class SgdOptimizer {
 public:
  SgdOptimizer(double lr, double momentum, double weight_decay)
      : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
    if (lr <= 0.0) throw std::invalid_argument("SgdOptimizer: lr must be positive");
  }

  void step(const std::vector<Parameter*>& params) {
    if (velocity_.empty()) {
      velocity_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i)
        velocity_[i].assign(params[i]->tensor.size(), 0.0);
    }
    if (velocity_.size() != params.size())
      throw std::logic_error("SgdOptimizer: parameter set changed size");
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter& p = *params[i];
      if (!p.tensor.has_grad())
        throw std::runtime_error("SgdOptimizer: parameter \"" + p.name +
                                 "\" has no gradient");
      if (p.tensor.grad().size() != p.tensor.size())
        throw std::runtime_error("SgdOptimizer: gradient shape mismatch for \"" +
                                 p.name + "\"");
      auto& v = velocity_[i];
      auto& th = p.tensor.data();
      const auto& g = p.tensor.grad();
      const double step_size = lr_ * p.learning_rate_scale;
      for (std::size_t j = 0; j < th.size(); ++j) {
        v[j] = momentum_ * v[j] + (g[j] + weight_decay_ * th[j]);
        th[j] -= step_size * v[j];
      }
    }
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  double momentum() const { return momentum_; }
  double weight_decay() const { return weight_decay_; }

  const std::vector<std::vector<double>>& velocities() const {
    return velocity_;
  }
  void set_velocities(std::vector<std::vector<double>> v) {
    velocity_ = std::move(v);
  }

 private:
  double lr_;
  double momentum_;
  double weight_decay_;
  std::vector<std::vector<double>> velocity_;
};

inline void zero_grads(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) p->tensor.zero_grad();
}

}  // namespace dot
