#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "kdaudit/error.hpp"
#include "kdaudit/tensor.hpp"

namespace kdaudit {

enum class OptimizerKind { Sgd, Adam };

// SGD or Adam (beta1=0.9, beta2=0.999, eps=1e-8, bias-corrected). Moment
// tensors are laid out per parameter slot and always match the parameter
// shape; the step counter strictly increases.
template <typename T>
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr, double beta1 = 0.9, double beta2 = 0.999,
            double eps = 1e-8)
      : kind_(kind), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // One update over a fixed-order parameter list. Throws TrainingDiverged
  // (carrying the step index) on any non-finite gradient.
  void step(std::span<const std::pair<Tensor<T>*, std::span<const T>>> params_grads) {
    ++step_count_;
    if (kind_ == OptimizerKind::Adam && moments_m_.size() != params_grads.size()) {
      moments_m_.resize(params_grads.size());
      moments_v_.resize(params_grads.size());
    }
    for (size_t slot = 0; slot < params_grads.size(); ++slot) {
      Tensor<T>* param = params_grads[slot].first;
      std::span<const T> grad = params_grads[slot].second;
      if (grad.size() != param->data.size())
        throw std::invalid_argument("optimizer step: gradient shape mismatch");
      for (T g : grad)
        if (!std::isfinite(double(g))) throw TrainingDiverged(step_count_);
      if (kind_ == OptimizerKind::Sgd) {
        for (size_t i = 0; i < grad.size(); ++i)
          param->data[i] -= static_cast<T>(lr_) * grad[i];
      } else {
        auto& m = moments_m_[slot];
        auto& v = moments_v_[slot];
        if (m.size() != grad.size()) {
          m.assign(grad.size(), T(0));
          v.assign(grad.size(), T(0));
        }
        const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
        const T corr1 = static_cast<T>(1.0 - std::pow(beta1_, double(step_count_)));
        const T corr2 = static_cast<T>(1.0 - std::pow(beta2_, double(step_count_)));
        const T lr = static_cast<T>(lr_), eps = static_cast<T>(eps_);
        for (size_t i = 0; i < grad.size(); ++i) {
          m[i] = b1 * m[i] + (T(1) - b1) * grad[i];
          v[i] = b2 * v[i] + (T(1) - b2) * grad[i] * grad[i];
          const T mhat = m[i] / corr1;
          const T vhat = v[i] / corr2;
          param->data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
      }
    }
  }

  int64_t step_count() const { return step_count_; }
  OptimizerKind kind() const { return kind_; }
  double learning_rate() const { return lr_; }

 private:
  OptimizerKind kind_;
  double lr_, beta1_, beta2_, eps_;
  int64_t step_count_ = 0;
  std::vector<std::vector<T>> moments_m_, moments_v_;
};

}  // namespace kdaudit
