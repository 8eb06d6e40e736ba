#pragma once

#include <cmath>
#include <vector>

#include "fd2/autodiff.hpp"
#include "fd2/core.hpp"

namespace fd2::optim {

inline double cosine_lr(double base, std::int64_t step, std::int64_t total) {
  if (total <= 0) return base;
  const double t = std::min<double>(1.0, double(step) / double(total));
  return base * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

// SGD with momentum. Parameters without a gradient this step are skipped,
// so unreached branches stay bit-identical to their initialization.
template <typename T>
class Sgd {
 public:
  Sgd(std::vector<ad::Var<T>> params, T momentum)
      : params_(std::move(params)), momentum_(momentum) {
    velocity_.resize(params_.size());
  }

  void step(T lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p || !p->has_grad()) continue;
      if (velocity_[i].v.empty()) velocity_[i] = Tensor<T>::zeros(p->value.shape);
      auto& v = velocity_[i];
      for (std::int64_t j = 0; j < p->value.numel(); ++j) {
        v[j] = momentum_ * v[j] + p->grad[j];
        p->value[j] -= lr * v[j];
      }
      p->clear_grad();
    }
  }

 private:
  std::vector<ad::Var<T>> params_;
  std::vector<Tensor<T>> velocity_;
  T momentum_;
};

// Adam for pixel synthesis.
template <typename T>
class Adam {
 public:
  explicit Adam(ad::Var<T> param, T beta1 = T(0.9), T beta2 = T(0.999),
                T eps = T(1e-8))
      : param_(std::move(param)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_ = Tensor<T>::zeros(param_->value.shape);
    v_ = Tensor<T>::zeros(param_->value.shape);
  }

  void step(T lr) {
    if (!param_->has_grad()) return;
    ++t_;
    const T bc1 = T(1) - std::pow(beta1_, T(t_));
    const T bc2 = T(1) - std::pow(beta2_, T(t_));
    for (std::int64_t j = 0; j < param_->value.numel(); ++j) {
      const T g = param_->grad[j];
      m_[j] = beta1_ * m_[j] + (T(1) - beta1_) * g;
      v_[j] = beta2_ * v_[j] + (T(1) - beta2_) * g * g;
      param_->value[j] -= lr * (m_[j] / bc1) / (std::sqrt(v_[j] / bc2) + eps_);
    }
    param_->clear_grad();
  }

 private:
  ad::Var<T> param_;
  Tensor<T> m_, v_;
  T beta1_, beta2_, eps_;
  int t_ = 0;
};

// Scoped requires_grad toggle for inference passes over trainable models.
template <typename T>
class NoGradGuard {
 public:
  explicit NoGradGuard(const std::vector<ad::Var<T>>& params) {
    for (const auto& p : params)
      if (p && p->requires_grad) {
        saved_.push_back(p);
        p->requires_grad = false;
      }
  }
  ~NoGradGuard() {
    for (auto& p : saved_) p->requires_grad = true;
  }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  std::vector<ad::Var<T>> saved_;
};

template <typename M>
auto param_vars(M& model) {
  using VarT = decltype(model.named_parameters()[0].second);
  std::vector<VarT> vars;
  for (auto& [name, v] : model.named_parameters()) vars.push_back(v);
  return vars;
}

}  // namespace fd2::optim
