#pragma once

#include <string>
#include <vector>

#include "fd2/autodiff.hpp"
#include "fd2/cal.hpp"
#include "fd2/core.hpp"

// The two distillation constraints, dual-classifier supervision and the
// total-loss composition.

namespace fd2::constraints {

// Every scalar knob of the loss stack.
template <typename T = double>
struct LossWeights {
  T alpha = T(0.5);      // CAL ratio shared by pretraining and distillation
  T beta = T(0.5);       // pull/push balance in the fine-grained constraint
  T lambda_fs = T(0.8);  // mix between the two constraints (1 -> all L_F)
  T eta = T(1.0);        // center regularizer strength
  T mu = T(0.05);        // prototype momentum
  T eps = T(1e-8);       // guard of the normalized Euclidean metric
  T tau = T(4.0);        // soft-label temperature

  void validate() const {
    auto in01 = [](T v) { return v >= T(0) && v <= T(1); };
    if (!in01(alpha)) throw ConfigError("alpha must lie in [0,1]");
    if (!in01(beta)) throw ConfigError("beta must lie in [0,1]");
    if (!in01(lambda_fs)) throw ConfigError("lambda must lie in [0,1]");
    if (!(eta >= T(0))) throw ConfigError("eta must be >= 0");
    if (!(mu > T(0) && mu < T(1))) throw ConfigError("mu must lie in (0,1)");
    if (!(eps > T(0))) throw ConfigError("eps must be > 0");
    if (!(tau > T(0))) throw ConfigError("tau must be > 0");
  }
};

template <typename T = double>
struct ConstraintReport {
  T l_f = 0;
  T l_s = 0;
  T l_cls = 0;
  T l_other = 0;
  T l_total = 0;
  T prototype_score = 0;
};

// ||u - v|| / (||u|| + ||v|| + eps). Symmetric, in [0,1) for eps > 0.
template <typename T>
T norm_l2(const std::vector<T>& u, const std::vector<T>& v, T eps) {
  if (u.size() != v.size())
    throw DimError("norm_l2: dimension mismatch " + std::to_string(u.size()) +
                   " vs " + std::to_string(v.size()));
  if (eps < T(0)) throw ConfigError("norm_l2: eps must be >= 0");
  const T num = vnorm(vsub(u, v));
  const T den = vnorm(u) + vnorm(v) + eps;
  if (den <= T(0)) return T(0);  // both inputs zero, eps == 0
  return num / den;
}

template <typename T>
ad::Var<T> norm_l2_graph(const ad::Var<T>& u, const ad::Var<T>& v, T eps) {
  ad::check_same_shape(u, v, "norm_l2");
  auto num = ad::vec_norm(ad::sub(u, v));
  auto den = ad::add_const(ad::add(ad::vec_norm(u), ad::vec_norm(v)), eps);
  return ad::div(num, den);
}

namespace detail {

template <typename T>
std::vector<int> other_initialized(const cal::PrototypeBank<T>& bank, int y) {
  bank.check_class(y);
  if (!bank.initialized[static_cast<std::size_t>(y)])
    throw StateError("prototype for class " + std::to_string(y) +
                     " has never been updated");
  std::vector<int> others;
  for (int k = 0; k < bank.num_classes(); ++k)
    if (k != y && bank.initialized[static_cast<std::size_t>(k)])
      others.push_back(k);
  if (bank.initialized_count() < 2)
    throw StateError("fine-grained constraint needs >= 2 initialized classes");
  return others;
}

}  // namespace detail

// beta * l2(z, c_y) + (1-beta) * (1 - mean_{k!=y} l2(z, c_k))
template <typename T>
T fg_constraint(const std::vector<T>& z, const cal::PrototypeBank<T>& bank,
                int y, T beta, T eps) {
  const std::vector<int> others = detail::other_initialized(bank, y);
  const T own = norm_l2(z, bank.prototype(y), eps);
  T mean_other = 0;
  for (int k : others) mean_other += norm_l2(z, bank.prototype(k), eps);
  mean_other /= T(others.size());
  return beta * own + (T(1) - beta) * (T(1) - mean_other);
}

// (1-beta) * mean_{k!=y} l2(z, c_k) - beta * l2(z, c_y).
// Satisfies fg_constraint + prototype_score == 1 - beta identically.
template <typename T>
T prototype_score(const std::vector<T>& z, const cal::PrototypeBank<T>& bank,
                  int y, T beta, T eps) {
  const std::vector<int> others = detail::other_initialized(bank, y);
  const T own = norm_l2(z, bank.prototype(y), eps);
  T mean_other = 0;
  for (int k : others) mean_other += norm_l2(z, bank.prototype(k), eps);
  mean_other /= T(others.size());
  return (T(1) - beta) * mean_other - beta * own;
}

template <typename T>
ad::Var<T> fg_constraint_graph(const ad::Var<T>& z,
                               const cal::PrototypeBank<T>& bank, int y, T beta,
                               T eps) {
  const std::vector<int> others = detail::other_initialized(bank, y);
  const int d = bank.dim();
  auto proto_const = [&](int k) {
    return ad::constant(Tensor<T>({d}, bank.prototype(k)));
  };
  auto own = norm_l2_graph(z, proto_const(y), eps);
  ad::Var<T> acc;
  for (int k : others) {
    auto term = norm_l2_graph(z, proto_const(k), eps);
    acc = acc ? ad::add(acc, term) : term;
  }
  auto mean_other = ad::scale(acc, T(1) / T(others.size()));
  auto repel = ad::add_const(ad::scale(mean_other, T(-1)), T(1));
  return ad::add(ad::scale(own, beta), ad::scale(repel, T(1) - beta));
}

// 1 - mean_j l2(vec(a), vec(a_j)); zero when no prior samples exist.
// Attention sets are compared as one flattened vector covering all maps.
template <typename T>
T similarity_constraint(const Tensor<T>& a_current,
                        const std::vector<Tensor<T>>& priors, T eps) {
  if (priors.empty()) return T(0);
  for (const auto& p : priors)
    if (!p.same_shape(a_current))
      throw DimError("similarity_constraint: prior shape " + shape_str(p) +
                     " differs from current " + shape_str(a_current));
  T mean_dist = 0;
  for (const auto& p : priors) mean_dist += norm_l2(a_current.v, p.v, eps);
  mean_dist /= T(priors.size());
  return T(1) - mean_dist;
}

template <typename T>
ad::Var<T> similarity_constraint_graph(const ad::Var<T>& a_flat,
                                       const std::vector<Tensor<T>>& priors,
                                       T eps) {
  if (priors.empty()) return ad::scalar_const(T(0));
  const int p_dim = static_cast<int>(a_flat->value.numel());
  ad::Var<T> acc;
  for (const auto& p : priors) {
    if (p.numel() != p_dim)
      throw DimError("similarity_constraint: prior size mismatch");
    auto pc = ad::constant(Tensor<T>({p_dim}, p.v));
    auto term = norm_l2_graph(a_flat, pc, eps);
    acc = acc ? ad::add(acc, term) : term;
  }
  auto mean_dist = ad::scale(acc, T(1) / T(priors.size()));
  return ad::add_const(ad::scale(mean_dist, T(-1)), T(1));
}

// (1-alpha) * CE(p_bb, y) + alpha * CE(p_cal, y)
template <typename T>
T cls_loss(const std::vector<T>& p_bb, const std::vector<T>& p_cal, int y,
           T alpha) {
  if (p_bb.size() != p_cal.size())
    throw DimError("cls_loss: logit length mismatch");
  return (T(1) - alpha) * cal::softmax_ce(p_bb, y) +
         alpha * cal::softmax_ce(p_cal, y);
}

// l_total = l_other + l_cls + lambda * l_f + (1 - lambda) * l_s
template <typename T>
ConstraintReport<T> total_loss(T l_other, T l_cls, T l_f, T l_s, T lambda) {
  if (!(lambda >= T(0) && lambda <= T(1)))
    throw ConfigError("total_loss: lambda must lie in [0,1]");
  ConstraintReport<T> r;
  r.l_other = l_other;
  r.l_cls = l_cls;
  r.l_f = l_f;
  r.l_s = l_s;
  r.l_total = l_other + l_cls + lambda * l_f + (T(1) - lambda) * l_s;
  return r;
}

}  // namespace fd2::constraints
