#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fd2/autodiff.hpp"
#include "fd2/core.hpp"

// Counterfactual attention learning: attention-weighted pooling, the
// factual/counterfactual effect logits, momentum class prototypes and the
// dual cross-entropy + center objective.

namespace fd2::cal {

// Rank-3 conventions: feature maps are [C,H,W], attention sets are [M,H,W].
template <typename T>
void check_feature_attention(const Tensor<T>& feat, const Tensor<T>& attn) {
  if (feat.rank() != 3 || attn.rank() != 3)
    throw DimError("expected [C,H,W] feature and [M,H,W] attention");
  if (feat.dim(1) != attn.dim(1) || feat.dim(2) != attn.dim(2))
    throw DimError("spatial shapes differ: feature " + shape_str(feat) +
                   " vs attention " + shape_str(attn));
  if (feat.dim(0) < 1 || attn.dim(0) < 1 || feat.dim(1) < 1 || feat.dim(2) < 1)
    throw DimError("feature/attention dims must be >= 1");
}

// Pooling chain shared by every caller: per-map attention-weighted spatial
// mean, concatenation, signed square root, Euclidean normalization.
template <typename T>
ad::Var<T> attention_pool_graph(const ad::Var<T>& feat_nchw,
                                const ad::Var<T>& attn_nmhw) {
  auto pooled = ad::attn_pool_raw(feat_nchw, attn_nmhw);
  return ad::l2_normalize_rows(ad::signed_sqrt(pooled));
}

// Pooled vector before signed-sqrt/normalization, single sample.
template <typename T = double>
std::vector<T> attention_pool_raw(const Tensor<T>& feat, const Tensor<T>& attn) {
  check_feature_attention(feat, attn);
  const int C = feat.dim(0), H = feat.dim(1), W = feat.dim(2);
  const int M = attn.dim(0);
  auto f = ad::constant(feat.reshaped({1, C, H, W}));
  auto a = ad::constant(attn.reshaped({1, M, H, W}));
  return ad::attn_pool_raw(f, a)->value.v;
}

template <typename T = double>
std::vector<T> attention_pool(const Tensor<T>& feat, const Tensor<T>& attn) {
  check_feature_attention(feat, attn);
  if (!feat.all_finite() || !attn.all_finite())
    throw ValueError("attention_pool: non-finite input");
  const int C = feat.dim(0), H = feat.dim(1), W = feat.dim(2);
  const int M = attn.dim(0);
  auto f = ad::constant(feat.reshaped({1, C, H, W}));
  auto a = ad::constant(attn.reshaped({1, M, H, W}));
  return attention_pool_graph(f, a)->value.v;
}

enum class CounterfactualMode { kUniform, kRandom };

inline CounterfactualMode parse_counterfactual_mode(const std::string& s) {
  if (s == "uniform") return CounterfactualMode::kUniform;
  if (s == "random") return CounterfactualMode::kRandom;
  throw ConfigError("unknown counterfactual mode '" + s +
                    "' (expected uniform|random)");
}

inline std::string to_string(CounterfactualMode m) {
  return m == CounterfactualMode::kUniform ? "uniform" : "random";
}

// Draw the alternative attention set A-bar. `uniform` gives every map the
// constant 1/(H*W); `random` draws i.i.d. U[0,1) with the given seed.
template <typename T = double>
Tensor<T> sample_counterfactual(const Tensor<T>& attn, CounterfactualMode mode,
                                std::uint64_t rng_seed) {
  if (attn.rank() != 3) throw DimError("sample_counterfactual expects [M,H,W]");
  Tensor<T> out(attn.shape);
  if (mode == CounterfactualMode::kUniform) {
    const T v = T(1) / T(std::int64_t(attn.dim(1)) * attn.dim(2));
    std::fill(out.v.begin(), out.v.end(), v);
  } else {
    Rng rng(rng_seed);
    for (auto& x : out.v) x = static_cast<T>(rng.uniform());
  }
  return out;
}

template <typename T = double>
struct CalClassifier {
  Tensor<T> weight;      // [K, M*C]
  std::vector<T> bias;   // empty when absent

  CalClassifier() = default;
  CalClassifier(Tensor<T> w, std::vector<T> b = {})
      : weight(std::move(w)), bias(std::move(b)) {
    if (weight.rank() != 2) throw DimError("classifier weight must be [K,D]");
    if (!bias.empty() && static_cast<int>(bias.size()) != weight.dim(0))
      throw DimError("classifier bias length mismatch");
  }

  int num_classes() const { return weight.dim(0); }
  int dim() const { return weight.dim(1); }

  // W*z without bias (the counterfactual subtraction term of Eq-style
  // effect logits is bias-free).
  std::vector<T> linear(const std::vector<T>& z) const {
    if (static_cast<int>(z.size()) != dim())
      throw DimError("classifier: representation dim " +
                     std::to_string(z.size()) + " != " + std::to_string(dim()));
    std::vector<T> out(num_classes());
    ad::CMapRM<T> W(weight.data(), num_classes(), dim());
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> zv(
        z.data(), static_cast<Eigen::Index>(z.size()));
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> ov(
        out.data(), static_cast<Eigen::Index>(out.size()));
    ov.noalias() = W * zv;
    return out;
  }

  std::vector<T> logits(const std::vector<T>& z) const {
    std::vector<T> out = linear(z);
    if (!bias.empty())
      for (std::size_t k = 0; k < out.size(); ++k) out[k] += bias[k];
    return out;
  }
};

// p_raw = W z (+bias), p_eff = p_raw - W z_hat
template <typename T = double>
std::pair<std::vector<T>, std::vector<T>> counterfactual_effect(
    const Tensor<T>& feat, const Tensor<T>& attn, const Tensor<T>& attn_bar,
    const CalClassifier<T>& clf) {
  if (!attn.same_shape(attn_bar))
    throw DimError("counterfactual attention shape differs from factual");
  const std::vector<T> z = attention_pool(feat, attn);
  const std::vector<T> z_hat = attention_pool(feat, attn_bar);
  std::vector<T> p_raw = clf.logits(z);
  const std::vector<T> wz_hat = clf.linear(z_hat);
  std::vector<T> p_eff(p_raw.size());
  for (std::size_t k = 0; k < p_raw.size(); ++k) p_eff[k] = p_raw[k] - wz_hat[k];
  return {std::move(p_raw), std::move(p_eff)};
}

// ---------------------------------------------------------------------------
// Class prototypes (momentum feature centers)
// ---------------------------------------------------------------------------

template <typename T = double>
struct PrototypeBank {
  Tensor<T> prototypes;            // [K, D]
  std::vector<char> initialized;   // per class
  T momentum = T(0.05);

  PrototypeBank() = default;
  PrototypeBank(int num_classes, int dim, T mu = T(0.05))
      : prototypes({num_classes, dim}),
        initialized(static_cast<std::size_t>(num_classes), 0),
        momentum(mu) {
    if (num_classes < 1 || dim < 1)
      throw DimError("prototype bank needs K >= 1, D >= 1");
    if (!(mu > T(0) && mu < T(1)))
      throw ConfigError("prototype momentum must lie in (0,1)");
  }

  int num_classes() const { return prototypes.dim(0); }
  int dim() const { return prototypes.dim(1); }

  int initialized_count() const {
    int n = 0;
    for (char c : initialized) n += (c != 0);
    return n;
  }

  std::vector<T> prototype(int k) const {
    check_class(k);
    const T* p = prototypes.data() + std::int64_t(k) * dim();
    return std::vector<T>(p, p + dim());
  }

  void check_class(int k) const {
    if (k < 0 || k >= num_classes())
      throw IndexError("class " + std::to_string(k) + " out of range [0," +
                       std::to_string(num_classes()) + ")");
  }
};

// c_y <- (1-mu) c_y + mu Norm(z); a never-updated slot takes Norm(z) outright
// so the first observation defines the prototype.
template <typename T>
void update_prototype(PrototypeBank<T>& bank, int y, const std::vector<T>& z,
                      T momentum) {
  bank.check_class(y);
  if (static_cast<int>(z.size()) != bank.dim())
    throw DimError("update_prototype: representation dim mismatch");
  for (T x : z)
    if (!std::isfinite(static_cast<double>(x)))
      throw ValueError("update_prototype: non-finite representation");
  const std::vector<T> zn = vnormalize(z);
  T* c = bank.prototypes.data() + std::int64_t(y) * bank.dim();
  if (!bank.initialized[static_cast<std::size_t>(y)]) {
    std::copy(zn.begin(), zn.end(), c);
    bank.initialized[static_cast<std::size_t>(y)] = 1;
    return;
  }
  for (int j = 0; j < bank.dim(); ++j)
    c[j] = (T(1) - momentum) * c[j] + momentum * zn[j];
}

template <typename T>
void update_prototype(PrototypeBank<T>& bank, int y, const std::vector<T>& z) {
  update_prototype(bank, y, z, bank.momentum);
}

// ||z - Norm(c_y)||^2
template <typename T>
T center_loss(const std::vector<T>& z, const std::vector<T>& c_y) {
  if (z.size() != c_y.size())
    throw DimError("center_loss: dimension mismatch " +
                   std::to_string(z.size()) + " vs " + std::to_string(c_y.size()));
  const std::vector<T> cn = vnormalize(c_y);
  T s = 0;
  for (std::size_t j = 0; j < z.size(); ++j) {
    const T d = z[j] - cn[j];
    s += d * d;
  }
  return s;
}

// Stable softmax cross-entropy for plain logits.
template <typename T>
T softmax_ce(const std::vector<T>& logits, int y) {
  const int K = static_cast<int>(logits.size());
  if (y < 0 || y >= K)
    throw IndexError("softmax_ce: class " + std::to_string(y) +
                     " out of range [0," + std::to_string(K) + ")");
  T mx = logits[0];
  for (T v : logits) mx = std::max(mx, v);
  T se = 0;
  for (T v : logits) se += std::exp(v - mx);
  return mx + std::log(se) - logits[static_cast<std::size_t>(y)];
}

// CE(p_raw,y) + CE(p_eff,y) + eta * ||z - Norm(c_y)||^2
template <typename T>
T cal_loss(const std::vector<T>& p_raw, const std::vector<T>& p_eff,
           const std::vector<T>& z, const std::vector<T>& c_y, int y, T eta) {
  if (p_raw.size() != p_eff.size())
    throw DimError("cal_loss: logit length mismatch");
  if (eta < T(0)) throw ConfigError("cal_loss: eta must be >= 0");
  return softmax_ce(p_raw, y) + softmax_ce(p_eff, y) + eta * center_loss(z, c_y);
}

// All per-image teacher signals.
template <typename T = double>
struct TeacherOutputs {
  std::vector<T> p_bb;   // backbone-branch logits
  std::vector<T> p_raw;  // factual CAL logits
  std::vector<T> p_eff;  // counterfactual effect logits
  std::vector<T> z;      // factual representation, dim M*C
  Tensor<T> attention;   // [M,H,W]
};

}  // namespace fd2::cal
