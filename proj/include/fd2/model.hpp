#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "fd2/autodiff.hpp"
#include "fd2/cal.hpp"
#include "fd2/core.hpp"

namespace fd2::model {

template <typename T>
using NamedParam = std::pair<std::string, ad::Var<T>>;
template <typename T>
using NamedBuffer = std::pair<std::string, Tensor<T>*>;

// Batch mean/var pairs of each normalization layer's input, in layer order.
template <typename T>
using MomentSink = std::vector<std::pair<ad::Var<T>, ad::Var<T>>>;

template <typename T>
struct ForwardOpts {
  bool training = false;         // batch-stat normalization + running update
  bool want_effect = true;       // build counterfactual effect logits
  cal::CounterfactualMode cf_mode = cal::CounterfactualMode::kUniform;
  Rng* rng = nullptr;            // required for the random counterfactual
  MomentSink<T>* moments = nullptr;  // collect BN-input moments (distill loss)
};

template <typename T>
struct Conv2d {
  ad::Var<T> weight;  // [Co,Ci,k,k]
  ad::Var<T> bias;    // [Co] or null
  int pad = 0;

  Conv2d() = default;
  Conv2d(int cin, int cout, int k, int pad_, bool with_bias, Rng& rng)
      : pad(pad_) {
    Tensor<T> w({cout, cin, k, k});
    const double std = std::sqrt(2.0 / (double(cin) * k * k));
    for (auto& x : w.v) x = static_cast<T>(rng.normal(0.0, std));
    weight = ad::leaf(std::move(w));
    if (with_bias) bias = ad::leaf(Tensor<T>::zeros({cout}));
  }

  ad::Var<T> forward(const ad::Var<T>& x) const {
    return ad::conv2d(x, weight, bias, pad);
  }
};

template <typename T>
struct BatchNorm2d {
  ad::Var<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels)
      : gamma(ad::leaf(Tensor<T>::full({channels}, T(1)))),
        beta(ad::leaf(Tensor<T>::zeros({channels}))),
        running_mean(Tensor<T>::zeros({channels})),
        running_var(Tensor<T>::full({channels}, T(1))) {}

  ad::Var<T> forward(const ad::Var<T>& x, bool training,
                     MomentSink<T>* sink = nullptr) {
    if (sink) {
      auto [m, v] = ad::channel_moments(x);
      sink->emplace_back(m, v);
    }
    if (training) {
      auto res = ad::batchnorm_train(x, gamma, beta, eps);
      for (std::int64_t c = 0; c < running_mean.numel(); ++c) {
        running_mean[c] =
            (T(1) - momentum) * running_mean[c] + momentum * res.batch_mean[c];
        running_var[c] =
            (T(1) - momentum) * running_var[c] + momentum * res.batch_var[c];
      }
      return res.out;
    }
    return ad::batchnorm_eval(x, gamma, beta, running_mean, running_var, eps);
  }
};

// conv3x3 -> BN -> relu -> 2x2 maxpool (pooling skipped once a spatial side
// drops below 2, so 1x1 toy inputs pass through).
template <typename T>
struct Backbone {
  std::vector<Conv2d<T>> convs;
  std::vector<BatchNorm2d<T>> bns;

  Backbone() = default;
  Backbone(int in_channels, const std::vector<int>& channels, Rng& rng) {
    int cin = in_channels;
    for (int cout : channels) {
      convs.emplace_back(cin, cout, 3, 1, true, rng);
      bns.emplace_back(cout);
      cin = cout;
    }
  }

  int out_channels() const { return bns.empty() ? 0 : bns.back().gamma->value.dim(0); }

  ad::Var<T> forward(ad::Var<T> x, bool training, MomentSink<T>* sink = nullptr) {
    for (std::size_t i = 0; i < convs.size(); ++i) {
      x = ad::relu(bns[i].forward(convs[i].forward(x), training, sink));
      if (x->value.dim(2) >= 2 && x->value.dim(3) >= 2) x = ad::maxpool2(x);
    }
    return x;
  }

  void collect(std::vector<NamedParam<T>>& params,
               std::vector<NamedBuffer<T>>& buffers, const std::string& prefix) {
    for (std::size_t i = 0; i < convs.size(); ++i) {
      const std::string b = prefix + "block" + std::to_string(i) + ".";
      params.emplace_back(b + "conv.weight", convs[i].weight);
      params.emplace_back(b + "conv.bias", convs[i].bias);
      params.emplace_back(b + "bn.gamma", bns[i].gamma);
      params.emplace_back(b + "bn.beta", bns[i].beta);
      buffers.emplace_back(b + "bn.running_mean", &bns[i].running_mean);
      buffers.emplace_back(b + "bn.running_var", &bns[i].running_var);
    }
  }
};

// Per-layer running statistics, ordered by layer.
template <typename T = float>
struct BNStatSnapshot {
  std::vector<std::vector<T>> means;
  std::vector<std::vector<T>> vars;

  std::size_t layer_count() const { return means.size(); }
};

template <typename T>
struct TeacherTrace {
  ad::Var<T> feat;    // [N,C,Hf,Wf]
  ad::Var<T> attn;    // [N,M,Hf,Wf]
  ad::Var<T> z;       // [N,M*C]
  ad::Var<T> p_raw;   // [N,K]
  ad::Var<T> p_eff;   // [N,K] (null unless want_effect)
  ad::Var<T> p_bb;    // [N,K]
  MomentSink<T> bn_moments;
};

template <typename T = float>
struct TeacherModel {
  Backbone<T> backbone;
  Conv2d<T> attn_conv;   // 1x1, C -> M
  ad::Var<T> cal_weight; // [K, M*C], bias-free
  ad::Var<T> bb_weight;  // [K, C]
  ad::Var<T> bb_bias;    // [K]
  int num_classes = 0;
  int num_maps = 0;
  int in_channels = 3;
  std::vector<int> channels;

  TeacherModel() = default;
  TeacherModel(int K, int M, int in_ch, std::vector<int> chans, Rng& rng)
      : backbone(in_ch, chans, rng),
        attn_conv(chans.back(), M, 1, 0, true, rng),
        num_classes(K),
        num_maps(M),
        in_channels(in_ch),
        channels(std::move(chans)) {
    const int C = channels.back();
    Tensor<T> cw({K, M * C});
    const double s1 = 1.0 / std::sqrt(double(M) * C);
    for (auto& x : cw.v) x = static_cast<T>(rng.normal(0.0, s1));
    cal_weight = ad::leaf(std::move(cw));
    Tensor<T> bw({K, C});
    const double s2 = 1.0 / std::sqrt(double(C));
    for (auto& x : bw.v) x = static_cast<T>(rng.normal(0.0, s2));
    bb_weight = ad::leaf(std::move(bw));
    bb_bias = ad::leaf(Tensor<T>::zeros({K}));
  }

  int feature_channels() const { return channels.back(); }

  cal::CalClassifier<T> cal_classifier() const {
    return cal::CalClassifier<T>(cal_weight->value);
  }

  TeacherTrace<T> forward(const ad::Var<T>& x, ForwardOpts<T> opts = {}) {
    if (x->value.rank() != 4 || x->value.dim(1) != in_channels)
      throw ValueError("teacher forward: expected [N," +
                       std::to_string(in_channels) + ",H,W], got " +
                       shape_str(x->value));
    TeacherTrace<T> tr;
    MomentSink<T>* sink = opts.moments ? opts.moments : nullptr;
    tr.feat = backbone.forward(x, opts.training, sink);
    tr.attn = ad::relu(attn_conv.forward(tr.feat));
    tr.z = cal::attention_pool_graph(tr.feat, tr.attn);
    tr.p_raw = ad::linear(tr.z, cal_weight);
    tr.p_bb = ad::linear(ad::global_avg_pool(tr.feat), bb_weight, bb_bias);
    if (opts.want_effect) {
      Tensor<T> abar(tr.attn->value.shape);
      if (opts.cf_mode == cal::CounterfactualMode::kUniform) {
        const T v = T(1) / T(std::int64_t(tr.attn->value.dim(2)) *
                             tr.attn->value.dim(3));
        std::fill(abar.v.begin(), abar.v.end(), v);
      } else {
        if (!opts.rng)
          throw ConfigError("random counterfactual draw requires an rng");
        for (auto& a : abar.v) a = static_cast<T>(opts.rng->uniform());
      }
      auto z_hat = cal::attention_pool_graph(tr.feat, ad::constant(std::move(abar)));
      tr.p_eff = ad::sub(tr.p_raw, ad::linear(z_hat, cal_weight));
    }
    if (opts.moments) tr.bn_moments = std::move(*sink);
    return tr;
  }

  std::vector<NamedParam<T>> named_parameters() {
    std::vector<NamedParam<T>> params;
    std::vector<NamedBuffer<T>> buffers;
    backbone.collect(params, buffers, "backbone.");
    params.emplace_back("attn.weight", attn_conv.weight);
    params.emplace_back("attn.bias", attn_conv.bias);
    params.emplace_back("cal.weight", cal_weight);
    params.emplace_back("bb.weight", bb_weight);
    params.emplace_back("bb.bias", bb_bias);
    return params;
  }

  std::vector<NamedBuffer<T>> named_buffers() {
    std::vector<NamedParam<T>> params;
    std::vector<NamedBuffer<T>> buffers;
    backbone.collect(params, buffers, "backbone.");
    return buffers;
  }
};

// Plain backbone + linear head; the post-evaluation student.
template <typename T = float>
struct StudentModel {
  Backbone<T> backbone;
  ad::Var<T> head_weight;  // [K, C]
  ad::Var<T> head_bias;    // [K]
  int num_classes = 0;
  int in_channels = 3;
  std::vector<int> channels;

  StudentModel() = default;
  StudentModel(int K, int in_ch, std::vector<int> chans, Rng& rng)
      : backbone(in_ch, chans, rng),
        num_classes(K),
        in_channels(in_ch),
        channels(std::move(chans)) {
    const int C = channels.back();
    Tensor<T> w({K, C});
    const double s = 1.0 / std::sqrt(double(C));
    for (auto& x : w.v) x = static_cast<T>(rng.normal(0.0, s));
    head_weight = ad::leaf(std::move(w));
    head_bias = ad::leaf(Tensor<T>::zeros({K}));
  }

  ad::Var<T> logits(const ad::Var<T>& x, bool training) {
    auto f = backbone.forward(x, training);
    return ad::linear(ad::global_avg_pool(f), head_weight, head_bias);
  }

  std::vector<NamedParam<T>> named_parameters() {
    std::vector<NamedParam<T>> params;
    std::vector<NamedBuffer<T>> buffers;
    backbone.collect(params, buffers, "backbone.");
    params.emplace_back("head.weight", head_weight);
    params.emplace_back("head.bias", head_bias);
    return params;
  }

  std::vector<NamedBuffer<T>> named_buffers() {
    std::vector<NamedParam<T>> params;
    std::vector<NamedBuffer<T>> buffers;
    backbone.collect(params, buffers, "backbone.");
    return buffers;
  }
};

// FNV over every parameter and running-stat byte, in registry order.
template <typename M>
std::uint64_t param_hash(M& model) {
  std::uint64_t h = kFnvOffset;
  for (auto& [name, var] : model.named_parameters()) {
    if (!var) continue;
    h = fnv1a64(name.data(), name.size(), h);
    h = fnv1a64(var->value.data(), var->value.v.size() * sizeof(var->value.v[0]), h);
  }
  for (auto& [name, buf] : model.named_buffers()) {
    h = fnv1a64(name.data(), name.size(), h);
    h = fnv1a64(buf->data(), buf->v.size() * sizeof(buf->v[0]), h);
  }
  return h;
}

// Copies per-layer running statistics out of the backbone.
template <typename T>
BNStatSnapshot<T> snapshot_bn_stats(TeacherModel<T>& model) {
  if (model.backbone.bns.empty())
    throw StateError("model has no normalization layers to snapshot");
  BNStatSnapshot<T> snap;
  for (auto& bn : model.backbone.bns) {
    snap.means.push_back(bn.running_mean.v);
    snap.vars.push_back(bn.running_var.v);
  }
  return snap;
}

// Single-image teacher forward; routes the CAL math through the same
// functions the spec-level operations use, so the effect identity holds
// bit-for-bit.
template <typename T>
cal::TeacherOutputs<T> teacher_forward(const Tensor<T>& image,
                                       TeacherModel<T>& model,
                                       cal::CounterfactualMode cf_mode,
                                       std::uint64_t cf_seed) {
  if (image.rank() != 3 || image.dim(0) != model.in_channels)
    throw ValueError("teacher_forward: image shape " + shape_str(image) +
                     " does not match model input");
  if (!image.all_finite()) throw ValueError("teacher_forward: non-finite image");
  auto x = ad::constant(image.reshaped(
      {1, image.dim(0), image.dim(1), image.dim(2)}));
  auto feat = model.backbone.forward(x, /*training=*/false);
  auto attn = ad::relu(model.attn_conv.forward(feat));
  const int C = feat->value.dim(1), Hf = feat->value.dim(2),
            Wf = feat->value.dim(3);
  const int M = attn->value.dim(1);
  Tensor<T> f0 = feat->value.reshaped({C, Hf, Wf});
  Tensor<T> a0 = attn->value.reshaped({M, Hf, Wf});

  cal::TeacherOutputs<T> out;
  out.attention = a0;
  out.z = cal::attention_pool(f0, a0);
  const Tensor<T> abar = cal::sample_counterfactual(a0, cf_mode, cf_seed);
  auto [p_raw, p_eff] =
      cal::counterfactual_effect(f0, a0, abar, model.cal_classifier());
  out.p_raw = std::move(p_raw);
  out.p_eff = std::move(p_eff);

  std::vector<T> gap(C);
  const std::int64_t hw = std::int64_t(Hf) * Wf;
  for (int c = 0; c < C; ++c) {
    const T* p = f0.data() + std::int64_t(c) * hw;
    T s = 0;
    for (std::int64_t i = 0; i < hw; ++i) s += p[i];
    gap[c] = s / T(hw);
  }
  out.p_bb.assign(model.num_classes, T(0));
  for (int k = 0; k < model.num_classes; ++k) {
    const T* w = model.bb_weight->value.data() + std::int64_t(k) * C;
    T s = model.bb_bias->value[k];
    for (int c = 0; c < C; ++c) s += w[c] * gap[c];
    out.p_bb[k] = s;
  }
  return out;
}

}  // namespace fd2::model
