#pragma once

#include <string>
#include <utility>
#include <vector>

#include "fd2/cal.hpp"
#include "fd2/constraints.hpp"
#include "fd2/core.hpp"
#include "fd2/data.hpp"
#include "fd2/model.hpp"
#include "fd2/optim.hpp"

// Stage 1: train the Backbone+CAL teacher with the joint objective, maintain
// class prototypes online, and keep the best-epoch state.

namespace fd2::pretrain {

template <typename T = float>
struct TeacherCheckpoint {
  // architecture
  int num_classes = 0;
  int num_maps = 0;
  int in_channels = 3;
  int image_size = 0;
  std::vector<int> channels;
  // state
  std::vector<std::pair<std::string, Tensor<T>>> params;
  std::vector<std::pair<std::string, Tensor<T>>> buffers;
  cal::PrototypeBank<T> bank;
  model::BNStatSnapshot<T> snapshot;
  std::string config_fingerprint;
  // per-epoch (backbone, CAL) validation accuracy
  std::vector<std::pair<double, double>> history;
};

struct PretrainConfig {
  int epochs = 30;
  int batch_size = 64;
  double lr = 0.05;
  double sgd_momentum = 0.9;
  int num_maps = 8;
  std::vector<int> channels = {32, 64, 128, 128};
  cal::CounterfactualMode cf_mode = cal::CounterfactualMode::kRandom;
  std::uint64_t seed = 0;
  std::string config_fingerprint;
};

namespace detail {

template <typename T>
Tensor<T> gather_batch(const data::Dataset& ds,
                       const std::vector<std::size_t>& idx, std::size_t begin,
                       std::size_t end) {
  const auto& first = ds.images[idx[begin]];
  Tensor<T> batch({static_cast<int>(end - begin), first.dim(0), first.dim(1),
                   first.dim(2)});
  const std::int64_t stride = first.numel();
  for (std::size_t i = begin; i < end; ++i) {
    const auto& img = ds.images[idx[i]];
    for (std::int64_t j = 0; j < stride; ++j)
      batch[std::int64_t(i - begin) * stride + j] = static_cast<T>(img[j]);
  }
  return batch;
}

template <typename T>
std::vector<int> gather_labels(const data::Dataset& ds,
                               const std::vector<std::size_t>& idx,
                               std::size_t begin, std::size_t end) {
  std::vector<int> out;
  out.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) out.push_back(ds.labels[idx[i]]);
  return out;
}

inline int argmax_row(const float* p, int k) {
  int best = 0;
  for (int i = 1; i < k; ++i)
    if (p[i] > p[best]) best = i;
  return best;
}

}  // namespace detail

// One optimizer step on one batch, then the post-step prototype refresh.
// Branches with zero weight are not built at all, which keeps the untouched
// classifier bit-identical to its initialization.
template <typename T>
T pretrain_step(const Tensor<T>& batch_x, const std::vector<int>& batch_y,
                model::TeacherModel<T>& teacher, cal::PrototypeBank<T>& bank,
                const constraints::LossWeights<T>& weights, optim::Sgd<T>& opt,
                T lr, Rng& rng,
                cal::CounterfactualMode cf_mode = cal::CounterfactualMode::kRandom) {
  if (batch_x.dim(0) < 1) throw ValueError("pretrain_step: empty batch");
  weights.validate();
  const T alpha = weights.alpha;

  model::ForwardOpts<T> opts;
  opts.training = true;
  opts.want_effect = alpha > T(0);
  opts.cf_mode = cf_mode;
  opts.rng = &rng;
  auto x = ad::constant(batch_x);
  auto tr = teacher.forward(x, opts);

  ad::Var<T> loss;
  if (alpha < T(1))
    loss = ad::scale(ad::cross_entropy_mean(tr.p_bb, batch_y), T(1) - alpha);
  if (alpha > T(0)) {
    auto l_cal = ad::add(ad::cross_entropy_mean(tr.p_raw, batch_y),
                         ad::cross_entropy_mean(tr.p_eff, batch_y));
    if (weights.eta > T(0)) {
      const int N = batch_x.dim(0), D = bank.dim();
      Tensor<T> centers({N, D});
      std::vector<char> mask(static_cast<std::size_t>(N), 0);
      for (int n = 0; n < N; ++n) {
        const int y = batch_y[static_cast<std::size_t>(n)];
        bank.check_class(y);
        if (!bank.initialized[static_cast<std::size_t>(y)]) continue;
        mask[static_cast<std::size_t>(n)] = 1;
        const std::vector<T> cn = vnormalize(bank.prototype(y));
        std::copy(cn.begin(), cn.end(), centers.data() + std::int64_t(n) * D);
      }
      l_cal = ad::add(l_cal, ad::scale(ad::masked_sqdist_mean(tr.z, centers, mask),
                                       weights.eta));
    }
    auto scaled = ad::scale(l_cal, alpha);
    loss = loss ? ad::add(loss, scaled) : scaled;
  }

  const T loss_value = loss->value[0];
  if (!std::isfinite(static_cast<double>(loss_value)))
    throw StateError("pretrain_step: non-finite loss " +
                     std::to_string(static_cast<double>(loss_value)));
  ad::backward(loss);
  opt.step(lr);

  // prototype refresh with post-step features
  {
    optim::NoGradGuard<T> guard(optim::param_vars(teacher));
    model::ForwardOpts<T> po;
    po.training = false;
    po.want_effect = false;
    auto ptr = teacher.forward(ad::constant(batch_x), po);
    const int D = bank.dim();
    for (int n = 0; n < batch_x.dim(0); ++n) {
      const T* zp = ptr.z->value.data() + std::int64_t(n) * D;
      cal::update_prototype(bank, batch_y[static_cast<std::size_t>(n)],
                            std::vector<T>(zp, zp + D));
    }
  }
  return loss_value;
}

// Validation accuracy of both heads: (backbone, CAL).
template <typename T>
std::pair<double, double> evaluate_heads(model::TeacherModel<T>& teacher,
                                         const data::Dataset& ds,
                                         int batch_size = 128) {
  if (ds.size() == 0) throw ValueError("evaluate_heads: empty dataset");
  optim::NoGradGuard<T> guard(optim::param_vars(teacher));
  std::vector<std::size_t> idx(ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::size_t bb_hits = 0, cal_hits = 0;
  for (std::size_t b = 0; b < idx.size(); b += batch_size) {
    const std::size_t e = std::min(idx.size(), b + batch_size);
    auto x = ad::constant(detail::gather_batch<T>(ds, idx, b, e));
    model::ForwardOpts<T> opts;
    opts.want_effect = false;
    auto tr = teacher.forward(x, opts);
    const int K = teacher.num_classes;
    for (std::size_t i = b; i < e; ++i) {
      const int n = static_cast<int>(i - b);
      const T* bb = tr.p_bb->value.data() + std::int64_t(n) * K;
      const T* cl = tr.p_raw->value.data() + std::int64_t(n) * K;
      int bb_best = 0, cal_best = 0;
      for (int k = 1; k < K; ++k) {
        if (bb[k] > bb[bb_best]) bb_best = k;
        if (cl[k] > cl[cal_best]) cal_best = k;
      }
      bb_hits += (bb_best == ds.labels[idx[i]]);
      cal_hits += (cal_best == ds.labels[idx[i]]);
    }
  }
  return {double(bb_hits) / double(ds.size()),
          double(cal_hits) / double(ds.size())};
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> snapshot_params(
    model::TeacherModel<T>& m) {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  for (auto& [name, var] : m.named_parameters())
    if (var) out.emplace_back(name, var->value);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> snapshot_buffers(
    model::TeacherModel<T>& m) {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  for (auto& [name, buf] : m.named_buffers()) out.emplace_back(name, *buf);
  return out;
}

// Rebuilds the model a checkpoint describes.
template <typename T>
model::TeacherModel<T> build_model(const TeacherCheckpoint<T>& ckpt) {
  Rng rng(0);
  model::TeacherModel<T> m(ckpt.num_classes, ckpt.num_maps, ckpt.in_channels,
                           ckpt.channels, rng);
  auto params = m.named_parameters();
  for (const auto& [name, tensor] : ckpt.params) {
    bool found = false;
    for (auto& [pname, var] : params)
      if (pname == name) {
        if (!var || !var->value.same_shape(tensor))
          throw StateError("checkpoint parameter shape mismatch for " + name);
        var->value = tensor;
        found = true;
        break;
      }
    if (!found) throw StateError("checkpoint has unknown parameter " + name);
  }
  auto buffers = m.named_buffers();
  for (const auto& [name, tensor] : ckpt.buffers) {
    bool found = false;
    for (auto& [bname, buf] : buffers)
      if (bname == name) {
        *buf = tensor;
        found = true;
        break;
      }
    if (!found) throw StateError("checkpoint has unknown buffer " + name);
  }
  return m;
}

template <typename T = float>
TeacherCheckpoint<T> pretrain(const data::Dataset& train_ds,
                              const data::Dataset& val_ds,
                              const constraints::LossWeights<T>& weights,
                              const PretrainConfig& cfg) {
  if (train_ds.size() == 0) throw ValueError("pretrain: empty training set");
  if (train_ds.num_classes() < 2)
    throw ValueError("pretrain: need at least 2 classes");
  if (val_ds.size() == 0) throw ValueError("pretrain: empty validation split");
  weights.validate();
  if (cfg.epochs < 1 || cfg.batch_size < 1)
    throw ConfigError("pretrain: epochs and batch size must be >= 1");

  const int K = train_ds.num_classes();
  Rng init_rng = Rng(cfg.seed).fork(0x696e6974ull);
  model::TeacherModel<T> teacher(K, cfg.num_maps, 3, cfg.channels, init_rng);
  cal::PrototypeBank<T> bank(K, cfg.num_maps * teacher.feature_channels(),
                             weights.mu);
  optim::Sgd<T> opt(optim::param_vars(teacher), T(cfg.sgd_momentum));
  Rng train_rng = Rng(cfg.seed).fork(0x747261696eull);

  TeacherCheckpoint<T> best;
  best.num_classes = K;
  best.num_maps = cfg.num_maps;
  best.in_channels = 3;
  best.image_size = train_ds.image_size;
  best.channels = cfg.channels;
  best.config_fingerprint = cfg.config_fingerprint;
  double best_acc = -1.0;

  std::vector<std::size_t> idx(train_ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const std::int64_t steps_per_epoch =
      (idx.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;
  std::int64_t step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    train_rng.shuffle(idx.begin(), idx.end());
    for (std::size_t b = 0; b < idx.size(); b += cfg.batch_size, ++step) {
      const std::size_t e = std::min(idx.size(), b + cfg.batch_size);
      const T lr = static_cast<T>(optim::cosine_lr(cfg.lr, step, total_steps));
      pretrain_step(detail::gather_batch<T>(train_ds, idx, b, e),
                    detail::gather_labels<T>(train_ds, idx, b, e), teacher,
                    bank, weights, opt, lr, train_rng, cfg.cf_mode);
    }
    const auto [bb_acc, cal_acc] = evaluate_heads(teacher, val_ds);
    best.history.emplace_back(bb_acc, cal_acc);
    if (bb_acc > best_acc) {
      best_acc = bb_acc;
      best.params = snapshot_params(teacher);
      best.buffers = snapshot_buffers(teacher);
      best.bank = bank;
      best.snapshot = model::snapshot_bn_stats(teacher);
    }
  }
  return best;
}

}  // namespace fd2::pretrain
