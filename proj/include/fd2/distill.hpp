#pragma once

#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fd2/cal.hpp"
#include "fd2/constraints.hpp"
#include "fd2/core.hpp"
#include "fd2/data.hpp"
#include "fd2/model.hpp"
#include "fd2/optim.hpp"
#include "fd2/pretrain.hpp"

// Stage 2: group-wise synthesis of the distilled images against the frozen
// teacher.

namespace fd2::distill {

// IPC split into ceil(ipc/n_s) groups: all but the last have length n_s.
struct DistillPlan {
  int ipc = 0;
  int group_size = 0;
  std::vector<int> groups;
};

inline DistillPlan plan_groups(int ipc, int n_s) {
  if (ipc < 1 || n_s < 1)
    throw ConfigError("plan_groups: ipc and group size must be >= 1");
  DistillPlan plan;
  plan.ipc = ipc;
  plan.group_size = n_s;
  const int g = (ipc + n_s - 1) / n_s;
  for (int i = 0; i < g - 1; ++i) plan.groups.push_back(n_s);
  plan.groups.push_back(ipc - (g - 1) * n_s);
  return plan;
}

enum class GridMode { k1x1, k2x2 };

inline GridMode parse_grid_mode(const std::string& s) {
  if (s == "1x1") return GridMode::k1x1;
  if (s == "2x2") return GridMode::k2x2;
  throw ConfigError("unknown grid mode '" + s + "' (expected 1x1|2x2)");
}

inline std::string to_string(GridMode m) {
  return m == GridMode::k1x1 ? "1x1" : "2x2";
}

// 1x1: one random real class image at synthesis resolution. 2x2: four random
// class images downscaled into quadrants (row-major: top-left, top-right,
// bottom-left, bottom-right).
inline Tensor<float> init_image(int class_id, const data::Dataset& pool,
                                GridMode mode, int target_size, Rng& rng) {
  const auto idx = pool.indices_of_class(class_id);
  if (idx.empty())
    throw ValueError("init_image: no real images for class " +
                     std::to_string(class_id));
  auto fetch = [&](std::size_t i) {
    const Tensor<float>& img = pool.images[i];
    return img.dim(1) == target_size ? img
                                     : data::resize_image(img, target_size);
  };
  if (mode == GridMode::k1x1)
    return fetch(idx[rng.uniform_int(idx.size())]);

  std::vector<std::size_t> pick(idx);
  if (pick.size() >= 4) {
    rng.shuffle(pick.begin(), pick.end());
    pick.resize(4);
  } else {
    pick.clear();
    for (int i = 0; i < 4; ++i) pick.push_back(idx[rng.uniform_int(idx.size())]);
  }
  const int half = target_size / 2;
  Tensor<float> out({3, target_size, target_size});
  for (int q = 0; q < 4; ++q) {
    Tensor<float> tile = data::resize_image(pool.images[pick[q]], half);
    const int r0 = (q / 2) * half, c0 = (q % 2) * half;
    for (int c = 0; c < 3; ++c)
      for (int h = 0; h < half; ++h)
        for (int w = 0; w < half; ++w)
          out.at3(c, r0 + h, c0 + w) = tile.at3(c, h, w);
  }
  return out;
}

// CE(p_bb, y) + r_bn * sum_layers(||mu_b - mu_run||^2 + ||var_b - var_run||^2)
template <typename T>
T base_distill_loss(
    const std::vector<T>& p_bb,
    const std::vector<std::pair<std::vector<T>, std::vector<T>>>& batch_moments,
    const model::BNStatSnapshot<T>& snapshot, int y, T r_bn) {
  if (batch_moments.size() != snapshot.layer_count())
    throw DimError("base_distill_loss: layer count mismatch (" +
                   std::to_string(batch_moments.size()) + " vs " +
                   std::to_string(snapshot.layer_count()) + ")");
  T stat = 0;
  for (std::size_t l = 0; l < batch_moments.size(); ++l) {
    const auto& [mu, var] = batch_moments[l];
    if (mu.size() != snapshot.means[l].size())
      throw DimError("base_distill_loss: channel count mismatch at layer " +
                     std::to_string(l));
    for (std::size_t c = 0; c < mu.size(); ++c) {
      const T dm = mu[c] - snapshot.means[l][c];
      const T dv = var[c] - snapshot.vars[l][c];
      stat += dm * dm + dv * dv;
    }
  }
  return cal::softmax_ce(p_bb, y) + r_bn * stat;
}

template <typename T>
ad::Var<T> base_distill_loss_graph(const model::TeacherTrace<T>& tr,
                                   const model::BNStatSnapshot<T>& snapshot,
                                   int y, T r_bn) {
  if (tr.bn_moments.size() != snapshot.layer_count())
    throw DimError("base_distill_loss: layer count mismatch");
  ad::Var<T> loss = ad::cross_entropy_mean(tr.p_bb, {y});
  if (r_bn == T(0)) return loss;
  ad::Var<T> stat;
  for (std::size_t l = 0; l < tr.bn_moments.size(); ++l) {
    const int c = static_cast<int>(snapshot.means[l].size());
    auto dm = ad::sub(tr.bn_moments[l].first,
                      ad::constant(Tensor<T>({c}, std::vector<T>(
                                                      snapshot.means[l].begin(),
                                                      snapshot.means[l].end()))));
    auto dv = ad::sub(tr.bn_moments[l].second,
                      ad::constant(Tensor<T>({c}, std::vector<T>(
                                                      snapshot.vars[l].begin(),
                                                      snapshot.vars[l].end()))));
    auto term = ad::add(ad::sum(ad::mul(dm, dm)), ad::sum(ad::mul(dv, dv)));
    stat = stat ? ad::add(stat, term) : term;
  }
  return ad::add(loss, ad::scale(stat, r_bn));
}

struct SynthOpts {
  int steps = 500;
  double lr = 0.1;
  double r_bn = 0.01;
  bool cosine_decay = true;
  bool enable_lf = true;
  bool enable_ls = true;
};

template <typename T>
struct DistillSampleResult {
  Tensor<T> image;      // [3,S,S], clamped to [0,1]
  Tensor<T> attention;  // [M,Hf,Wf] of the final image
  // reports[t] describes the state before update t; the last entry is the
  // final state.
  std::vector<constraints::ConstraintReport<T>> reports;
};

template <typename T>
void freeze(model::TeacherModel<T>& teacher) {
  for (auto& [name, var] : teacher.named_parameters())
    if (var) var->requires_grad = false;
}

namespace detail {

template <typename T>
Tensor<T> final_attention(model::TeacherModel<T>& teacher, const Tensor<T>& img) {
  model::ForwardOpts<T> opts;
  opts.want_effect = false;
  auto tr = teacher.forward(
      ad::constant(img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)})), opts);
  const int M = tr.attn->value.dim(1), Hf = tr.attn->value.dim(2),
            Wf = tr.attn->value.dim(3);
  return tr.attn->value.reshaped({M, Hf, Wf});
}

}  // namespace detail

// Synthesizes one distilled image by gradient descent on the pixels. The
// teacher is frozen; `index_in_group` is 1-based and the similarity term is
// forced to zero for the first sample of a group.
template <typename T>
DistillSampleResult<T> distill_sample(
    int y, int index_in_group, const std::vector<Tensor<T>>& prior_attns,
    model::TeacherModel<T>& teacher, const cal::PrototypeBank<T>& bank,
    const model::BNStatSnapshot<T>& snapshot,
    const constraints::LossWeights<T>& weights, const SynthOpts& opts,
    const Tensor<T>& init) {
  weights.validate();
  if (index_in_group < 1)
    throw ConfigError("distill_sample: group index is 1-based");
  if ((index_in_group == 1) != prior_attns.empty())
    throw StateError("distill_sample: prior attention cache inconsistent with "
                     "group index");
  if (bank.initialized_count() != bank.num_classes())
    throw StateError("distill_sample: prototype bank not fully initialized");
  freeze(teacher);

  const T lambda = weights.lambda_fs;
  const T alpha = weights.alpha;
  auto x = ad::leaf(init.reshaped({1, init.dim(0), init.dim(1), init.dim(2)}));
  optim::Adam<T> adam(x);
  DistillSampleResult<T> result;

  auto eval_losses = [&](bool build_grad)
      -> std::pair<constraints::ConstraintReport<T>, ad::Var<T>> {
    x->requires_grad = build_grad;
    model::MomentSink<T> sink;
    model::ForwardOpts<T> fw;
    fw.want_effect = false;
    fw.moments = &sink;
    auto tr = teacher.forward(x, fw);

    const int d = bank.dim();
    Tensor<T> z_row({d}, std::vector<T>(tr.z->value.v));
    const int p_dim = static_cast<int>(tr.attn->value.numel());
    Tensor<T> a_row = tr.attn->value.reshaped(
        {tr.attn->value.dim(1), tr.attn->value.dim(2), tr.attn->value.dim(3)});

    // component values for the report (same math as the graph terms)
    std::vector<T> p_bb_row(tr.p_bb->value.v);
    std::vector<T> p_raw_row(tr.p_raw->value.v);
    std::vector<std::pair<std::vector<T>, std::vector<T>>> moments;
    for (auto& [m, v] : tr.bn_moments) moments.emplace_back(m->value.v, v->value.v);
    const T l_other =
        base_distill_loss(p_bb_row, moments, snapshot, y, static_cast<T>(opts.r_bn));
    const T l_cls = constraints::cls_loss(p_bb_row, p_raw_row, y, alpha);
    const T l_f = opts.enable_lf
                      ? constraints::fg_constraint(z_row.v, bank, y,
                                                   weights.beta, weights.eps)
                      : T(0);
    const T l_s = (opts.enable_ls && !prior_attns.empty())
                      ? constraints::similarity_constraint(a_row, prior_attns,
                                                           weights.eps)
                      : T(0);
    auto report = constraints::total_loss(l_other, l_cls, l_f, l_s, lambda);
    report.prototype_score = constraints::prototype_score(
        z_row.v, bank, y, weights.beta, weights.eps);

    if (!build_grad) return {report, nullptr};

    ad::Var<T> loss = base_distill_loss_graph(tr, snapshot, y,
                                              static_cast<T>(opts.r_bn));
    if (alpha < T(1))
      loss = ad::add(loss, ad::scale(ad::cross_entropy_mean(tr.p_bb, {y}),
                                     T(1) - alpha));
    if (alpha > T(0))
      loss = ad::add(loss,
                     ad::scale(ad::cross_entropy_mean(tr.p_raw, {y}), alpha));
    if (opts.enable_lf && lambda > T(0)) {
      auto z_flat = ad::reshape(tr.z, {d});
      loss = ad::add(loss, ad::scale(constraints::fg_constraint_graph(
                                         z_flat, bank, y, weights.beta,
                                         weights.eps),
                                     lambda));
    }
    if (opts.enable_ls && lambda < T(1) && !prior_attns.empty()) {
      auto a_flat = ad::reshape(tr.attn, {p_dim});
      loss = ad::add(loss, ad::scale(constraints::similarity_constraint_graph(
                                         a_flat, prior_attns, weights.eps),
                                     T(1) - lambda));
    }
    return {report, loss};
  };

  for (int t = 0; t < opts.steps; ++t) {
    auto [report, loss] = eval_losses(true);
    result.reports.push_back(report);
    if (!std::isfinite(static_cast<double>(loss->value[0])))
      throw StateError("distill_sample: non-finite loss at iteration " +
                       std::to_string(t));
    ad::backward(loss);
    for (auto& [name, var] : teacher.named_parameters())
      if (var && var->has_grad())
        throw InternalError("frozen teacher received a gradient on " + name);
    const T lr = static_cast<T>(
        opts.cosine_decay ? optim::cosine_lr(opts.lr, t, opts.steps) : opts.lr);
    adam.step(lr);
    for (auto& v : x->value.v) v = std::clamp(v, T(0), T(1));
  }
  x->requires_grad = false;
  auto [final_report, ignored] = eval_losses(false);
  result.reports.push_back(final_report);

  result.image = x->value.reshaped({init.dim(0), init.dim(1), init.dim(2)});
  result.attention = detail::final_attention(teacher, result.image);
  return result;
}

// ---------------------------------------------------------------------------
// Full-set synthesis and persistence
// ---------------------------------------------------------------------------

struct DistillConfig {
  int ipc = 3;
  int group_size = 4;
  GridMode grid_mode = GridMode::k2x2;
  SynthOpts synth;
  constraints::LossWeights<float> weights;
  std::uint64_t seed = 0;
  std::string teacher_fingerprint;
  int image_size = 64;
};

struct DistilledSet {
  std::vector<std::vector<Tensor<float>>> images;  // [K][IPC]
  std::vector<std::vector<int>> prior_counts;      // cache size seen per sample
  std::vector<std::string> class_names;
  int image_size = 0;
  int ipc = 0;
  int group_size = 0;
  std::string grid_mode = "2x2";
  std::string teacher_fingerprint;
  std::uint64_t seed = 0;
  constraints::LossWeights<float> weights;

  int num_classes() const { return static_cast<int>(images.size()); }
};

// Per-class sequential synthesis; the attention cache threads through one
// group only and resets between groups.
inline DistilledSet distill_dataset(model::TeacherModel<float>& teacher,
                                    const cal::PrototypeBank<float>& bank,
                                    const model::BNStatSnapshot<float>& snapshot,
                                    const data::Dataset& pool,
                                    const DistillConfig& cfg) {
  if (pool.num_classes() != teacher.num_classes)
    throw ValueError("distill_dataset: pool class count " +
                     std::to_string(pool.num_classes()) +
                     " does not match teacher " +
                     std::to_string(teacher.num_classes));
  const std::uint64_t hash_before = model::param_hash(teacher);
  const DistillPlan plan = plan_groups(cfg.ipc, cfg.group_size);

  DistilledSet set;
  set.class_names = pool.class_names;
  set.image_size = cfg.image_size;
  set.ipc = cfg.ipc;
  set.group_size = cfg.group_size;
  set.grid_mode = to_string(cfg.grid_mode);
  set.teacher_fingerprint = cfg.teacher_fingerprint;
  set.seed = cfg.seed;
  set.weights = cfg.weights;

  Rng root(cfg.seed);
  for (int k = 0; k < pool.num_classes(); ++k) {
    Rng class_rng = root.fork(static_cast<std::uint64_t>(k));
    std::vector<Tensor<float>> class_images;
    std::vector<int> counts;
    for (int g = 0; g < static_cast<int>(plan.groups.size()); ++g) {
      std::vector<Tensor<float>> cache;
      for (int i = 1; i <= plan.groups[static_cast<std::size_t>(g)]; ++i) {
        Tensor<float> x0 =
            init_image(k, pool, cfg.grid_mode, cfg.image_size, class_rng);
        counts.push_back(static_cast<int>(cache.size()));
        auto res = distill_sample(k, i, cache, teacher, bank, snapshot,
                                  cfg.weights, cfg.synth, x0);
        // the cache keeps the live synthesis attention; the stored artifact
        // is the 8-bit-quantized image that downstream stages consume
        cache.push_back(res.attention);
        data::quantize_inplace(res.image);
        class_images.push_back(std::move(res.image));
      }
    }
    set.images.push_back(std::move(class_images));
    set.prior_counts.push_back(std::move(counts));
  }
  if (model::param_hash(teacher) != hash_before)
    throw InternalError("teacher parameters changed during distillation");
  return set;
}

// distilled/<class_id>/<index>.png plus a json manifest.
inline void save_distilled(const DistilledSet& set, const std::string& dir) {
  namespace fs = std::filesystem;
  if (fs::exists(dir)) fs::remove_all(dir);
  fs::create_directories(dir);
  for (int k = 0; k < set.num_classes(); ++k) {
    const fs::path cdir = fs::path(dir) / std::to_string(k);
    fs::create_directories(cdir);
    for (int i = 0; i < static_cast<int>(set.images[k].size()); ++i)
      data::encode_image_png((cdir / (std::to_string(i) + ".png")).string(),
                             set.images[k][i]);
  }
  nlohmann::json j;
  j["classes"] = set.class_names;
  j["ipc"] = set.ipc;
  j["group_size"] = set.group_size;
  j["grid_mode"] = set.grid_mode;
  j["image_size"] = set.image_size;
  j["seed"] = set.seed;
  j["teacher_fingerprint"] = set.teacher_fingerprint;
  j["weights"] = {{"alpha", set.weights.alpha}, {"beta", set.weights.beta},
                  {"lambda", set.weights.lambda_fs}, {"eta", set.weights.eta},
                  {"mu", set.weights.mu}, {"eps", set.weights.eps},
                  {"tau", set.weights.tau}};
  std::ofstream out(fs::path(dir) / "manifest.json");
  out << j.dump(2) << "\n";
}

inline DistilledSet load_distilled(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path mpath = fs::path(dir) / "manifest.json";
  std::ifstream in(mpath);
  if (!in) throw IoError("missing distilled manifest: " + mpath.string());
  nlohmann::json j;
  in >> j;
  DistilledSet set;
  set.class_names = j.at("classes").get<std::vector<std::string>>();
  set.ipc = j.at("ipc").get<int>();
  set.group_size = j.at("group_size").get<int>();
  set.grid_mode = j.at("grid_mode").get<std::string>();
  set.image_size = j.at("image_size").get<int>();
  set.seed = j.at("seed").get<std::uint64_t>();
  set.teacher_fingerprint = j.at("teacher_fingerprint").get<std::string>();
  const auto& w = j.at("weights");
  set.weights.alpha = w.at("alpha").get<float>();
  set.weights.beta = w.at("beta").get<float>();
  set.weights.lambda_fs = w.at("lambda").get<float>();
  set.weights.eta = w.at("eta").get<float>();
  set.weights.mu = w.at("mu").get<float>();
  set.weights.eps = w.at("eps").get<float>();
  set.weights.tau = w.at("tau").get<float>();
  for (int k = 0; k < static_cast<int>(set.class_names.size()); ++k) {
    std::vector<Tensor<float>> imgs;
    for (int i = 0; i < set.ipc; ++i) {
      const fs::path p = fs::path(dir) / std::to_string(k) /
                         (std::to_string(i) + ".png");
      if (!fs::exists(p))
        throw IoError("distilled set is missing " + p.string());
      imgs.push_back(data::decode_image(p.string(), set.image_size));
    }
    set.images.push_back(std::move(imgs));
  }
  return set;
}

}  // namespace fd2::distill
