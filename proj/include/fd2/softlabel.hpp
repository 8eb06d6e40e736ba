#pragma once

#include <Eigen/Dense>
#include <array>
#include <string>
#include <utility>
#include <vector>

#include "fd2/core.hpp"
#include "fd2/distill.hpp"
#include "fd2/model.hpp"
#include "fd2/optim.hpp"

// Stage 3: backbone-branch soft labels, student post-evaluation, and the
// feature-space diagnostics.

namespace fd2::softlabel {

enum class SoftLabelMode { kOffline, kOnline };

inline SoftLabelMode parse_softlabel_mode(const std::string& s) {
  if (s == "offline") return SoftLabelMode::kOffline;
  if (s == "online") return SoftLabelMode::kOnline;
  throw ConfigError("unknown soft-label mode '" + s +
                    "' (expected offline|online)");
}

inline std::string to_string(SoftLabelMode m) {
  return m == SoftLabelMode::kOffline ? "offline" : "online";
}

struct SoftLabelStore {
  int num_classes = 0;
  SoftLabelMode mode = SoftLabelMode::kOffline;
  float tau = 4.0f;
  std::string aug_policy = "none";
  std::uint64_t seed = 0;
  std::string teacher_fingerprint;
  // one row per distilled image; offline stores a single vector, online
  // accumulates the realized per-epoch vectors during student training
  std::vector<std::vector<std::vector<float>>> vectors;

  void validate_simplex() const {
    for (const auto& per_image : vectors)
      for (const auto& v : per_image) {
        double s = 0;
        for (float p : v) {
          if (p < 0) throw ValueError("soft label has a negative entry");
          s += p;
        }
        if (std::abs(s - 1.0) > 1e-5)
          throw ValueError("soft label does not sum to 1 (sum=" +
                           std::to_string(s) + ")");
      }
  }
};

template <typename T>
std::vector<T> softmax_scaled(const std::vector<T>& logits, T tau) {
  T mx = logits[0];
  for (T v : logits) mx = std::max(mx, v);
  std::vector<T> out(logits.size());
  T se = 0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    out[k] = std::exp((logits[k] - mx) / tau);
    se += out[k];
  }
  for (auto& v : out) v /= se;
  return out;
}

// Canonical flat order of a distilled set: class-major, then index.
inline std::pair<std::vector<Tensor<float>>, std::vector<int>> flatten_set(
    const distill::DistilledSet& set) {
  std::vector<Tensor<float>> images;
  std::vector<int> labels;
  for (int k = 0; k < set.num_classes(); ++k)
    for (const auto& img : set.images[static_cast<std::size_t>(k)]) {
      images.push_back(img);
      labels.push_back(k);
    }
  return {std::move(images), std::move(labels)};
}

namespace detail {

inline Tensor<float> stack(const std::vector<Tensor<float>>& images,
                           const std::vector<std::size_t>& idx,
                           std::size_t begin, std::size_t end) {
  const auto& first = images[idx[begin]];
  Tensor<float> batch({static_cast<int>(end - begin), first.dim(0),
                       first.dim(1), first.dim(2)});
  const std::int64_t stride = first.numel();
  for (std::size_t i = begin; i < end; ++i)
    std::copy(images[idx[i]].v.begin(), images[idx[i]].v.end(),
              batch.data() + std::int64_t(i - begin) * stride);
  return batch;
}

inline Tensor<float> teacher_bb_logits(model::TeacherModel<float>& teacher,
                                       const Tensor<float>& batch) {
  optim::NoGradGuard<float> guard(optim::param_vars(teacher));
  model::ForwardOpts<float> opts;
  opts.want_effect = false;
  auto tr = teacher.forward(ad::constant(batch), opts);
  return tr.p_bb->value;
}

}  // namespace detail

// Random crop (4px zero pad) and/or horizontal flip.
inline Tensor<float> augment(const Tensor<float>& img, const std::string& policy,
                             Rng& rng) {
  if (policy == "none") return img;
  if (policy != "flip" && policy != "crop_flip")
    throw ConfigError("unknown augmentation policy '" + policy + "'");
  Tensor<float> out = img;
  const int C = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (policy == "crop_flip") {
    const int pad = 4;
    const int dh = static_cast<int>(rng.uniform_int(2 * pad + 1)) - pad;
    const int dw = static_cast<int>(rng.uniform_int(2 * pad + 1)) - pad;
    Tensor<float> shifted({C, H, W});
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
          const int sh = h + dh, sw = w + dw;
          shifted.at3(c, h, w) = (sh >= 0 && sh < H && sw >= 0 && sw < W)
                                     ? img.at3(c, sh, sw)
                                     : 0.0f;
        }
    out = std::move(shifted);
  }
  if (rng.uniform() < 0.5) {
    Tensor<float> flipped({C, H, W});
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) flipped.at3(c, h, w) = out.at3(c, h, W - 1 - w);
    out = std::move(flipped);
  }
  return out;
}

// Offline mode materializes softmax(p_bb / tau) per image, no augmentation.
// Online mode records the configuration only; the per-batch vectors are
// realized during student training.
inline SoftLabelStore generate_soft_labels(model::TeacherModel<float>& teacher,
                                           const std::string& teacher_fingerprint,
                                           const distill::DistilledSet& set,
                                           SoftLabelMode mode, float tau,
                                           const std::string& aug_policy,
                                           std::uint64_t seed) {
  if (tau <= 0) throw ConfigError("soft-label temperature must be > 0");
  if (teacher_fingerprint != set.teacher_fingerprint)
    throw ProvenanceError("teacher fingerprint " + teacher_fingerprint +
                          " does not match distilled set provenance " +
                          set.teacher_fingerprint);
  SoftLabelStore store;
  store.num_classes = teacher.num_classes;
  store.mode = mode;
  store.tau = tau;
  store.aug_policy = mode == SoftLabelMode::kOffline ? "none" : aug_policy;
  store.seed = seed;
  store.teacher_fingerprint = teacher_fingerprint;

  auto [images, labels] = flatten_set(set);
  store.vectors.resize(images.size());
  if (mode == SoftLabelMode::kOffline) {
    std::vector<std::size_t> idx(images.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const std::size_t bs = 64;
    for (std::size_t b = 0; b < idx.size(); b += bs) {
      const std::size_t e = std::min(idx.size(), b + bs);
      Tensor<float> logits =
          detail::teacher_bb_logits(teacher, detail::stack(images, idx, b, e));
      const int K = teacher.num_classes;
      for (std::size_t i = b; i < e; ++i) {
        const float* row = logits.data() + std::int64_t(i - b) * K;
        store.vectors[i].push_back(
            softmax_scaled(std::vector<float>(row, row + K), tau));
      }
    }
    store.validate_simplex();
  }
  return store;
}

struct StudentConfig {
  int epochs = 100;
  int batch_size = 32;
  double lr = 0.02;
  double sgd_momentum = 0.9;
  std::vector<int> channels = {32, 64, 128, 128};
  std::uint64_t seed = 0;
};

// Trains a plain backbone student against the teacher soft labels with
// tau^2-scaled KL. Online mode couples the teacher to each augmented batch
// and logs the realized vectors into the store.
inline model::StudentModel<float> train_student(
    const distill::DistilledSet& set, SoftLabelStore& store,
    model::TeacherModel<float>* teacher, const StudentConfig& cfg) {
  if (store.teacher_fingerprint != set.teacher_fingerprint)
    throw ProvenanceError("soft-label store does not match distilled set");
  auto [images, labels] = flatten_set(set);
  if (images.empty()) throw ValueError("train_student: empty distilled set");
  if (store.vectors.size() != images.size())
    throw ValueError("train_student: store covers " +
                     std::to_string(store.vectors.size()) + " images, set has " +
                     std::to_string(images.size()));
  if (store.mode == SoftLabelMode::kOffline) {
    for (const auto& per_image : store.vectors)
      if (per_image.empty())
        throw ValueError("train_student: offline store has an unlabeled image");
  } else if (!teacher) {
    throw ValueError("train_student: online mode requires the teacher");
  }

  const int K = store.num_classes;
  Rng init_rng = Rng(cfg.seed).fork(0x73747564ull);
  model::StudentModel<float> student(K, 3, cfg.channels, init_rng);
  optim::Sgd<float> opt(optim::param_vars(student),
                        static_cast<float>(cfg.sgd_momentum));
  Rng train_rng = Rng(cfg.seed).fork(0x7472ull);

  std::vector<std::size_t> idx(images.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const std::int64_t steps_per_epoch =
      (idx.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;
  std::int64_t step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    train_rng.shuffle(idx.begin(), idx.end());
    for (std::size_t b = 0; b < idx.size(); b += cfg.batch_size, ++step) {
      const std::size_t e = std::min(idx.size(), b + cfg.batch_size);
      const int n = static_cast<int>(e - b);

      Tensor<float> batch({n, 3, set.image_size, set.image_size});
      const std::int64_t stride = std::int64_t(3) * set.image_size * set.image_size;
      Tensor<float> probs({n, K});
      for (int i = 0; i < n; ++i) {
        const std::size_t img_idx = idx[b + static_cast<std::size_t>(i)];
        Tensor<float> x = store.mode == SoftLabelMode::kOnline
                              ? augment(images[img_idx], store.aug_policy,
                                        train_rng)
                              : images[img_idx];
        std::copy(x.v.begin(), x.v.end(), batch.data() + std::int64_t(i) * stride);
        if (store.mode == SoftLabelMode::kOffline) {
          const auto& v = store.vectors[img_idx][0];
          std::copy(v.begin(), v.end(), probs.data() + std::int64_t(i) * K);
        }
      }
      if (store.mode == SoftLabelMode::kOnline) {
        Tensor<float> logits = detail::teacher_bb_logits(*teacher, batch);
        for (int i = 0; i < n; ++i) {
          const float* row = logits.data() + std::int64_t(i) * K;
          auto v = softmax_scaled(std::vector<float>(row, row + K), store.tau);
          std::copy(v.begin(), v.end(), probs.data() + std::int64_t(i) * K);
          store.vectors[idx[b + static_cast<std::size_t>(i)]].push_back(
              std::move(v));
        }
      }
      auto out = student.logits(ad::constant(batch), /*training=*/true);
      auto loss = ad::kl_to_teacher_mean(out, probs, store.tau);
      if (!std::isfinite(static_cast<double>(loss->value[0])))
        throw StateError("train_student: non-finite loss");
      ad::backward(loss);
      const float lr =
          static_cast<float>(optim::cosine_lr(cfg.lr, step, total_steps));
      opt.step(lr);
    }
  }
  return student;
}

// Fraction of argmax-correct predictions (first index wins ties).
inline double evaluate(model::StudentModel<float>& student,
                       const data::Dataset& test_set) {
  if (test_set.size() == 0) throw ValueError("evaluate: empty test set");
  optim::NoGradGuard<float> guard(optim::param_vars(student));
  std::vector<std::size_t> idx(test_set.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::size_t hits = 0;
  const std::size_t bs = 128;
  const int K = student.num_classes;
  for (std::size_t b = 0; b < idx.size(); b += bs) {
    const std::size_t e = std::min(idx.size(), b + bs);
    auto logits = student.logits(
        ad::constant(detail::stack(test_set.images, idx, b, e)), false);
    for (std::size_t i = b; i < e; ++i) {
      const float* row = logits->value.data() + std::int64_t(i - b) * K;
      int best = 0;
      for (int k = 1; k < K; ++k)
        if (row[k] > row[best]) best = k;
      hits += (best == test_set.labels[idx[i]]);
    }
  }
  return double(hits) / double(test_set.size());
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

namespace detail {

inline int infer_classes(const std::vector<int>& labels) {
  int k = 0;
  for (int y : labels) k = std::max(k, y + 1);
  return k;
}

inline std::vector<std::vector<double>> class_centroids(
    const std::vector<std::vector<double>>& features,
    const std::vector<int>& labels, int k) {
  if (features.size() != labels.size())
    throw DimError("features and labels differ in length");
  const std::size_t d = features.empty() ? 0 : features[0].size();
  std::vector<std::vector<double>> centroids(static_cast<std::size_t>(k),
                                             std::vector<double>(d, 0.0));
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i].size() != d) throw DimError("ragged feature matrix");
    auto& c = centroids[static_cast<std::size_t>(labels[i])];
    for (std::size_t j = 0; j < d; ++j) c[j] += features[i][j];
    ++counts[static_cast<std::size_t>(labels[i])];
  }
  for (int y = 0; y < k; ++y) {
    if (counts[static_cast<std::size_t>(y)] == 0)
      throw StateError("class " + std::to_string(y) + " has no samples");
    for (auto& v : centroids[static_cast<std::size_t>(y)])
      v /= counts[static_cast<std::size_t>(y)];
  }
  return centroids;
}

}  // namespace detail

// Per class: mean Euclidean distance of member features to the centroid.
inline std::vector<double> intra_class_dispersion(
    const std::vector<std::vector<double>>& features,
    const std::vector<int>& labels) {
  const int k = detail::infer_classes(labels);
  const auto centroids = detail::class_centroids(features, labels, k);
  std::vector<double> disp(static_cast<std::size_t>(k), 0.0);
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  for (std::size_t i = 0; i < features.size(); ++i) {
    disp[static_cast<std::size_t>(labels[i])] +=
        vnorm(vsub(features[i], centroids[static_cast<std::size_t>(labels[i])]));
    ++counts[static_cast<std::size_t>(labels[i])];
  }
  for (int y = 0; y < k; ++y)
    disp[static_cast<std::size_t>(y)] /= counts[static_cast<std::size_t>(y)];
  return disp;
}

// Per class: distance from its centroid to the nearest other-class centroid.
inline std::vector<double> inter_class_nn_center_distance(
    const std::vector<std::vector<double>>& features,
    const std::vector<int>& labels) {
  const int k = detail::infer_classes(labels);
  if (k < 2)
    throw StateError("nearest-center distance needs at least 2 classes");
  const auto centroids = detail::class_centroids(features, labels, k);
  std::vector<double> out(static_cast<std::size_t>(k), 0.0);
  for (int a = 0; a < k; ++a) {
    double best = -1.0;
    for (int b = 0; b < k; ++b) {
      if (a == b) continue;
      const double d = vnorm(vsub(centroids[static_cast<std::size_t>(a)],
                                  centroids[static_cast<std::size_t>(b)]));
      if (best < 0 || d < best) best = d;
    }
    out[static_cast<std::size_t>(a)] = best;
  }
  return out;
}

// tr of the biased covariance of the vectorized attention sets.
template <typename T>
double attention_diversity(const std::vector<Tensor<T>>& sets) {
  if (sets.empty()) throw ValueError("attention_diversity: no attention sets");
  const std::int64_t p = sets[0].numel();
  for (const auto& s : sets)
    if (!s.same_shape(sets[0]))
      throw DimError("attention_diversity: shape mismatch");
  std::vector<double> mean(static_cast<std::size_t>(p), 0.0);
  for (const auto& s : sets)
    for (std::int64_t j = 0; j < p; ++j)
      mean[static_cast<std::size_t>(j)] += static_cast<double>(s[j]);
  for (auto& v : mean) v /= double(sets.size());
  double tr = 0;
  for (const auto& s : sets)
    for (std::int64_t j = 0; j < p; ++j) {
      const double d = static_cast<double>(s[j]) - mean[static_cast<std::size_t>(j)];
      tr += d * d;
    }
  return tr / double(sets.size());
}

struct Projection {
  std::vector<std::array<double, 2>> coords;
  bool degenerate = false;
};

// Deterministic 2-component principal projection of centered features.
inline Projection export_projection(
    const std::vector<std::vector<double>>& features) {
  if (features.size() < 3)
    throw ValueError("export_projection needs at least 3 samples");
  const int n = static_cast<int>(features.size());
  const int d = static_cast<int>(features[0].size());
  Eigen::MatrixXd x(n, d);
  for (int i = 0; i < n; ++i) {
    if (static_cast<int>(features[static_cast<std::size_t>(i)].size()) != d)
      throw DimError("export_projection: ragged features");
    for (int j = 0; j < d; ++j)
      x(i, j) = features[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;

  Projection proj;
  proj.coords.assign(static_cast<std::size_t>(n), {0.0, 0.0});
  Eigen::BDCSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0 || sv(0) < 1e-12) {
    proj.degenerate = true;
    return proj;
  }
  const int comps = std::min<int>(2, static_cast<int>(sv.size()));
  Eigen::MatrixXd v = svd.matrixV().leftCols(comps);
  // sign convention: the largest-magnitude loading of each axis is positive
  for (int c = 0; c < comps; ++c) {
    int arg = 0;
    for (int j = 1; j < d; ++j)
      if (std::abs(v(j, c)) > std::abs(v(arg, c))) arg = j;
    if (v(arg, c) < 0) v.col(c) = -v.col(c);
  }
  const Eigen::MatrixXd scores = x * v;
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < comps; ++c)
      proj.coords[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)] =
          scores(i, c);
  return proj;
}

}  // namespace fd2::softlabel
