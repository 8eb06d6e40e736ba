#pragma once

#include <Eigen/Core>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fd2/core.hpp"

// Reverse-mode tape over Tensor<T>. Ops are coarse (whole-layer) so the tape
// overhead is negligible next to the GEMMs. Nodes whose inputs carry no
// gradient collapse to constants and skip all caching, which keeps inference
// passes lean.

namespace fd2::ad {

template <typename T>
struct Node;

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<Var<T>> parents;
  std::function<void(Node<T>&)> backward_fn;
  std::int64_t order = 0;

  bool has_grad() const { return !grad.v.empty(); }

  Tensor<T>& ensure_grad() {
    if (grad.v.empty()) grad = Tensor<T>::zeros(value.shape);
    return grad;
  }

  void clear_grad() { grad = Tensor<T>(); }
};

inline std::int64_t next_order() {
  static std::atomic<std::int64_t> counter{0};
  return ++counter;
}

template <typename T>
Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->order = next_order();
  return n;
}

template <typename T>
Var<T> constant(Tensor<T> value) {
  return leaf(std::move(value), false);
}

template <typename T>
Var<T> scalar_const(T x) {
  return constant(Tensor<T>::scalar(x));
}

namespace detail {

template <typename T>
bool any_grad(std::initializer_list<const Var<T>*> vars) {
  for (const Var<T>* v : vars)
    if (*v && (*v)->requires_grad) return true;
  return false;
}

template <typename T>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> parents,
                 std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->order = next_order();
  for (const auto& p : parents)
    if (p && p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return n;
}

}  // namespace detail

// Runs reverse accumulation from a scalar root. Gradients accumulate into
// every reachable node with requires_grad; leaves keep theirs until cleared.
template <typename T>
void backward(const Var<T>& root) {
  if (root->value.numel() != 1)
    throw DimError("backward: root must be scalar, got " +
                   shape_str(root->value));
  if (!root->requires_grad) return;

  std::vector<Node<T>*> topo;
  std::unordered_set<Node<T>*> seen;
  std::vector<Node<T>*> stack{root.get()};
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    topo.push_back(n);
    for (const auto& p : n->parents)
      if (p && p->requires_grad && !seen.count(p.get())) stack.push_back(p.get());
  }
  std::sort(topo.begin(), topo.end(),
            [](Node<T>* a, Node<T>* b) { return a->order > b->order; });

  root->ensure_grad().v[0] = T(1);
  for (Node<T>* n : topo) {
    if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

template <typename T>
void check_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (!a->value.same_shape(b->value))
    throw DimError(std::string(op) + ": shape mismatch " + shape_str(a->value) +
                   " vs " + shape_str(b->value));
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "add");
  Tensor<T> out = a->value;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
  return detail::make_node<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
    if (a->requires_grad) {
      auto& ga = a->ensure_grad();
      for (std::int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i];
    }
    if (b->requires_grad) {
      auto& gb = b->ensure_grad();
      for (std::int64_t i = 0; i < n.grad.numel(); ++i) gb[i] += n.grad[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "sub");
  Tensor<T> out = a->value;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
  return detail::make_node<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
    if (a->requires_grad) {
      auto& ga = a->ensure_grad();
      for (std::int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i];
    }
    if (b->requires_grad) {
      auto& gb = b->ensure_grad();
      for (std::int64_t i = 0; i < n.grad.numel(); ++i) gb[i] -= n.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "mul");
  Tensor<T> out = a->value;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
  return detail::make_node<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
    if (a->requires_grad) {
      auto& ga = a->ensure_grad();
      for (std::int64_t i = 0; i < n.grad.numel(); ++i)
        ga[i] += n.grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      auto& gb = b->ensure_grad();
      for (std::int64_t i = 0; i < n.grad.numel(); ++i)
        gb[i] += n.grad[i] * a->value[i];
    }
  });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "div");
  Tensor<T> out = a->value;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] /= b->value[i];
  return detail::make_node<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
    if (a->requires_grad) {
      auto& ga = a->ensure_grad();
      for (std::int64_t i = 0; i < n.grad.numel(); ++i)
        ga[i] += n.grad[i] / b->value[i];
    }
    if (b->requires_grad) {
      auto& gb = b->ensure_grad();
      for (std::int64_t i = 0; i < n.grad.numel(); ++i)
        gb[i] -= n.grad[i] * a->value[i] / (b->value[i] * b->value[i]);
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  Tensor<T> out = a->value;
  for (auto& x : out.v) x *= c;
  return detail::make_node<T>(std::move(out), {a}, [a, c](Node<T>& n) {
    auto& ga = a->ensure_grad();
    for (std::int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += c * n.grad[i];
  });
}

template <typename T>
Var<T> add_const(const Var<T>& a, T c) {
  Tensor<T> out = a->value;
  for (auto& x : out.v) x += c;
  return detail::make_node<T>(std::move(out), {a}, [a](Node<T>& n) {
    auto& ga = a->ensure_grad();
    for (std::int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i];
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (T x : a->value.v) s += x;
  return detail::make_node<T>(Tensor<T>::scalar(s), {a}, [a](Node<T>& n) {
    auto& ga = a->ensure_grad();
    const T g = n.grad[0];
    for (auto& x : ga.v) x += g;
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const T inv = T(1) / T(a->value.numel());
  T s = 0;
  for (T x : a->value.v) s += x;
  s *= inv;
  return detail::make_node<T>(Tensor<T>::scalar(s), {a}, [a, inv](Node<T>& n) {
    auto& ga = a->ensure_grad();
    const T g = n.grad[0] * inv;
    for (auto& x : ga.v) x += g;
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, std::vector<int> shape) {
  Tensor<T> out = a->value.reshaped(std::move(shape));
  return detail::make_node<T>(std::move(out), {a}, [a](Node<T>& n) {
    auto& ga = a->ensure_grad();
    for (std::int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i];
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a->value;
  for (auto& x : out.v)
    if (x < T(0)) x = T(0);
  return detail::make_node<T>(std::move(out), {a}, [a](Node<T>& n) {
    auto& ga = a->ensure_grad();
    for (std::int64_t i = 0; i < n.grad.numel(); ++i)
      if (a->value[i] > T(0)) ga[i] += n.grad[i];
  });
}

// sign(x) * sqrt(|x| + eps); the eps keeps the slope bounded near zero.
template <typename T>
Var<T> signed_sqrt(const Var<T>& a, T eps = T(1e-12)) {
  Tensor<T> out = a->value;
  for (auto& x : out.v) {
    const T s = x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0));
    x = s * std::sqrt(std::abs(x) + eps);
  }
  return detail::make_node<T>(std::move(out), {a}, [a, eps](Node<T>& n) {
    auto& ga = a->ensure_grad();
    for (std::int64_t i = 0; i < n.grad.numel(); ++i)
      ga[i] += n.grad[i] * T(0.5) / std::sqrt(std::abs(a->value[i]) + eps);
  });
}

// L2 norm over all elements; subgradient at the origin is taken as zero.
template <typename T>
Var<T> vec_norm(const Var<T>& a) {
  T s = 0;
  for (T x : a->value.v) s += x * x;
  const T nrm = std::sqrt(s);
  return detail::make_node<T>(Tensor<T>::scalar(nrm), {a}, [a, nrm](Node<T>& n) {
    if (nrm <= T(0)) return;
    auto& ga = a->ensure_grad();
    const T g = n.grad[0] / nrm;
    for (std::int64_t i = 0; i < a->value.numel(); ++i) ga[i] += g * a->value[i];
  });
}

// Row-wise Euclidean normalization of [N, D]; rows with norm below the guard
// map to zero with zero gradient.
template <typename T>
Var<T> l2_normalize_rows(const Var<T>& a, T guard = T(1e-12)) {
  if (a->value.rank() != 2) throw DimError("l2_normalize_rows expects [N,D]");
  const int N = a->value.dim(0), D = a->value.dim(1);
  Tensor<T> out(a->value.shape);
  auto norms = std::make_shared<std::vector<T>>(N);
  for (int r = 0; r < N; ++r) {
    T s = 0;
    const T* x = a->value.data() + std::int64_t(r) * D;
    for (int j = 0; j < D; ++j) s += x[j] * x[j];
    const T nrm = std::sqrt(s);
    (*norms)[r] = nrm;
    T* y = out.data() + std::int64_t(r) * D;
    if (nrm > guard)
      for (int j = 0; j < D; ++j) y[j] = x[j] / nrm;
  }
  return detail::make_node<T>(
      std::move(out), {a}, [a, norms, N, D, guard](Node<T>& n) {
        auto& ga = a->ensure_grad();
        for (int r = 0; r < N; ++r) {
          const T nrm = (*norms)[r];
          if (nrm <= guard) continue;
          const T* y = n.value.data() + std::int64_t(r) * D;
          const T* gy = n.grad.data() + std::int64_t(r) * D;
          T ydot = 0;
          for (int j = 0; j < D; ++j) ydot += y[j] * gy[j];
          T* gx = ga.data() + std::int64_t(r) * D;
          for (int j = 0; j < D; ++j) gx[j] += (gy[j] - y[j] * ydot) / nrm;
        }
      });
}

// ---------------------------------------------------------------------------
// Dense / convolutional layers
// ---------------------------------------------------------------------------

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapRM = Eigen::Map<const RowMat<T>>;

// y = x * w^T + b with x:[N,D], w:[K,D], b:[K] (bias optional)
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b = nullptr) {
  if (x->value.rank() != 2 || w->value.rank() != 2 ||
      x->value.dim(1) != w->value.dim(1))
    throw DimError("linear: incompatible shapes " + shape_str(x->value) +
                   " vs " + shape_str(w->value));
  const int N = x->value.dim(0), D = x->value.dim(1), K = w->value.dim(0);
  if (b && b->value.numel() != K) throw DimError("linear: bad bias length");
  Tensor<T> out({N, K});
  CMapRM<T> X(x->value.data(), N, D);
  CMapRM<T> W(w->value.data(), K, D);
  MapRM<T> Y(out.data(), N, K);
  Y.noalias() = X * W.transpose();
  if (b)
    for (int r = 0; r < N; ++r)
      for (int k = 0; k < K; ++k) out.at2(r, k) += b->value[k];
  return detail::make_node<T>(
      std::move(out), {x, w, b}, [x, w, b, N, D, K](Node<T>& n) {
        CMapRM<T> GY(n.grad.data(), N, K);
        if (x->requires_grad) {
          MapRM<T> GX(x->ensure_grad().data(), N, D);
          CMapRM<T> W(w->value.data(), K, D);
          GX.noalias() += GY * W;
        }
        if (w->requires_grad) {
          MapRM<T> GW(w->ensure_grad().data(), K, D);
          CMapRM<T> X(x->value.data(), N, D);
          GW.noalias() += GY.transpose() * X;
        }
        if (b && b->requires_grad) {
          auto& gb = b->ensure_grad();
          for (int r = 0; r < N; ++r)
            for (int k = 0; k < K; ++k) gb[k] += n.grad.at2(r, k);
        }
      });
}

namespace detail {

template <typename T>
void im2col(const T* x, int C, int H, int W, int k, int pad, T* col) {
  const int Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1;
  for (int c = 0; c < C; ++c)
    for (int kh = 0; kh < k; ++kh)
      for (int kw = 0; kw < k; ++kw) {
        T* row = col + (std::int64_t(c) * k * k + kh * k + kw) *
                           (std::int64_t(Ho) * Wo);
        for (int ho = 0; ho < Ho; ++ho) {
          const int h = ho + kh - pad;
          if (h < 0 || h >= H) {
            std::fill(row + std::int64_t(ho) * Wo, row + std::int64_t(ho + 1) * Wo,
                      T(0));
            continue;
          }
          const T* src = x + (std::int64_t(c) * H + h) * W;
          for (int wo = 0; wo < Wo; ++wo) {
            const int ww = wo + kw - pad;
            row[std::int64_t(ho) * Wo + wo] =
                (ww >= 0 && ww < W) ? src[ww] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_acc(const T* col, int C, int H, int W, int k, int pad, T* gx) {
  const int Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1;
  for (int c = 0; c < C; ++c)
    for (int kh = 0; kh < k; ++kh)
      for (int kw = 0; kw < k; ++kw) {
        const T* row = col + (std::int64_t(c) * k * k + kh * k + kw) *
                                 (std::int64_t(Ho) * Wo);
        for (int ho = 0; ho < Ho; ++ho) {
          const int h = ho + kh - pad;
          if (h < 0 || h >= H) continue;
          T* dst = gx + (std::int64_t(c) * H + h) * W;
          for (int wo = 0; wo < Wo; ++wo) {
            const int ww = wo + kw - pad;
            if (ww >= 0 && ww < W) dst[ww] += row[std::int64_t(ho) * Wo + wo];
          }
        }
      }
}

}  // namespace detail

// Stride-1 2d convolution, NCHW. x:[N,Ci,H,W], w:[Co,Ci,k,k], b:[Co]|null.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int pad) {
  if (x->value.rank() != 4 || w->value.rank() != 4)
    throw DimError("conv2d expects 4-d input and weight");
  const int N = x->value.dim(0), Ci = x->value.dim(1), H = x->value.dim(2),
            W = x->value.dim(3);
  const int Co = w->value.dim(0), k = w->value.dim(2);
  if (w->value.dim(1) != Ci || w->value.dim(3) != k)
    throw DimError("conv2d: weight " + shape_str(w->value) +
                   " incompatible with input " + shape_str(x->value));
  const int Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1;
  if (Ho <= 0 || Wo <= 0) throw DimError("conv2d: output would be empty");

  const std::int64_t ckk = std::int64_t(Ci) * k * k;
  const std::int64_t hw = std::int64_t(Ho) * Wo;
  const bool needs_grad = detail::any_grad<T>({&x, &w, &b});

  Tensor<T> out({N, Co, Ho, Wo});
  // col caches survive into the backward closure only when gradients flow.
  auto cols = std::make_shared<std::vector<Tensor<T>>>();
  if (needs_grad) cols->resize(N);

  Tensor<T> scratch;
  if (!needs_grad) scratch = Tensor<T>({int(ckk), int(hw)});
  for (int n = 0; n < N; ++n) {
    Tensor<T>* col = needs_grad ? &(*cols)[n] : &scratch;
    if (needs_grad) *col = Tensor<T>({int(ckk), int(hw)});
    detail::im2col(x->value.data() + std::int64_t(n) * Ci * H * W, Ci, H, W, k,
                   pad, col->data());
    CMapRM<T> Wm(w->value.data(), Co, ckk);
    CMapRM<T> Cm(col->data(), ckk, hw);
    MapRM<T> Ym(out.data() + std::int64_t(n) * Co * hw, Co, hw);
    Ym.noalias() = Wm * Cm;
    if (b)
      for (int co = 0; co < Co; ++co) {
        T* dst = out.data() + (std::int64_t(n) * Co + co) * hw;
        const T bv = b->value[co];
        for (std::int64_t i = 0; i < hw; ++i) dst[i] += bv;
      }
  }
  return detail::make_node<T>(
      std::move(out), {x, w, b},
      [x, w, b, cols, N, Ci, H, W, Co, k, pad, ckk, hw](Node<T>& n) {
        for (int s = 0; s < N; ++s) {
          CMapRM<T> GY(n.grad.data() + std::int64_t(s) * Co * hw, Co, hw);
          if (w->requires_grad) {
            MapRM<T> GW(w->ensure_grad().data(), Co, ckk);
            CMapRM<T> Cm((*cols)[s].data(), ckk, hw);
            GW.noalias() += GY * Cm.transpose();
          }
          if (x->requires_grad) {
            Tensor<T> gcol({int(ckk), int(hw)});
            MapRM<T> GC(gcol.data(), ckk, hw);
            CMapRM<T> Wm(w->value.data(), Co, ckk);
            GC.noalias() = Wm.transpose() * GY;
            detail::col2im_acc(gcol.data(), Ci, H, W, k, pad,
                               x->ensure_grad().data() +
                                   std::int64_t(s) * Ci * H * W);
          }
        }
        if (b && b->requires_grad) {
          auto& gb = b->ensure_grad();
          for (int s = 0; s < N; ++s)
            for (int co = 0; co < Co; ++co) {
              const T* g = n.grad.data() + (std::int64_t(s) * Co + co) * hw;
              T acc = 0;
              for (std::int64_t i = 0; i < hw; ++i) acc += g[i];
              gb[co] += acc;
            }
        }
      });
}

// 2x2 max pooling, stride 2 (even spatial dims assumed by the backbone).
template <typename T>
Var<T> maxpool2(const Var<T>& x) {
  if (x->value.rank() != 4) throw DimError("maxpool2 expects 4-d input");
  const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2),
            W = x->value.dim(3);
  const int Ho = H / 2, Wo = W / 2;
  Tensor<T> out({N, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(out.numel());
  std::int64_t o = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* plane = x->value.data() + (std::int64_t(n) * C + c) * H * W;
      for (int ho = 0; ho < Ho; ++ho)
        for (int wo = 0; wo < Wo; ++wo, ++o) {
          std::int64_t best = std::int64_t(2 * ho) * W + 2 * wo;
          T bv = plane[best];
          const std::int64_t cand[3] = {best + 1, best + W, best + W + 1};
          for (std::int64_t idx : cand)
            if (plane[idx] > bv) {
              bv = plane[idx];
              best = idx;
            }
          out[o] = bv;
          (*argmax)[o] = (std::int64_t(n) * C + c) * H * W + best;
        }
    }
  return detail::make_node<T>(std::move(out), {x}, [x, argmax](Node<T>& n) {
    auto& gx = x->ensure_grad();
    for (std::int64_t i = 0; i < n.grad.numel(); ++i)
      gx[(*argmax)[i]] += n.grad[i];
  });
}

// [N,C,H,W] -> [N,C] spatial mean
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  if (x->value.rank() != 4) throw DimError("global_avg_pool expects 4-d input");
  const int N = x->value.dim(0), C = x->value.dim(1);
  const std::int64_t hw = std::int64_t(x->value.dim(2)) * x->value.dim(3);
  const T inv = T(1) / T(hw);
  Tensor<T> out({N, C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* p = x->value.data() + (std::int64_t(n) * C + c) * hw;
      T s = 0;
      for (std::int64_t i = 0; i < hw; ++i) s += p[i];
      out.at2(n, c) = s * inv;
    }
  return detail::make_node<T>(std::move(out), {x}, [x, N, C, hw, inv](Node<T>& n) {
    auto& gx = x->ensure_grad();
    for (int s = 0; s < N; ++s)
      for (int c = 0; c < C; ++c) {
        const T g = n.grad.at2(s, c) * inv;
        T* p = gx.data() + (std::int64_t(s) * C + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) p[i] += g;
      }
  });
}

// Per-channel mean and biased variance over (N,H,W); both differentiable.
template <typename T>
std::pair<Var<T>, Var<T>> channel_moments(const Var<T>& x) {
  if (x->value.rank() != 4) throw DimError("channel_moments expects 4-d input");
  const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2),
            W = x->value.dim(3);
  const std::int64_t hw = std::int64_t(H) * W;
  const std::int64_t m = std::int64_t(N) * hw;
  const T inv = T(1) / T(m);
  Tensor<T> mu({C}), var({C});
  for (int c = 0; c < C; ++c) {
    T s = 0;
    for (int n = 0; n < N; ++n) {
      const T* p = x->value.data() + (std::int64_t(n) * C + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) s += p[i];
    }
    mu[c] = s * inv;
  }
  for (int c = 0; c < C; ++c) {
    T s = 0;
    for (int n = 0; n < N; ++n) {
      const T* p = x->value.data() + (std::int64_t(n) * C + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) {
        const T d = p[i] - mu[c];
        s += d * d;
      }
    }
    var[c] = s * inv;
  }
  auto mu_keep = std::make_shared<Tensor<T>>(mu);
  Var<T> mean_node = detail::make_node<T>(
      std::move(mu), {x}, [x, C, hw, inv](Node<T>& n) {
        auto& gx = x->ensure_grad();
        const int N2 = x->value.dim(0);
        for (int s = 0; s < N2; ++s)
          for (int c = 0; c < C; ++c) {
            const T g = n.grad[c] * inv;
            T* p = gx.data() + (std::int64_t(s) * C + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) p[i] += g;
          }
      });
  Var<T> var_node = detail::make_node<T>(
      std::move(var), {x}, [x, mu_keep, C, hw, inv](Node<T>& n) {
        // centered sum vanishes, so d var / d x_i = 2 (x_i - mu_c) / m
        auto& gx = x->ensure_grad();
        const int N2 = x->value.dim(0);
        for (int s = 0; s < N2; ++s)
          for (int c = 0; c < C; ++c) {
            const T g = n.grad[c] * inv * T(2);
            const T mc = (*mu_keep)[c];
            const T* xv = x->value.data() + (std::int64_t(s) * C + c) * hw;
            T* p = gx.data() + (std::int64_t(s) * C + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) p[i] += g * (xv[i] - mc);
          }
      });
  return {mean_node, var_node};
}

// Training-mode batch normalization; normalizes with the batch moments and
// reports them so the layer can maintain running statistics.
template <typename T>
struct BatchNormResult {
  Var<T> out;
  Tensor<T> batch_mean;
  Tensor<T> batch_var;  // biased
};

template <typename T>
BatchNormResult<T> batchnorm_train(const Var<T>& x, const Var<T>& gamma,
                                   const Var<T>& beta, T eps) {
  const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2),
            W = x->value.dim(3);
  const std::int64_t hw = std::int64_t(H) * W;
  const std::int64_t m = std::int64_t(N) * hw;
  const T inv = T(1) / T(m);

  Tensor<T> mu({C}), var({C}), invstd({C});
  for (int c = 0; c < C; ++c) {
    T s = 0;
    for (int n = 0; n < N; ++n) {
      const T* p = x->value.data() + (std::int64_t(n) * C + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) s += p[i];
    }
    mu[c] = s * inv;
  }
  for (int c = 0; c < C; ++c) {
    T s = 0;
    for (int n = 0; n < N; ++n) {
      const T* p = x->value.data() + (std::int64_t(n) * C + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) {
        const T d = p[i] - mu[c];
        s += d * d;
      }
    }
    var[c] = s * inv;
    invstd[c] = T(1) / std::sqrt(var[c] + eps);
  }
  auto xhat = std::make_shared<Tensor<T>>(x->value.shape);
  Tensor<T> out(x->value.shape);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* p = x->value.data() + (std::int64_t(n) * C + c) * hw;
      T* xh = xhat->data() + (std::int64_t(n) * C + c) * hw;
      T* y = out.data() + (std::int64_t(n) * C + c) * hw;
      const T g = gamma->value[c], b = beta->value[c], mc = mu[c],
              is = invstd[c];
      for (std::int64_t i = 0; i < hw; ++i) {
        xh[i] = (p[i] - mc) * is;
        y[i] = g * xh[i] + b;
      }
    }
  auto invstd_keep = std::make_shared<Tensor<T>>(invstd);
  Var<T> out_node = detail::make_node<T>(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat, invstd_keep, N, C, hw, inv](Node<T>& n) {
        for (int c = 0; c < C; ++c) {
          T sum_dy = 0, sum_dy_xhat = 0;
          for (int s = 0; s < N; ++s) {
            const T* gy = n.grad.data() + (std::int64_t(s) * C + c) * hw;
            const T* xh = xhat->data() + (std::int64_t(s) * C + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
              sum_dy += gy[i];
              sum_dy_xhat += gy[i] * xh[i];
            }
          }
          if (beta->requires_grad) beta->ensure_grad()[c] += sum_dy;
          if (gamma->requires_grad) gamma->ensure_grad()[c] += sum_dy_xhat;
          if (x->requires_grad) {
            auto& gx = x->ensure_grad();
            const T g = gamma->value[c], is = (*invstd_keep)[c];
            for (int s = 0; s < N; ++s) {
              const T* gy = n.grad.data() + (std::int64_t(s) * C + c) * hw;
              const T* xh = xhat->data() + (std::int64_t(s) * C + c) * hw;
              T* px = gx.data() + (std::int64_t(s) * C + c) * hw;
              for (std::int64_t i = 0; i < hw; ++i)
                px[i] += g * is *
                         (gy[i] - inv * sum_dy - inv * sum_dy_xhat * xh[i]);
            }
          }
        }
      });
  return {out_node, std::move(mu), std::move(var)};
}

// Inference-mode batch normalization against fixed running statistics.
template <typename T>
Var<T> batchnorm_eval(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                      const Tensor<T>& running_mean,
                      const Tensor<T>& running_var, T eps) {
  const int N = x->value.dim(0), C = x->value.dim(1);
  const std::int64_t hw = std::int64_t(x->value.dim(2)) * x->value.dim(3);
  auto invstd = std::make_shared<std::vector<T>>(C);
  auto rm = std::make_shared<Tensor<T>>(running_mean);
  for (int c = 0; c < C; ++c)
    (*invstd)[c] = T(1) / std::sqrt(running_var[c] + eps);
  Tensor<T> out(x->value.shape);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* p = x->value.data() + (std::int64_t(n) * C + c) * hw;
      T* y = out.data() + (std::int64_t(n) * C + c) * hw;
      const T g = gamma->value[c], b = beta->value[c], mc = (*rm)[c],
              is = (*invstd)[c];
      for (std::int64_t i = 0; i < hw; ++i) y[i] = g * (p[i] - mc) * is + b;
    }
  return detail::make_node<T>(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, invstd, rm, N, C, hw](Node<T>& n) {
        for (int c = 0; c < C; ++c) {
          const T is = (*invstd)[c], g = gamma->value[c], mc = (*rm)[c];
          T sum_dy = 0, sum_dy_xhat = 0;
          for (int s = 0; s < N; ++s) {
            const T* gy = n.grad.data() + (std::int64_t(s) * C + c) * hw;
            const T* xv = x->value.data() + (std::int64_t(s) * C + c) * hw;
            T* px = x->requires_grad
                        ? x->ensure_grad().data() + (std::int64_t(s) * C + c) * hw
                        : nullptr;
            for (std::int64_t i = 0; i < hw; ++i) {
              sum_dy += gy[i];
              sum_dy_xhat += gy[i] * (xv[i] - mc) * is;
              if (px) px[i] += gy[i] * g * is;
            }
          }
          if (beta->requires_grad) beta->ensure_grad()[c] += sum_dy;
          if (gamma->requires_grad) gamma->ensure_grad()[c] += sum_dy_xhat;
        }
      });
}

// ---------------------------------------------------------------------------
// Attention pooling and losses
// ---------------------------------------------------------------------------

// z[n, m*C + c] = mean_{h,w} A[n,m,h,w] * F[n,c,h,w]
template <typename T>
Var<T> attn_pool_raw(const Var<T>& feat, const Var<T>& attn) {
  if (feat->value.rank() != 4 || attn->value.rank() != 4)
    throw DimError("attn_pool_raw expects 4-d feature and attention");
  const int N = feat->value.dim(0), C = feat->value.dim(1),
            H = feat->value.dim(2), W = feat->value.dim(3);
  const int M = attn->value.dim(1);
  if (attn->value.dim(0) != N || attn->value.dim(2) != H ||
      attn->value.dim(3) != W)
    throw DimError("attn_pool_raw: attention " + shape_str(attn->value) +
                   " does not match feature " + shape_str(feat->value));
  const std::int64_t hw = std::int64_t(H) * W;
  const T inv = T(1) / T(hw);
  Tensor<T> out({N, M * C});
  for (int n = 0; n < N; ++n)
    for (int m = 0; m < M; ++m) {
      const T* a = attn->value.data() + (std::int64_t(n) * M + m) * hw;
      for (int c = 0; c < C; ++c) {
        const T* f = feat->value.data() + (std::int64_t(n) * C + c) * hw;
        T s = 0;
        for (std::int64_t i = 0; i < hw; ++i) s += a[i] * f[i];
        out.at2(n, m * C + c) = s * inv;
      }
    }
  return detail::make_node<T>(
      std::move(out), {feat, attn}, [feat, attn, N, C, M, hw, inv](Node<T>& n) {
        for (int s = 0; s < N; ++s)
          for (int m = 0; m < M; ++m) {
            const T* a = attn->value.data() + (std::int64_t(s) * M + m) * hw;
            T* ga = attn->requires_grad
                        ? attn->ensure_grad().data() +
                              (std::int64_t(s) * M + m) * hw
                        : nullptr;
            for (int c = 0; c < C; ++c) {
              const T g = n.grad.at2(s, m * C + c) * inv;
              const T* f = feat->value.data() + (std::int64_t(s) * C + c) * hw;
              if (feat->requires_grad) {
                T* gf =
                    feat->ensure_grad().data() + (std::int64_t(s) * C + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) gf[i] += g * a[i];
              }
              if (ga)
                for (std::int64_t i = 0; i < hw; ++i) ga[i] += g * f[i];
            }
          }
      });
}

// Mean softmax cross-entropy over the batch; labels are class indices.
template <typename T>
Var<T> cross_entropy_mean(const Var<T>& logits, const std::vector<int>& labels) {
  if (logits->value.rank() != 2) throw DimError("cross_entropy expects [N,K]");
  const int N = logits->value.dim(0), K = logits->value.dim(1);
  if (static_cast<int>(labels.size()) != N)
    throw DimError("cross_entropy: label count mismatch");
  for (int y : labels)
    if (y < 0 || y >= K)
      throw IndexError("cross_entropy: class index " + std::to_string(y) +
                       " out of range [0," + std::to_string(K) + ")");
  auto probs = std::make_shared<Tensor<T>>(logits->value.shape);
  T loss = 0;
  for (int n = 0; n < N; ++n) {
    const T* l = logits->value.data() + std::int64_t(n) * K;
    T mx = l[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, l[k]);
    T se = 0;
    for (int k = 0; k < K; ++k) se += std::exp(l[k] - mx);
    const T lse = mx + std::log(se);
    for (int k = 0; k < K; ++k)
      probs->at2(n, k) = std::exp(l[k] - lse);
    loss += lse - l[labels[n]];
  }
  loss /= T(N);
  auto labels_keep = std::make_shared<std::vector<int>>(labels);
  return detail::make_node<T>(
      Tensor<T>::scalar(loss), {logits},
      [logits, probs, labels_keep, N, K](Node<T>& n) {
        auto& gl = logits->ensure_grad();
        const T g = n.grad[0] / T(N);
        for (int s = 0; s < N; ++s)
          for (int k = 0; k < K; ++k)
            gl.at2(s, k) +=
                g * (probs->at2(s, k) - (k == (*labels_keep)[s] ? T(1) : T(0)));
      });
}

// tau^2-scaled KL(teacher || softmax(student / tau)), mean over the batch.
template <typename T>
Var<T> kl_to_teacher_mean(const Var<T>& student_logits,
                          const Tensor<T>& teacher_probs, T tau) {
  if (student_logits->value.rank() != 2)
    throw DimError("kl_to_teacher expects [N,K]");
  const int N = student_logits->value.dim(0), K = student_logits->value.dim(1);
  if (!teacher_probs.same_shape(student_logits->value))
    throw DimError("kl_to_teacher: teacher probs shape mismatch");
  auto q = std::make_shared<Tensor<T>>(student_logits->value.shape);
  auto p = std::make_shared<Tensor<T>>(teacher_probs);
  T loss = 0;
  for (int n = 0; n < N; ++n) {
    const T* l = student_logits->value.data() + std::int64_t(n) * K;
    T mx = l[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, l[k]);
    T se = 0;
    for (int k = 0; k < K; ++k) se += std::exp((l[k] - mx) / tau);
    const T log_se = std::log(se);
    for (int k = 0; k < K; ++k) {
      const T logq = (l[k] - mx) / tau - log_se;
      q->at2(n, k) = std::exp(logq);
      const T pv = p->at2(n, k);
      if (pv > T(0)) loss += pv * (std::log(pv) - logq);
    }
  }
  loss *= tau * tau / T(N);
  return detail::make_node<T>(
      Tensor<T>::scalar(loss), {student_logits},
      [student_logits, q, p, N, K, tau](Node<T>& n) {
        auto& gl = student_logits->ensure_grad();
        const T g = n.grad[0] * tau / T(N);
        for (int s = 0; s < N; ++s)
          for (int k = 0; k < K; ++k)
            gl.at2(s, k) += g * (q->at2(s, k) - p->at2(s, k));
      });
}

// mean over rows of mask[n] * ||z_n - c_n||^2  (denominator is the batch size)
template <typename T>
Var<T> masked_sqdist_mean(const Var<T>& z, const Tensor<T>& centers,
                          const std::vector<char>& mask) {
  if (z->value.rank() != 2 || !centers.same_shape(z->value))
    throw DimError("masked_sqdist_mean: shape mismatch");
  const int N = z->value.dim(0), D = z->value.dim(1);
  if (static_cast<int>(mask.size()) != N)
    throw DimError("masked_sqdist_mean: mask length mismatch");
  T loss = 0;
  for (int n = 0; n < N; ++n) {
    if (!mask[n]) continue;
    const T* a = z->value.data() + std::int64_t(n) * D;
    const T* c = centers.data() + std::int64_t(n) * D;
    for (int j = 0; j < D; ++j) {
      const T d = a[j] - c[j];
      loss += d * d;
    }
  }
  loss /= T(N);
  auto centers_keep = std::make_shared<Tensor<T>>(centers);
  auto mask_keep = std::make_shared<std::vector<char>>(mask);
  return detail::make_node<T>(
      Tensor<T>::scalar(loss), {z},
      [z, centers_keep, mask_keep, N, D](Node<T>& n) {
        auto& gz = z->ensure_grad();
        const T g = n.grad[0] * T(2) / T(N);
        for (int s = 0; s < N; ++s) {
          if (!(*mask_keep)[s]) continue;
          const T* a = z->value.data() + std::int64_t(s) * D;
          const T* c = centers_keep->data() + std::int64_t(s) * D;
          T* p = gz.data() + std::int64_t(s) * D;
          for (int j = 0; j < D; ++j) p[j] += g * (a[j] - c[j]);
        }
      });
}

}  // namespace fd2::ad
