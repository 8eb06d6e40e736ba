// Finite-difference checks of every tape primitive, plus core utilities.

#include <gtest/gtest.h>

#include "fd2/autodiff.hpp"
#include "fd2/core.hpp"
#include "test_util.hpp"

using namespace fd2;

TEST(Core, FnvKnownVectors) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ull);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cull);
  EXPECT_EQ(to_hex(fnv1a64("")), "cbf29ce484222325");
}

TEST(Core, RngDeterministicAndForkIndependent) {
  Rng a(123), b(123);
  for (int i = 0; i < 16; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng c(123);
  Rng f1 = c.fork(1), f2 = c.fork(2);
  EXPECT_NE(f1.next_u64(), f2.next_u64());
  for (int i = 0; i < 1000; ++i) {
    const double u = Rng(7).fork(i).uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
  }
}

TEST(Core, TensorShapeChecks) {
  Tensor<double> t({2, 3});
  EXPECT_EQ(t.numel(), 6);
  EXPECT_THROW(t.reshaped({4}), DimError);
  EXPECT_THROW(Tensor<double>({2}, {1.0, 2.0, 3.0}), DimError);
}

namespace {

// scalar readout: dot with a fixed random projection
ad::Var<double> project(const ad::Var<double>& x, Rng& rng) {
  Tensor<double> w(x->value.shape);
  for (auto& v : w.v) v = rng.normal(0.0, 1.0);
  return ad::sum(ad::mul(x, ad::constant(std::move(w))));
}

}  // namespace

TEST(Autodiff, ElementwiseOps) {
  Rng rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    auto a0 = test::random_tensor({3, 4}, rng);
    auto b0 = test::random_tensor({3, 4}, rng);
    for (auto& v : b0.v) v += (v >= 0 ? 1.5 : -1.5);  // keep divisors away from 0
    Rng prng = rng.fork(trial);
    test::check_gradient(
        [&](const ad::Var<double>& x) {
          Rng r = prng;
          auto b = ad::constant(b0);
          auto y = ad::add(ad::mul(x, b), ad::scale(ad::sub(x, b), 0.7));
          y = ad::div(y, b);
          y = ad::add_const(y, 0.3);
          return project(y, r);
        },
        a0);
  }
}

TEST(Autodiff, ReluSignedSqrtNormalize) {
  Rng rng(2);
  for (int trial = 0; trial < 8; ++trial) {
    auto a0 = test::random_tensor({2, 5}, rng);
    for (auto& v : a0.v)
      if (std::abs(v) < 0.05) v += 0.2;  // stay away from kinks
    Rng prng = rng.fork(trial);
    test::check_gradient(
        [&](const ad::Var<double>& x) {
          Rng r = prng;
          return project(ad::l2_normalize_rows(ad::signed_sqrt(ad::relu(x))),
                         r);
        },
        a0, 1e-7, 2e-4);
  }
}

TEST(Autodiff, VecNormSubgradientZeroAtOrigin) {
  auto x = ad::leaf(Tensor<double>::zeros({4}));
  auto n = ad::vec_norm(x);
  ad::backward(n);
  EXPECT_EQ(n->value[0], 0.0);
  if (x->has_grad())
    for (auto g : x->grad.v) EXPECT_EQ(g, 0.0);
}

TEST(Autodiff, LinearAndMatvec) {
  Rng rng(3);
  auto x0 = test::random_tensor({4, 6}, rng);
  auto w0 = test::random_tensor({3, 6}, rng);
  auto b0 = test::random_tensor({3}, rng);
  Rng prng = rng.fork(11);
  test::check_gradient(
      [&](const ad::Var<double>& x) {
        Rng r = prng;
        return project(ad::linear(x, ad::constant(w0), ad::constant(b0)), r);
      },
      x0);
  test::check_gradient(
      [&](const ad::Var<double>& w) {
        Rng r = prng;
        return project(ad::linear(ad::constant(x0), w, ad::constant(b0)), r);
      },
      w0);
  test::check_gradient(
      [&](const ad::Var<double>& b) {
        Rng r = prng;
        return project(ad::linear(ad::constant(x0), ad::constant(w0), b), r);
      },
      b0);
}

TEST(Autodiff, Conv2dGradients) {
  Rng rng(4);
  auto x0 = test::random_tensor({2, 3, 5, 5}, rng);
  auto w0 = test::random_tensor({4, 3, 3, 3}, rng, 0.5);
  auto b0 = test::random_tensor({4}, rng);
  Rng prng = rng.fork(21);
  test::check_gradient(
      [&](const ad::Var<double>& x) {
        Rng r = prng;
        return project(ad::conv2d(x, ad::constant(w0), ad::constant(b0), 1), r);
      },
      x0);
  test::check_gradient(
      [&](const ad::Var<double>& w) {
        Rng r = prng;
        return project(ad::conv2d(ad::constant(x0), w, ad::constant(b0), 1), r);
      },
      w0);
  // 1x1 kernel, no padding (the attention predictor shape)
  auto w1 = test::random_tensor({2, 3, 1, 1}, rng);
  test::check_gradient(
      [&](const ad::Var<double>& x) {
        Rng r = prng;
        return project(ad::conv2d(x, ad::constant(w1), ad::Var<double>(), 0), r);
      },
      x0);
}

TEST(Autodiff, PoolingGradients) {
  Rng rng(5);
  auto x0 = test::random_tensor({2, 3, 6, 6}, rng);
  Rng prng = rng.fork(31);
  test::check_gradient(
      [&](const ad::Var<double>& x) {
        Rng r = prng;
        return project(ad::maxpool2(x), r);
      },
      x0, 1e-6, 2e-4);
  test::check_gradient(
      [&](const ad::Var<double>& x) {
        Rng r = prng;
        return project(ad::global_avg_pool(x), r);
      },
      x0);
}

TEST(Autodiff, BatchNormTrainEvalAndMoments) {
  Rng rng(6);
  auto x0 = test::random_tensor({3, 4, 3, 3}, rng);
  auto g0 = test::random_tensor({4}, rng, 0.5);
  for (auto& v : g0.v) v += 1.0;
  auto be0 = test::random_tensor({4}, rng, 0.3);
  Rng prng = rng.fork(41);

  test::check_gradient(
      [&](const ad::Var<double>& x) {
        Rng r = prng;
        auto res =
            ad::batchnorm_train(x, ad::constant(g0), ad::constant(be0), 1e-5);
        return project(res.out, r);
      },
      x0, 1e-6, 3e-4);

  Tensor<double> rm = test::random_tensor({4}, rng, 0.2);
  Tensor<double> rv = Tensor<double>::full({4}, 1.3);
  test::check_gradient(
      [&](const ad::Var<double>& x) {
        Rng r = prng;
        return project(
            ad::batchnorm_eval(x, ad::constant(g0), ad::constant(be0), rm, rv, 1e-5),
            r);
      },
      x0);

  test::check_gradient(
      [&](const ad::Var<double>& x) {
        Rng r = prng;
        auto [m, v] = ad::channel_moments(x);
        return ad::add(project(m, r), project(v, r));
      },
      x0, 1e-6, 3e-4);
}

TEST(Autodiff, AttentionPoolRawGradients) {
  Rng rng(7);
  auto f0 = test::random_tensor({1, 3, 4, 4}, rng);
  auto a0 = test::random_tensor({1, 2, 4, 4}, rng);
  for (auto& v : a0.v) v = std::abs(v);
  Rng prng = rng.fork(51);
  test::check_gradient(
      [&](const ad::Var<double>& f) {
        Rng r = prng;
        return project(ad::attn_pool_raw(f, ad::constant(a0)), r);
      },
      f0);
  test::check_gradient(
      [&](const ad::Var<double>& a) {
        Rng r = prng;
        return project(ad::attn_pool_raw(ad::constant(f0), a), r);
      },
      a0);
}

TEST(Autodiff, CrossEntropyAndKl) {
  Rng rng(8);
  auto l0 = test::random_tensor({3, 5}, rng);
  const std::vector<int> labels = {0, 3, 2};
  test::check_gradient(
      [&](const ad::Var<double>& l) {
        return ad::cross_entropy_mean(l, labels);
      },
      l0);

  Tensor<double> probs({3, 5});
  for (int n = 0; n < 3; ++n) {
    double s = 0;
    for (int k = 0; k < 5; ++k) {
      probs.at2(n, k) = std::abs(rng.normal(0, 1)) + 0.05;
      s += probs.at2(n, k);
    }
    for (int k = 0; k < 5; ++k) probs.at2(n, k) /= s;
  }
  test::check_gradient(
      [&](const ad::Var<double>& l) {
        return ad::kl_to_teacher_mean(l, probs, 4.0);
      },
      l0);

  // one-hot teacher at tau=1 degenerates to cross-entropy
  Tensor<double> onehot({3, 5});
  for (int n = 0; n < 3; ++n) onehot.at2(n, labels[n]) = 1.0;
  const double kl = ad::kl_to_teacher_mean(ad::constant(l0), onehot, 1.0)->value[0];
  const double ce = ad::cross_entropy_mean(ad::constant(l0), labels)->value[0];
  EXPECT_NEAR(kl, ce, 1e-12);
}

TEST(Autodiff, MaskedSqdistMean) {
  Rng rng(9);
  auto z0 = test::random_tensor({4, 3}, rng);
  auto c0 = test::random_tensor({4, 3}, rng);
  const std::vector<char> mask = {1, 0, 1, 1};
  test::check_gradient(
      [&](const ad::Var<double>& z) {
        return ad::masked_sqdist_mean(z, c0, mask);
      },
      z0);
}

TEST(Autodiff, BackwardRequiresScalarRoot) {
  auto x = ad::leaf(Tensor<double>::zeros({2, 2}));
  auto y = ad::relu(x);
  EXPECT_THROW(ad::backward(y), DimError);
}

TEST(Autodiff, ConstantGraphSkipsBackwardState) {
  auto x = ad::constant(Tensor<double>::full({2, 2}, 1.0));
  auto y = ad::relu(x);
  EXPECT_FALSE(y->requires_grad);
  EXPECT_TRUE(y->parents.empty());
}

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  return RUN_ALL_TESTS();
}
