#include <gtest/gtest.h>

#include <cmath>

#include "omnimol/errors.hpp"
#include "omnimol/gal.hpp"
#include "support/oracles.hpp"

using namespace omnimol;

TEST(Gal, InitialState) {
  Rng rng(1);
  GalAdapter g(16, 8, 4, rng);
  EXPECT_EQ(g.a().shape(), (Shape{4, 16}));
  EXPECT_EQ(g.b().shape(), (Shape{8, 4}));
  for (double v : g.b().data()) EXPECT_EQ(v, 0.0);
  for (double v : g.a().data()) EXPECT_LE(std::abs(v), 0.25);
  EXPECT_NEAR(g.scaling_value(), 16.0 / 2.0, 1e-12);
  EXPECT_THROW(GalAdapter(16, 8, 9, rng), UsageError);
  EXPECT_THROW(GalAdapter(16, 8, 0, rng), UsageError);
}

TEST(Gal, ScalingFactorMatchesClosedForm) {
  Rng rng(2);
  for (std::size_t r : {1u, 2u, 8u, 16u}) {
    GalAdapter g(16, 16, r, rng);
    g.alpha().mutable_data()[0] = 15.97;
    g.p().mutable_data()[0] = 0.503;
    g.beta().mutable_data()[0] = -0.02;
    const double want = 15.97 / std::pow(static_cast<double>(r), 0.503) - 0.02;
    EXPECT_NEAR(g.scaling_factor().item(), want, 1e-12);
    EXPECT_NEAR(g.scaling_value(), want, 1e-12);
  }
}

TEST(Gal, ForwardMatchesExplicitProduct) {
  Rng rng(3);
  GalAdapter g(5, 4, 2, rng);
  for (auto& v : g.b().mutable_data()) v = rng.uniform(-1, 1);
  auto x = Tensor::uniform({3, 5}, -1, 1, rng);
  auto w0x = Tensor::uniform({3, 4}, -1, 1, rng);
  const auto y = g.forward(x, w0x);
  const double gamma = g.scaling_value();
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t o = 0; o < 4; ++o) {
      double acc = 0;
      for (std::size_t k = 0; k < 2; ++k) {
        double ax = 0;
        for (std::size_t c = 0; c < 5; ++c) ax += g.a().data()[k * 5 + c] * x.data()[i * 5 + c];
        acc += g.b().data()[o * 2 + k] * ax;
      }
      EXPECT_NEAR(y.data()[i * 4 + o], w0x.data()[i * 4 + o] + gamma * acc, 1e-12);
    }
  }
  EXPECT_THROW(g.forward(Tensor::zeros({3, 4}), w0x), DimensionError);
}

TEST(Gal, GradientsOfAllAdapterParameters) {
  Rng rng(4);
  GalAdapter g(6, 5, 3, rng);
  for (auto& v : g.b().mutable_data()) v = rng.uniform(-0.5, 0.5);
  auto x = Tensor::uniform({4, 6}, -1, 1, rng, true);
  auto w0x = Tensor::uniform({4, 5}, -1, 1, rng);
  std::vector<double> w(20);
  for (auto& v : w) v = rng.uniform(-1, 1);
  auto f = [&] { return sum(mul(g.forward(x, w0x), Tensor::from_data({4, 5}, w))); };
  backward(f());
  for (Tensor t : {g.a(), g.b(), g.alpha(), g.p(), g.beta(), x}) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    const auto numeric = oracle::numeric_grad(t, [&] {
      NoGradGuard ng;
      return f().item();
    });
    EXPECT_LT(oracle::rel_err(numeric, analytic), 1e-7);
  }
}

TEST(Gal, ClipProjectsIntoBoxesIdempotently) {
  Rng rng(5);
  GalAdapter g(8, 8, 8, rng);
  g.alpha().mutable_data()[0] = 100;
  g.p().mutable_data()[0] = -3;
  g.beta().mutable_data()[0] = 0.01;
  g.clip();
  EXPECT_DOUBLE_EQ(g.alpha().item(), 16.05);
  EXPECT_DOUBLE_EQ(g.p().item(), 0.49);
  EXPECT_DOUBLE_EQ(g.beta().item(), 0.01);
  g.clip();
  EXPECT_DOUBLE_EQ(g.alpha().item(), 16.05);
  EXPECT_DOUBLE_EQ(g.p().item(), 0.49);
}

TEST(Gal, IdentityShortcutOnlyWhenNothingCanChange) {
  Rng rng(6);
  GalAdapter g(4, 4, 2, rng);
  auto x = Tensor::uniform({2, 4}, -1, 1, rng);
  auto w0x = Tensor::uniform({2, 4}, -1, 1, rng);
  EXPECT_FALSE(g.is_identity());
  g.set_trainable(false);
  EXPECT_TRUE(g.is_identity());
  EXPECT_TRUE(g.forward(x, w0x).same_node(w0x));
  g.b().mutable_data()[0] = 1e-3;
  EXPECT_FALSE(g.is_identity());
  g.b().mutable_data()[0] = 0;
  g.set_trainable(true);
  NoGradGuard ng;
  EXPECT_TRUE(g.is_identity());
}
