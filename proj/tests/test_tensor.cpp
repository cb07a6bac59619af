#include <gtest/gtest.h>

#include <sstream>

#include "gradcheck.hpp"
#include "vaps/tensor.hpp"

using namespace vaps;
using namespace vaps::testing;
using ad::Tensor;

TEST(Tensor, SoftmaxOfZerosIsUniform) {
  auto s = ad::softmax(Tensor::row({0.0, 0.0}));
  EXPECT_DOUBLE_EQ(s.at(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(s.at(0, 1), 0.5);
}

TEST(Tensor, IdentityMatmul) {
  Rng rng(1);
  auto a = random_const(rng, 3, 4);
  auto eye = Tensor::constant({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto out = ad::matmul(eye, a);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(out.data()[i], a.data()[i]);
}

TEST(Tensor, DotSelfGradient) {
  auto x = Tensor::parameter({1, 2}, {1.0, 2.0});
  ad::backward(ad::dot(x, x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
  auto fd = grad_check([&] { return ad::dot(x, x); }, {x});
  EXPECT_LT(fd.max_rel, 1e-6);
}

TEST(Tensor, ShapeMismatchNamesBothShapes) {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({2, 3});
  try {
    ad::matmul(a, b);
    FAIL();
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
  }
  EXPECT_THROW(ad::add(a, Tensor::zeros({3, 2})), ShapeError);
}

TEST(Tensor, BackwardOfSumIsOnes) {
  auto a = Tensor::parameter({2, 3}, {1, 2, 3, 4, 5, 6});
  ad::backward(ad::sum(a));
  for (double g : a.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Tensor, BackwardTwiceIsAnError) {
  auto a = Tensor::parameter({1, 2}, {1, 2});
  auto loss = ad::sum(ad::tanh(a));
  ad::backward(loss);
  EXPECT_THROW(ad::backward(loss), ShapeError);
}

TEST(Tensor, NonScalarLossIsAnError) { EXPECT_THROW(ad::backward(Tensor::parameter({1, 2}, {1, 2})), ShapeError); }

TEST(Tensor, UntrackedLeafHasNoGradient) {
  auto w = Tensor::parameter({1, 2}, {1, 2});
  auto c = Tensor::constant({1, 2}, {3, 4});
  ad::backward(ad::dot(w, c));
  EXPECT_FALSE(c.has_grad());
  EXPECT_TRUE(w.has_grad());
}

TEST(Tensor, NoGradGuardRecordsNothing) {
  auto w = Tensor::parameter({1, 2}, {1, 2});
  ad::NoGradGuard ng;
  auto y = ad::tanh(w);
  EXPECT_FALSE(y.requires_grad());
}

TEST(TensorProperty, EveryOpPassesFiniteDifferences) {
  for (const auto& op : op_cases()) {
    double worst = 0.0;
    for (std::uint64_t trial = 0; trial < 100; ++trial) {
      Rng rng(mix_seed(trial, fnv1a(op.name)));
      auto [leaves, fn] = op.make(rng);
      worst = std::max(worst, grad_check(fn, leaves).max_rel);
    }
    EXPECT_LT(worst, 1e-3) << op.name;
  }
}

TEST(TensorProperty, TwoLayerCompositionAbsoluteError) {
  Rng rng(11);
  auto x = random_param(rng, 3, 4), w1 = random_param(rng, 4, 5), w2 = random_param(rng, 5, 1);
  auto fn = [&] { return ad::sum(ad::matmul(ad::tanh(ad::matmul(x, w1)), w2)); };
  ad::backward(fn());
  ad::NoGradGuard ng;
  const double h = 1e-5;
  for (auto* t : {&x, &w1, &w2}) {
    auto w = t->mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double o = w[i];
      w[i] = o + h;
      double fp = fn().item();
      w[i] = o - h;
      double fm = fn().item();
      w[i] = o;
      EXPECT_LT(std::abs((fp - fm) / (2 * h) - t->grad()[i]), 1e-4);
    }
  }
}

TEST(TensorProperty, SoftmaxRowsSumToOneAndPermute) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    std::size_t n = 1 + rng.index(8);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-20, 20);
    auto s = ad::softmax(Tensor::row(v));
    double sum = 0;
    for (double x : s.data()) sum += x;
    EXPECT_NEAR(sum, 1.0, 1e-9);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    std::vector<double> pv(n);
    for (std::size_t i = 0; i < n; ++i) pv[i] = v[perm[i]];
    auto ps = ad::softmax(Tensor::row(pv));
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(ps.data()[i], s.data()[perm[i]], 1e-15);
  }
}

TEST(Tensor, ForwardIsBitIdentical) {
  auto run = [] {
    Rng rng(4);
    auto a = random_param(rng, 5, 6), b = random_param(rng, 6, 3);
    auto out = ad::softmax(ad::matmul(a, b));
    return std::vector<double>(out.data().begin(), out.data().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  auto w = Tensor::parameter({1, 3}, {0.5, -1.0, 2.0});
  ad::backward(ad::scale(ad::sum(w), 0.0));
  std::vector<Tensor> ps{w};
  ad::AdamState st;
  ad::adam_step(ps, st);
  EXPECT_EQ(std::vector<double>(w.data().begin(), w.data().end()), (std::vector<double>{0.5, -1.0, 2.0}));
}

TEST(Adam, FirstStepIsLrTimesSign) {
  auto w = Tensor::parameter({1, 2}, {0.0, 0.0});
  auto g = Tensor::constant({1, 2}, {0.3, -2.0});
  ad::backward(ad::dot(w, g));
  std::vector<Tensor> ps{w};
  ad::AdamState st;
  ad::adam_step(ps, st);
  // m_hat = g, v_hat = g^2 after bias correction: step = lr g / (|g| + eps).
  EXPECT_NEAR(w.data()[0], -1e-3 * 0.3 / (0.3 + 1e-8), 1e-15);
  EXPECT_NEAR(w.data()[1], 1e-3 * 2.0 / (2.0 + 1e-8), 1e-15);
}

TEST(Adam, ConstantGradientStepTendsToLr) {
  auto w = Tensor::parameter({1, 1}, {0.0});
  std::vector<Tensor> ps{w};
  ad::AdamState st;
  double before = 0.0, step = 0.0;
  for (int i = 0; i < 2000; ++i) {
    w.zero_grad();
    ad::backward(ad::scale(ad::sum(w), 0.7));
    before = w.data()[0];
    ad::adam_step(ps, st);
    step = before - w.data()[0];
  }
  EXPECT_NEAR(step, st.lr, 0.01 * st.lr);
}

TEST(Checkpoint, RoundTripAndErrors) {
  Rng rng(8);
  ad::NamedTensors a{{"w", random_param(rng, 2, 3)}, {"b", random_param(rng, 1, 3)}};
  std::stringstream ss;
  ad::save_checkpoint(ss, a);
  ad::NamedTensors b{{"w", Tensor::zeros({2, 3}, true)}, {"b", Tensor::zeros({1, 3}, true)}};
  ad::load_checkpoint(ss, b);
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(std::vector<double>(a[k].second.data().begin(), a[k].second.data().end()),
              std::vector<double>(b[k].second.data().begin(), b[k].second.data().end()));
  }
  std::stringstream bad("NOTACKPT....");
  EXPECT_THROW(ad::load_checkpoint(bad, b), DataError);
  std::stringstream again;
  ad::save_checkpoint(again, a);
  ad::NamedTensors wrong{{"w", Tensor::zeros({3, 2}, true)}, {"b", Tensor::zeros({1, 3}, true)}};
  EXPECT_THROW(ad::load_checkpoint(again, wrong), DataError);
}
