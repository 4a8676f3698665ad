#include <gtest/gtest.h>

#include <random>

#include "realtalk/training.hpp"

using namespace realtalk;
using ad::Matrix;
using ad::Var;

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  std::mt19937_64 rng(1);
  ParameterStore<float> s;
  auto w = s.add("w", uniform<float>(3, 3, -1, 1, rng));
  Matrix<float> before = w.value();
  Adam<float> opt;
  for (int i = 0; i < 10; ++i) {
    w.node()->grad_buffer().setZero();
    opt.step(s);
  }
  EXPECT_EQ(w.value(), before);
}

TEST(Adam, MovesAgainstGradientSign) {
  ParameterStore<double> s;
  auto w = s.add("w", Matrix<double>::Constant(1, 1, 0.5));
  Adam<double> opt;
  for (int i = 0; i < 100; ++i) {
    w.node()->grad_buffer()(0, 0) = 2.0;
    opt.step(s);
  }
  EXPECT_LT(w.item(), 0.5);
  for (int i = 0; i < 300; ++i) {
    w.node()->grad_buffer()(0, 0) = -3.0;
    opt.step(s);
  }
  EXPECT_GT(w.item(), 0.5 - 100 * 5e-4);
}

TEST(Adam, ConvergesOnQuadraticBowl) {
  std::mt19937_64 rng(2);
  ParameterStore<double> s;
  auto w = s.add("w", uniform<double>(1, 8, -1, 1, rng));
  Adam<double> opt(AdamConfig{.lr = 1e-2});
  for (int i = 0; i < 2000; ++i) {
    ad::backward(ad::sum(ad::square(w)));
    opt.step(s);
  }
  EXPECT_LT(w.value().norm(), 1e-3);
  EXPECT_EQ(s.step(), 2000u);
}

TEST(Adam, ZeroLearningRateIsIdentity) {
  std::mt19937_64 rng(3);
  ParameterStore<float> s;
  auto w = s.add("w", uniform<float>(4, 2, -1, 1, rng));
  Matrix<float> before = w.value();
  Adam<float> opt(AdamConfig{.lr = 0.0});
  for (int i = 0; i < 5; ++i) {
    ad::backward(ad::sum(ad::exp(w)));
    opt.step(s);
  }
  EXPECT_EQ(w.value(), before);
}

TEST(Adam, MissingGradientRejected) {
  ParameterStore<float> s;
  s.add("a", Matrix<float>::Ones(1, 1));
  s.add("b", Matrix<float>::Ones(1, 1));
  ad::backward(ad::sum(s.get("a")));
  Adam<float> opt;
  try {
    opt.step(s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::missing_gradient);
  }
}

TEST(Adam, InvariantUnderRegistrationOrder) {
  std::mt19937_64 rng(4);
  Matrix<double> a0 = uniform<double>(2, 3, -1, 1, rng), b0 = uniform<double>(3, 1, -1, 1, rng);
  auto run = [&](bool swap) {
    ParameterStore<double> s;
    if (swap) {
      s.add("b", b0);
      s.add("a", a0);
    } else {
      s.add("a", a0);
      s.add("b", b0);
    }
    Adam<double> opt;
    for (int i = 0; i < 20; ++i) {
      ad::backward(ad::sum(ad::square(ad::matmul(s.get("a"), s.get("b")))));
      opt.step(s);
    }
    return std::make_pair(s.value("a"), s.value("b"));
  };
  auto x = run(false), y = run(true);
  EXPECT_EQ(x.first, y.first);
  EXPECT_EQ(x.second, y.second);
}

TEST(GradCheck, LinearLayerSquaredNorm) {
  std::mt19937_64 rng(5);
  ParameterStore<double> s;
  auto w = s.add("w", uniform<double>(6, 20, -1, 1, rng));
  auto x = ad::constant<double>(uniform<double>(20, 1, -1, 1, rng));
  std::function<Var<double>()> loss = [&] { return ad::sum(ad::square(ad::matmul(w, x))); };
  auto report = grad_check(s, loss);
  EXPECT_GE(report.checked, 100u);
  EXPECT_LT(report.max_rel_error, 1e-5);
  // The analytic gradient 2 W x x^T matches the tape.
  s.zero_grad();
  ad::backward(loss());
  Matrix<double> expected = 2.0 * w.value() * x.value() * x.value().transpose();
  EXPECT_LT((w.grad() - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(GradCheck, RejectsNonDeterministicForward) {
  ParameterStore<double> s;
  auto w = s.add("w", Matrix<double>::Ones(2, 2));
  int calls = 0;
  std::function<Var<double>()> loss = [&] { return ad::scale(ad::sum(w), static_cast<double>(++calls)); };
  try {
    grad_check(s, loss);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::non_deterministic);
  }
}

TEST(GradCheck, DetectsWrongGradient) {
  ParameterStore<double> s;
  auto w = s.add("w", Matrix<double>::Constant(1, 3, 0.3));
  // An op with a deliberately wrong backward.
  std::function<Var<double>()> loss = [&] {
    Matrix<double> v = w.value().array().square();
    auto y = ad::make_op<double>(v, {w}, [](ad::Node<double>& self) {
      self.parents[0]->grad_buffer() += self.grad * 3.0;
    });
    return ad::sum(y);
  };
  EXPECT_GT(grad_check(s, loss).max_rel_error, 0.1);
}

TEST(ParameterStore, DuplicateNameRejected) {
  ParameterStore<float> s;
  s.add("x", Matrix<float>::Zero(1, 1));
  EXPECT_THROW(s.add("x", Matrix<float>::Zero(1, 1)), Error);
}
