#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "realtalk/ldm.hpp"

using namespace realtalk;
using M = ad::Matrix<double>;

namespace {

LdmConfig small_config() {
  LdmConfig c;
  c.hidden = 16;
  c.heads = 4;
  c.ffn = 24;
  c.window = 4;
  return c;
}

M randn(int r, int c, std::mt19937_64& rng, double s = 1.0) {
  std::normal_distribution<double> n(0.0, s);
  M m(r, c);
  for (int i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

}  // namespace

TEST(LdmEmbedding, ShapeAndUnknownCode) {
  LdmModel<double> model(LdmConfig{}, 1);
  auto e = model.embed_emotion({to_code(Emotion::happy)});
  EXPECT_EQ(e.rows(), 1);
  EXPECT_EQ(e.cols(), 16);
  EXPECT_EQ(kLandmarkDim + e.cols(), 220);
  EXPECT_THROW(model.embed_emotion({8}), Error);
  EXPECT_THROW(model.embed_emotion({-1}), Error);
}

TEST(LdmForward, EvalDeterministicAndAttentionRowsSumToOne) {
  std::mt19937_64 rng(2);
  LdmModel<double> model(small_config(), 3, false);
  M l = randn(10, 204, rng);
  std::vector<int> labels(10, 4);
  auto windows = split_windows(10, 4);
  ASSERT_EQ(windows, (std::vector<int>{4, 4, 2}));
  auto a = model.forward(ad::constant<double>(l), labels, windows, LdmMode::eval);
  auto b = model.forward(ad::constant<double>(l), labels, windows, LdmMode::eval);
  EXPECT_EQ(a.delta.value(), b.delta.value());
  ASSERT_EQ(a.attention.size(), 4u);
  for (const auto& p : a.attention) {
    EXPECT_GE(p.minCoeff(), 0.0);
    for (int r = 0; r < p.rows(); ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-6);
    // No attention across windows.
    EXPECT_EQ(p(0, 4), 0.0);
    EXPECT_EQ(p(9, 3), 0.0);
  }
}

TEST(LdmForward, TrainModeReproducibleWithSeed) {
  std::mt19937_64 data(4);
  M l = randn(8, 204, data);
  std::vector<int> labels(8, 1);
  LdmModel<double> m1(small_config(), 5, false), m2(small_config(), 5, false);
  std::mt19937_64 r1(6), r2(6);
  auto a = m1.forward(ad::constant<double>(l), labels, {4, 4}, LdmMode::train, &r1);
  auto b = m2.forward(ad::constant<double>(l), labels, {4, 4}, LdmMode::train, &r2);
  EXPECT_EQ(a.delta.value(), b.delta.value());
}

TEST(LdmForward, ZeroOutputLayerGivesZeroDisplacement) {
  std::mt19937_64 rng(7);
  LdmModel<double> model(small_config(), 8, true);
  auto out = model.forward(ad::constant<double>(randn(6, 204, rng)), std::vector<int>(6, 2), {4, 2}, LdmMode::eval);
  EXPECT_EQ(out.delta.value().cwiseAbs().maxCoeff(), 0.0);
}

TEST(LdmForward, RejectsBadShapes) {
  LdmModel<double> model(small_config(), 9);
  EXPECT_THROW(model.forward(ad::constant<double>(M::Zero(4, 203)), std::vector<int>(4, 0), {4}, LdmMode::eval), Error);
  EXPECT_THROW(model.forward(ad::constant<double>(M::Zero(4, 204)), std::vector<int>(3, 0), {4}, LdmMode::eval), Error);
  EXPECT_THROW(model.forward(ad::constant<double>(M::Zero(4, 204)), std::vector<int>(4, 0), {3}, LdmMode::eval), Error);
}

TEST(Deformation, IdentityAndLinearity) {
  std::mt19937_64 rng(10);
  M l = randn(3, 204, rng), d = randn(3, 204, rng);
  EXPECT_EQ(apply_deformation(l, d, 0.0), l);
  for (double delta : {0.15, 0.2, 0.5}) {
    const double n1 = (apply_deformation(l, d, delta) - l).norm();
    const double n2 = (apply_deformation(l, d, 2 * delta) - l).norm();
    EXPECT_NEAR(n2, 2 * n1, 1e-12 * n2);
  }
  EXPECT_EQ(kDefaultDelta, 0.15);
  EXPECT_THROW(apply_deformation(l, M(M::Zero(2, 204)), 0.1), Error);
  EXPECT_THROW(apply_deformation(l, d, -0.1), Error);
}

TEST(LdmLoss, Examples) {
  std::mt19937_64 rng(11);
  M a = randn(5, 204, rng), b = randn(5, 204, rng);
  EXPECT_EQ(ldm_loss<double>(ad::constant<double>(a), ad::constant<double>(a)).item(), 0.0);
  EXPECT_NEAR(ldm_loss<double>(ad::constant<double>(M(a.array() + 1.0)), ad::constant<double>(a)).item(), 1.0, 1e-12);
  double acc = 0;
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) acc += (a(i, j) - b(i, j)) * (a(i, j) - b(i, j));
  EXPECT_NEAR(ldm_loss<double>(ad::constant<double>(a), ad::constant<double>(b)).item(), acc / a.size(), 1e-12);
}

TEST(LdmGradCheck, DoublePrecision) {
  std::mt19937_64 rng(12);
  LdmModel<double> model(small_config(), 13, false);
  M l = randn(8, 204, rng, 0.5), target = randn(8, 204, rng, 0.5);
  std::vector<int> labels{0, 0, 0, 0, 6, 6, 6, 6};
  auto loss = [&]() {
    auto out = model.forward(ad::constant<double>(l), labels, {4, 4}, LdmMode::frozen_stats_no_dropout);
    return ldm_loss<double>(ad::add<double>(ad::constant<double>(l), out.delta), ad::constant<double>(target));
  };
  GradCheckOptions opt;
  opt.min_coordinates = 300;
  auto report = grad_check<double>(model.store(), loss, opt);
  EXPECT_TRUE(report.passed(1e-4)) << report.max_rel_error << " at " << report.worst_coordinate;
}

TEST(LdmGradCheck, SinglePrecisionAgainstDoubleOracle) {
  std::mt19937_64 rng(14);
  LdmModel<float> model(small_config(), 15, false);
  LdmModel<double> oracle(small_config(), 15, false);
  oracle.store().copy_values_from(model.store());
  M l = randn(8, 204, rng, 0.5), target = randn(8, 204, rng, 0.5);
  std::vector<int> labels{1, 1, 1, 1, 3, 3, 3, 3};
  auto loss_f = [&]() {
    auto lf = ad::constant<float>(l.cast<float>());
    auto out = model.forward(lf, labels, {4, 4}, LdmMode::frozen_stats_no_dropout);
    return ldm_loss<float>(ad::add<float>(lf, out.delta), ad::constant<float>(target.cast<float>()));
  };
  auto loss_d = [&]() {
    auto ld = ad::constant<double>(l);
    auto out = oracle.forward(ld, labels, {4, 4}, LdmMode::frozen_stats_no_dropout);
    return ldm_loss<double>(ad::add<double>(ld, out.delta), ad::constant<double>(target));
  };
  GradCheckOptions opt;
  opt.min_coordinates = 300;
  // Biases feeding batch norm have a true gradient of 0; below this floor
  // float accumulation noise is all that is left to compare.
  opt.abs_floor = 1e-5;
  auto report = grad_check<float, double>(model.store(), loss_f, oracle.store(), loss_d, opt);
  EXPECT_TRUE(report.passed(1e-3)) << report.max_rel_error << " at " << report.worst_coordinate;
}

TEST(LdmTrain, LearnsFieldsOnSmallModel) {
  SyntheticFaceGenerator gen(SynthConfig{});
  auto train = make_ldm_pairs(gen, 2, 16, 0.001, 1);
  auto held = make_ldm_pairs(gen, 1, 16, 0.0, 2);
  LdmConfig cfg = small_config();
  cfg.hidden = 32;
  cfg.ffn = 64;
  LdmModel<float> model(cfg, 16);
  LdmTrainConfig tc;
  tc.steps = 400;
  tc.lr = 2e-3;
  auto r = train_ldm(model, train, tc);
  EXPECT_FALSE(r.diverged);
  auto ev = evaluate_ldm(model, gen, held);
  EXPECT_LT(ev.mean_error, 0.5 * ev.mean_oracle_norm);
  auto e0 = model.embed_emotion({0}).value();
  auto e1 = model.embed_emotion({1}).value();
  EXPECT_GT((e0 - e1).norm(), 0.0);
}

TEST(LdmCheckpoint, RoundTrip) {
  std::mt19937_64 rng(17);
  LdmModel<float> model(small_config(), 18, false);
  auto ckpt = ldm_checkpoint(model);
  auto restored = ldm_from_checkpoint<float>(ckpt);
  M l = randn(5, 204, rng);
  EXPECT_EQ(deform_sequence(model, l, Emotion::sad, 0.15), deform_sequence(restored, l, Emotion::sad, 0.15));
  ckpt.config["kind"] = "vae";
  EXPECT_THROW(ldm_from_checkpoint<float>(ckpt), Error);
}
