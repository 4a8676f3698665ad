#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "realtalk/a2m_vae.hpp"

using namespace realtalk;
using M = ad::Matrix<double>;

namespace {

VaeConfig small_config() {
  VaeConfig c;
  c.latent = 4;
  c.width = 12;
  c.dilations = {1, 2};
  c.coupling_hidden = 6;
  c.sync_hidden = 8;
  c.sync_embed = 6;
  c.audio.channels = 6;
  return c;
}

template <class T>
ad::Matrix<T> randn(int r, int c, std::mt19937_64& rng, double s = 1.0) {
  std::normal_distribution<double> n(0.0, s);
  ad::Matrix<T> m(r, c);
  for (int i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(n(rng));
  return m;
}

// Moves every flow parameter off its identity initialization.
template <class T>
void perturb_flow(VaeModel<T>& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& e : model.store().entries()) {
    if (e.name.rfind("flow", 0) != 0) continue;
    auto& v = e.var.node()->value;
    // Moderate scale: |u| stays O(10) for unit-normal z.
    const double s = e.name.find(".mix") != std::string::npos ? 0.1 / std::sqrt(double(v.cols())) : 0.1;
    v += randn<T>(static_cast<int>(v.rows()), static_cast<int>(v.cols()), rng, s);
  }
}

SyntheticClip toy_clip(std::uint64_t seed, int frames) {
  SyntheticFaceGenerator gen(SynthConfig{});
  return gen.generate_clip(seed, Emotion::neutral, frames, 32);
}

}  // namespace

TEST(VaeEncode, SigmaPositiveAndSingleFrame) {
  std::mt19937_64 rng(1);
  VaeModel<double> model(small_config(), 3);
  for (int t_len : {1, 9}) {
    auto cond = model.condition(ad::constant<double>(randn<double>(t_len, 16, rng)),
                                ad::constant<double>(randn<double>(t_len, 4, rng)), ad::BatchNormMode::eval);
    auto post = model.encode(ad::constant<double>(randn<double>(t_len, 204, rng)), cond);
    EXPECT_EQ(post.mu.rows(), t_len);
    EXPECT_EQ(post.mu.cols(), 4);
    EXPECT_GT(post.sigma.value().minCoeff(), 0.0);
  }
  auto cond = ad::constant<double>(randn<double>(5, 12, rng));
  EXPECT_THROW(model.encode(ad::constant<double>(randn<double>(4, 204, rng)), cond), Error);
}

TEST(VaeEncode, ShiftEquivariantAwayFromBoundaries) {
  std::mt19937_64 rng(2);
  VaeModel<double> model(small_config(), 4);
  const int t_len = 40, s = 2;
  M l = randn<double>(t_len, 204, rng);
  M c = randn<double>(t_len, 12, rng);
  M ls = M::Zero(t_len, 204), cs = M::Zero(t_len, 12);
  ls.bottomRows(t_len - s) = l.topRows(t_len - s);
  cs.bottomRows(t_len - s) = c.topRows(t_len - s);
  auto a = model.encode(ad::constant<double>(l), ad::constant<double>(c));
  auto b = model.encode(ad::constant<double>(ls), ad::constant<double>(cs));
  // Receptive radius: input conv 1 + dilations 1 + 2.
  const int radius = 4;
  for (int t = s + radius; t < t_len - radius; ++t) {
    EXPECT_LT((b.mu.value().row(t) - a.mu.value().row(t - s)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((b.sigma.value().row(t) - a.sigma.value().row(t - s)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(VaeDecode, DeterministicNonDegenerateLengthPreserving) {
  std::mt19937_64 rng(5);
  VaeModel<double> model(small_config(), 6);
  auto cond = ad::constant<double>(randn<double>(5, 12, rng));
  auto z1 = ad::constant<double>(randn<double>(5, 4, rng));
  auto z2 = ad::constant<double>(randn<double>(5, 4, rng));
  auto a = model.decode(z1, cond).value();
  EXPECT_EQ(a.rows(), 5);
  EXPECT_EQ(a.cols(), 204);
  EXPECT_EQ(a, model.decode(z1, cond).value());
  EXPECT_GT((a - model.decode(z2, cond).value()).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_THROW(model.decode(ad::constant<double>(randn<double>(4, 4, rng)), cond), Error);
}

TEST(Flow, IdentityAtInitialization) {
  std::mt19937_64 rng(7);
  VaeModel<double> model(VaeConfig{}, 8);
  M z = randn<double>(10, 16, rng);
  auto f = model.flow_forward(ad::constant<double>(z));
  EXPECT_LT((f.u.value() - z).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT(f.log_det.value().cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Flow, RoundTripSinglePrecision) {
  std::mt19937_64 rng(9);
  VaeModel<float> model(VaeConfig{}, 10);
  perturb_flow(model, 11);
  auto z = randn<float>(1000, 16, rng);
  auto u = model.flow_forward(ad::constant<float>(z)).u.value();
  EXPECT_GT((u - z).cwiseAbs().maxCoeff(), 1e-2f);
  auto back = model.flow_inverse(u);
  EXPECT_LT((back - z).cwiseAbs().maxCoeff(), 1e-5f);
}

TEST(Flow, LogDetMatchesDenseJacobian) {
  std::mt19937_64 rng(12);
  for (int z_dim : {4, 5, 6}) {
    VaeConfig cfg = small_config();
    cfg.latent = z_dim;
    VaeModel<double> model(cfg, 13);
    perturb_flow(model, 14);
    for (int trial = 0; trial < 5; ++trial) {
      M z = randn<double>(1, z_dim, rng);
      const double ld = model.flow_forward(ad::constant<double>(z)).log_det.item();
      M jac(z_dim, z_dim);
      const double h = 1e-5;
      for (int j = 0; j < z_dim; ++j) {
        M zp = z, zm = z;
        zp(0, j) += h;
        zm(0, j) -= h;
        auto up = model.flow_forward(ad::constant<double>(zp)).u.value();
        auto um = model.flow_forward(ad::constant<double>(zm)).u.value();
        jac.col(j) = ((up - um) / (2 * h)).transpose();
      }
      EXPECT_NEAR(ld, std::log(std::abs(jac.determinant())), 1e-4) << "Z=" << z_dim;
    }
  }
}

TEST(Flow, NonFiniteStepIsReported) {
  VaeModel<double> model(small_config(), 15);
  model.store().value("flow1.actnorm.log_scale").setConstant(800.0);
  try {
    model.flow_forward(ad::constant<double>(M::Ones(2, 4)));
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::non_finite);
    EXPECT_NE(std::string(e.what()).find("flow step 1"), std::string::npos);
  }
}

TEST(SyncScore, CosineExamples) {
  M a(3, 4);
  a << 1, 2, 3, 4, 1, 0, 0, 0, -1, 2, 0.5, 3;
  M b(3, 4);
  b << 1, 2, 3, 4, 0, 1, 0, 0, -10, 20, 5, 30;
  auto s = cosine_rows<double>(ad::constant<double>(a), ad::constant<double>(b)).value();
  EXPECT_NEAR(s(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(s(1, 0), 0.0, 1e-12);
  EXPECT_NEAR(s(2, 0), 1.0, 1e-12);

  std::mt19937_64 rng(16);
  M x = randn<double>(50, 8, rng), y = randn<double>(50, 8, rng);
  auto s1 = cosine_rows<double>(ad::constant<double>(x), ad::constant<double>(y)).value();
  auto s2 = cosine_rows<double>(ad::constant<double>(M(10.0 * x)), ad::constant<double>(y)).value();
  EXPECT_LT((s1 - s2).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE(s1.maxCoeff(), 1.0);
  EXPECT_GE(s1.minCoeff(), -1.0);

  M zero = M::Zero(1, 4);
  try {
    cosine_rows<double>(ad::constant<double>(zero), ad::constant<double>(M::Ones(1, 4)));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::degenerate);
  }
}

TEST(SyncScore, WindowsMustSpanWs) {
  VaeModel<double> model(small_config(), 17);
  EXPECT_THROW(model.sync_score(ad::constant<double>(M::Ones(2, 4 * 20)), ad::constant<double>(M::Ones(2, 5 * 204))),
               Error);
  auto s = model.sync_score(ad::constant<double>(M::Ones(2, 5 * 20)), ad::constant<double>(M::Ones(2, 5 * 204)));
  EXPECT_EQ(s.rows(), 2);
}

TEST(SyncLoss, Examples) {
  auto s_half = ad::constant<double>(M::Zero(1, 1));  // p = 0.5
  EXPECT_NEAR(sync_loss<double>(s_half, 1).item(), std::log(2.0), 1e-12);
  auto s_one = ad::constant<double>(M::Ones(1, 1));  // p -> 1
  EXPECT_NEAR(sync_loss<double>(s_one, 1).item(), 0.0, 1e-6);
  const double big = sync_loss<double>(s_one, 0).item();
  EXPECT_TRUE(std::isfinite(big));
  EXPECT_NEAR(big, -std::log(1e-7), 1e-6);
  EXPECT_THROW(sync_loss<double>(s_half, 2), Error);
}

TEST(Kl, ClosedFormAndMonteCarlo) {
  EXPECT_NEAR(kl_standard_normal({0, 0, 0, 0}, {1, 1, 1, 1}), 0.0, 1e-7);
  std::mt19937_64 rng(18);
  std::uniform_real_distribution<double> mu(-1.5, 1.5), sg(0.3, 2.0);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> m(4), s(4);
    for (int j = 0; j < 4; ++j) {
      m[static_cast<std::size_t>(j)] = mu(rng);
      s[static_cast<std::size_t>(j)] = sg(rng);
    }
    const double exact = kl_standard_normal(m, s);
    const double mc = monte_carlo_kl_standard_normal(m, s, 100000, 100 + static_cast<std::uint64_t>(trial));
    EXPECT_LT(std::abs(mc - exact), 0.02 * exact) << exact << " vs " << mc;
  }
}

TEST(VaeLoss, MatchedDistributionsGiveZeroTerms) {
  std::mt19937_64 rng(19);
  VaeModel<double> model(small_config(), 20);
  M eps = randn<double>(64, 4, rng);
  auto log_sigma = ad::constant<double>(M::Zero(64, 4));
  auto z = ad::constant<double>(eps);  // mu = 0, sigma = 1
  auto log_q = posterior_log_prob<double>(eps, log_sigma);
  auto log_p = model.prior_log_prob(z);
  auto l = ad::constant<double>(randn<double>(64, 204, rng));
  auto terms = vae_loss<double>(l, l, log_q, log_p, std::nullopt);
  EXPECT_EQ(terms.recon, 0.0);
  EXPECT_NEAR(terms.kl, 0.0, 1e-12);

  auto sync = sync_loss<double>(ad::constant<double>(M::Constant(3, 1, 0.3)), 1);
  auto l2 = ad::constant<double>(randn<double>(64, 204, rng));
  auto t2 = vae_loss<double>(l, l2, log_q, log_p, sync);
  EXPECT_NEAR(t2.recon + t2.kl + t2.sync, t2.total.item(), 1e-6);
}

TEST(VaeLoss, NonFiniteTermIsNamed) {
  auto l = ad::constant<double>(M::Zero(2, 204));
  M bad = M::Zero(2, 204);
  bad(1, 3) = std::numeric_limits<double>::infinity();
  auto lq = ad::constant<double>(M::Zero(2, 1));
  try {
    vae_loss<double>(l, ad::constant<double>(bad), lq, lq, std::nullopt);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("recon"), std::string::npos);
  }
}

TEST(VaeGradCheck, EncoderDecoderFlowAndScorerDouble) {
  auto clip = toy_clip(21, 16);
  VaeModel<double> model(small_config(), 22);
  model.fit_normalization({&clip});
  perturb_flow(model, 23);
  std::mt19937_64 rng(24);
  M eps = randn<double>(16, 4, rng);
  auto batch = detail::make_sync_batch(16, 5, rng);
  // The generated-landmark sync term reads the scorer as constants, so the
  // scorer is checked against its own loss only.
  GradCheckOptions opt;
  opt.min_coordinates = 300;
  opt.include = [](const std::string& n) { return n.rfind("sync.", 0) != 0; };
  auto vae_only = [&]() {
    return detail::vae_objective(model, clip.landmarks, clip.content, clip.pitch, eps, batch,
                                 ad::BatchNormMode::batch_frozen)
        .terms.total;
  };
  auto report = grad_check<double>(model.store(), vae_only, opt);
  EXPECT_TRUE(report.passed(1e-4)) << report.max_rel_error << " at " << report.worst_coordinate;
  EXPECT_GE(report.checked, 100u);

  opt.include = [](const std::string& n) { return n.rfind("sync.", 0) == 0; };
  auto scorer_only = [&]() {
    return detail::vae_objective(model, clip.landmarks, clip.content, clip.pitch, eps, batch,
                                 ad::BatchNormMode::batch_frozen)
        .scorer;
  };
  report = grad_check<double>(model.store(), scorer_only, opt);
  EXPECT_TRUE(report.passed(1e-4)) << report.max_rel_error << " at " << report.worst_coordinate;
  EXPECT_GE(report.checked, 100u);
}

TEST(VaeGradCheck, FlowPriorDouble) {
  std::mt19937_64 rng(25);
  VaeModel<double> model(small_config(), 26);
  perturb_flow(model, 27);
  M z = randn<double>(8, 4, rng);
  auto loss = [&]() { return ad::sum<double>(model.prior_log_prob(ad::constant<double>(z))); };
  auto report = grad_check<double>(model.store(), loss);
  EXPECT_TRUE(report.passed(1e-4)) << report.max_rel_error << " at " << report.worst_coordinate;
}

TEST(VaeTrain, ZeroLearningRateGivesConstantCurve) {
  auto clip = toy_clip(28, 24);
  VaeModel<float> model(small_config(), 29);
  VaeTrainConfig tc;
  tc.steps = 6;
  tc.lr = 0;
  tc.log_every = 2;
  auto r = train_vae(model, {&clip}, tc);
  ASSERT_EQ(r.curve.size(), 4u);
  for (const auto& p : r.curve) {
    EXPECT_EQ(p.total, r.curve.front().total);
    EXPECT_EQ(p.recon, r.curve.front().recon);
    EXPECT_EQ(p.sync, r.curve.front().sync);
  }
}

TEST(VaeTrain, ShuffledPairingHasWorseSyncTerm) {
  auto clip = toy_clip(30, 64);
  VaeTrainConfig tc;
  tc.steps = 300;
  tc.log_every = 100;
  VaeModel<float> aligned(small_config(), 31);
  auto ra = train_vae(aligned, {&clip}, tc);
  tc.shuffle_pairing = true;
  VaeModel<float> shuffled(small_config(), 31);
  auto rs = train_vae(shuffled, {&clip}, tc);
  EXPECT_FALSE(ra.diverged);
  EXPECT_FALSE(rs.diverged);
  EXPECT_LT(ra.curve.back().sync, rs.curve.back().sync);
}

TEST(VaeInfer, DeterministicShapeAndCheckpointRoundTrip) {
  auto clip = toy_clip(32, 20);
  VaeModel<float> model(small_config(), 33);
  VaeTrainConfig tc;
  tc.steps = 3;
  train_vae(model, {&clip}, tc);
  auto a = infer_motion(model, clip.content, clip.pitch, 5);
  EXPECT_EQ(a.rows(), 20);
  EXPECT_EQ(a.cols(), 204);
  EXPECT_EQ(a, infer_motion(model, clip.content, clip.pitch, 5));

  auto dir = std::filesystem::temp_directory_path() / "realtalk_vae_ckpt";
  std::filesystem::remove_all(dir);
  io::save_checkpoint(vae_checkpoint(model), dir);
  auto loaded = vae_from_checkpoint<float>(io::load_checkpoint(dir));
  EXPECT_EQ(a, infer_motion(loaded, clip.content, clip.pitch, 5));

  auto ckpt = io::load_checkpoint(dir);
  ckpt.config["model"]["latent"] = 8;
  EXPECT_THROW(vae_from_checkpoint<float>(ckpt), Error);
  EXPECT_THROW(infer_motion(model, M::Zero(4, 15), M::Zero(4, 4), 1), Error);
  std::filesystem::remove_all(dir);
}
