#include <gtest/gtest.h>

#include "realtalk/synth_data.hpp"

using namespace realtalk;

namespace {
const SyntheticFaceGenerator& gen() {
  static SyntheticFaceGenerator g;
  return g;
}
}  // namespace

TEST(SynthData, CanonicalFaceShape) {
  const auto& face = gen().canonical();
  EXPECT_EQ(face.points.rows(), 68);
  EXPECT_EQ(face.flattened().size(), 204);
  ASSERT_FALSE(face.mouth.empty());
  for (int i : face.mouth) {
    EXPECT_GE(i, 0);
    EXPECT_LT(i, 68);
  }
}

TEST(SynthData, NeutralClipHasNoEmotionDisplacement) {
  auto clip = gen().generate_clip(1, Emotion::neutral, 10, 32);
  const auto canon = gen().canonical().flattened();
  for (int t = 0; t < 10; ++t) {
    ad::Matrix<double> residual = clip.landmarks.row(t) - canon - clip.mouth_motion.row(t);
    EXPECT_EQ(residual.cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(SynthData, DeterministicForFixedSeed) {
  auto a = gen().generate_clip(1, Emotion::happy, 10, 32);
  auto b = gen().generate_clip(1, Emotion::happy, 10, 32);
  EXPECT_EQ(a.landmarks, b.landmarks);
  EXPECT_EQ(a.content, b.content);
  EXPECT_EQ(a.blendshapes, b.blendshapes);
  ASSERT_EQ(a.frames.size(), b.frames.size());
  for (std::size_t i = 0; i < a.frames.size(); ++i) EXPECT_EQ(a.frames[i], b.frames[i]);
  auto c = gen().generate_clip(2, Emotion::happy, 10, 32);
  EXPECT_NE(a.content, c.content);
}

TEST(SynthData, LandmarksDecomposeExactly) {
  for (int code = 0; code < kNumEmotions; ++code) {
    const Emotion e = emotion_from_code(code);
    auto clip = gen().generate_clip(3, e, 12, 32);
    const auto canon = gen().canonical().flattened();
    const auto& field = gen().oracle_displacement(e);
    for (int t = 0; t < clip.length(); ++t) {
      // landmarks[t] - canonical - mouth_motion(audio[t]) == field, element-wise exactly
      ad::Matrix<double> recomputed = gen().mouth_motion(clip.content.row(t));
      ad::Matrix<double> residual = clip.landmarks.row(t) - canon - recomputed;
      EXPECT_EQ(residual, field) << to_string(e) << " frame " << t;
    }
  }
}

TEST(SynthData, NonMouthPointsCarryOnlyEmotion) {
  auto clip = gen().generate_clip(1, Emotion::happy, 10, 32);
  const auto canon = gen().canonical().flattened();
  const auto& field = gen().oracle_displacement(Emotion::happy);
  for (int t = 0; t < 10; ++t)
    for (int i = 0; i < kMouthBegin; ++i)
      for (int c = 0; c < 3; ++c) EXPECT_EQ(clip.landmarks(t, 3 * i + c) - canon(0, 3 * i + c), field(0, 3 * i + c));
}

TEST(SynthData, MouthMovesWithAudio) {
  auto clip = gen().generate_clip(4, Emotion::neutral, 40, 32);
  double spread = 0;
  for (int i = kMouthBegin; i < 68; ++i) {
    auto col = clip.landmarks.col(3 * i + 1);
    spread = std::max(spread, col.maxCoeff() - col.minCoeff());
  }
  EXPECT_GT(spread, 0.01);
}

TEST(SynthData, OracleFieldsSeparatedAndBounded) {
  const auto& cfg = gen().config();
  EXPECT_EQ(gen().oracle_displacement(Emotion::neutral).norm(), 0.0);
  for (int a = 0; a < kNumEmotions; ++a) {
    const auto& fa = gen().oracle_displacement(emotion_from_code(a));
    EXPECT_LE(fa.norm(), cfg.field_max_norm);
    for (int b = a + 1; b < kNumEmotions; ++b) {
      if (emotion_from_code(a) == Emotion::neutral || emotion_from_code(b) == Emotion::neutral) continue;
      EXPECT_GE((fa - gen().oracle_displacement(emotion_from_code(b))).norm(), cfg.field_separation);
    }
  }
  EXPECT_GT((gen().oracle_displacement(Emotion::happy) - gen().oracle_displacement(Emotion::sad)).norm(),
            cfg.field_separation);
}

TEST(SynthData, RejectsBadArguments) {
  EXPECT_THROW(gen().generate_clip(1, Emotion::happy, 0, 32), Error);
  EXPECT_THROW(gen().generate_clip(1, Emotion::happy, 5, 48), Error);
  try {
    parse_emotion("joyful");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::unknown_emotion);
    EXPECT_NE(std::string(e.what()).find("surprise"), std::string::npos);
  }
  EXPECT_THROW(gen().oracle_displacement(static_cast<Emotion>(9)), Error);
}

TEST(SynthData, RasterIsDeterministicAndShowsFace) {
  auto clip = gen().generate_clip(5, Emotion::happy, 2, 64);
  const auto& f = clip.frames[0];
  EXPECT_EQ(f.width, 64);
  auto again = rasterize_landmarks(clip.landmarks.row(0), clip.poses[0], clip.intrinsics, gen().config());
  EXPECT_EQ(f, again);
  int lit = 0;
  for (std::size_t p = 0; p < f.pixels(); ++p)
    if (f.rgb[p * 3] > 0.3f) ++lit;
  EXPECT_GT(lit, 100);
  for (float v : f.rgb) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}
