#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "realtalk/acceptance.hpp"
#include "realtalk/pipeline.hpp"

using namespace realtalk;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorCode::io;
}

}  // namespace

TEST(Config, StrictMergeRejectsUnknownKeysAndWrongTypes) {
  json cfg = pipeline::default_config();
  EXPECT_EQ(code_of([&] { pipeline::merge_strict(cfg, {{"delat", 0.2}}); }), ErrorCode::config);
  EXPECT_EQ(code_of([&] { pipeline::merge_strict(cfg, {{"ldm", {{"train", {{"stpes", 3}}}}}}); }), ErrorCode::config);
  EXPECT_EQ(code_of([&] { pipeline::merge_strict(cfg, {{"resolution", "64"}}); }), ErrorCode::config);
  EXPECT_EQ(code_of([&] { pipeline::merge_strict(cfg, {{"resolution", 64.5}}); }), ErrorCode::config);
  pipeline::merge_strict(cfg, {{"delta", 1}, {"resolution", 32.0}});
  EXPECT_EQ(cfg["delta"], 1);
  EXPECT_EQ(cfg["resolution"], 32.0);
}

TEST(Config, SetOverridesParseJsonThenFallBackToString) {
  json cfg = pipeline::default_config();
  pipeline::apply_set(cfg, "ldm.train.steps=12");
  pipeline::apply_set(cfg, "infer.emotion=sad");
  pipeline::apply_set(cfg, "delta_sweep=[0, 0.5]");
  EXPECT_EQ(cfg["ldm"]["train"]["steps"], 12);
  EXPECT_EQ(cfg["infer"]["emotion"], "sad");
  EXPECT_EQ(cfg["delta_sweep"].size(), 2u);
  EXPECT_EQ(code_of([&] { pipeline::apply_set(cfg, "ldm.train.nope=1"); }), ErrorCode::config);
  EXPECT_EQ(code_of([&] { pipeline::apply_set(cfg, "no_equals_sign"); }), ErrorCode::config);
  EXPECT_EQ(code_of([&] { pipeline::apply_set(cfg, "vae.model.latent=\"four\""); }), ErrorCode::config);
}

TEST(Config, SeedOverrideAppliesToEverySeed) {
  const auto cfg = pipeline::parse_config(pipeline::load_config(std::nullopt, {"seeds.vae=9"}, 42));
  EXPECT_EQ(cfg.seeds.data, 42u);
  EXPECT_EQ(cfg.seeds.vae, 42u);
  EXPECT_EQ(cfg.seeds.infer, 42u);
  EXPECT_EQ(cfg.vae_train.seed, 42u);
  EXPECT_EQ(cfg.nerf_train.seed, 42u);

  ::setenv("REALTALK_SEED", "7", 1);
  EXPECT_EQ(pipeline::seed_from_env(), 7u);
  ::setenv("REALTALK_SEED", "seven", 1);
  EXPECT_EQ(code_of([] { pipeline::seed_from_env(); }), ErrorCode::config);
  ::unsetenv("REALTALK_SEED");
  EXPECT_FALSE(pipeline::seed_from_env().has_value());
}

TEST(Config, SemanticValidation) {
  auto with = [](const std::string& set) {
    return [set] { pipeline::parse_config(pipeline::load_config(std::nullopt, {set}, std::nullopt)); };
  };
  EXPECT_EQ(code_of(with("delta=-0.1")), ErrorCode::config);
  EXPECT_EQ(code_of(with("resolution=48")), ErrorCode::config);
  EXPECT_EQ(code_of(with("infer.emotion=elated")), ErrorCode::unknown_emotion);
  EXPECT_EQ(code_of(with("nerf.perceptual=vgg")), ErrorCode::config);
  EXPECT_EQ(code_of(with("nerf.model.lambda_lpips=-1")), ErrorCode::config);
  EXPECT_EQ(code_of(with("synth.emotions=[]")), ErrorCode::config);
  EXPECT_EQ(code_of([] { pipeline::load_config(fs::path("/no/such/config.json"), {}, std::nullopt); }),
            ErrorCode::missing_file);
}

TEST(Config, ShippedFileMatchesDefaults) {
  const fs::path shipped = REALTALK_DEFAULT_CONFIG;
  ASSERT_TRUE(fs::exists(shipped));
  const json file = io::read_json(shipped);
  EXPECT_EQ(pipeline::load_config(shipped, {}, std::nullopt), pipeline::default_config());
  EXPECT_EQ(file["delta"], 0.15);
  EXPECT_EQ(file["delta_sweep"], json({0.0, 0.15, 0.2, 0.3, 0.4, 0.5, 1.0}));
}

TEST(AblationTable, LabelsFullSettingAndHasOneRowPerDelta) {
  pipeline::AblationReport r;
  for (double d : {0.0, 0.15, 1.0}) r.rows.push_back({d, 0.5, 20.0, 0.1, 0.2, std::nullopt, 0.0});
  const auto table = pipeline::format_ablation_table(r);
  EXPECT_NE(table.find("0.15 [full]"), std::string::npos);
  EXPECT_EQ(table.find("1 [full]"), std::string::npos);
  EXPECT_NE(table.find("SSIM"), std::string::npos);
  EXPECT_NE(table.find("M-LMD"), std::string::npos);
  // header + rows + footnote
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 5);
}

TEST(Hash, Fnv1aKnownValues) {
  EXPECT_EQ(pipeline::fnv1a_hex(""), "cbf29ce484222325");
  EXPECT_EQ(pipeline::fnv1a_hex("a"), "af63dc4c8601ec8c");
}

// Small dataset and checkpoints trained once for the stage tests.
class PipelineRun : public ::testing::Test {
 protected:
  static fs::path root;
  static json raw;

  static void SetUpTestSuite() {
    root = fs::temp_directory_path() / "realtalk_pipeline_test";
    fs::remove_all(root);
    raw = acceptance::detail::toy_pipeline_config(root);
    raw["vae"]["train"]["steps"] = 10;
    raw["ldm"]["train"]["steps"] = 60;
    raw["nerf"]["train"]["coarse_steps"] = 10;
    raw["nerf"]["train"]["fine_steps"] = 2;
    raw["nerf"]["train"]["eval_every"] = 12;
    raw["synth"]["frames"] = 16;
    std::ostringstream log;
    auto cfg = pipeline::parse_config(raw);
    pipeline::synth_data(cfg, log);
    pipeline::train_vae_stage(cfg, log);
    pipeline::train_ldm_stage(cfg, log);
    pipeline::train_nerf_stage(cfg, log);
  }
  static void TearDownTestSuite() { fs::remove_all(root); }

  static pipeline::PipelineConfig config(const std::vector<std::string>& sets = {}) {
    json r = raw;
    for (const auto& s : sets) pipeline::apply_set(r, s);
    return pipeline::parse_config(r);
  }
};

fs::path PipelineRun::root;
json PipelineRun::raw;

TEST_F(PipelineRun, DatasetHoldsParallelSentences) {
  auto ds = io::load_dataset(root / "data");
  ASSERT_EQ(ds.size(), 6u);
  EXPECT_EQ(ds.manifest().clips[0].path, "s00_neutral");
  EXPECT_EQ(ds.manifest().clips[4].path, "s01_happy");
  const auto neutral = ds.load_clip(0), happy = ds.load_clip(1), other = ds.load_clip(3);
  EXPECT_EQ(neutral.content, happy.content);
  EXPECT_NE(neutral.content, other.content);
  EXPECT_NE(neutral.landmarks, happy.landmarks);
  EXPECT_EQ(pipeline::dataset_ldm_pairs(ds).size(), 6u);
}

TEST_F(PipelineRun, StagesWriteCheckpointsAndCurves) {
  for (const char* stage : {"vae", "ldm", "nerf"}) {
    EXPECT_TRUE(fs::exists(root / "checkpoints" / stage / "index.json")) << stage;
    EXPECT_TRUE(fs::exists(root / "checkpoints" / stage / "curve.csv")) << stage;
    const auto ck = io::load_checkpoint(root / "checkpoints" / stage);
    EXPECT_EQ(ck.config["landmark_dim"], kLandmarkDim);
    EXPECT_EQ(ck.config["dataset"], pipeline::dataset_hash(config()));
  }
}

TEST_F(PipelineRun, InferIsDeterministicAndDeltaZeroIsIdentity) {
  auto a = pipeline::infer(config({"infer.output=\"" + (root / "a").string() + "\""}), std::cerr);
  pipeline::infer(config({"infer.output=\"" + (root / "b").string() + "\""}), std::cerr);
  ASSERT_EQ(a.frames.size(), 16u);
  EXPECT_EQ(a.frames[0].width, 32);
  for (const char* f : {"neutral_landmarks.csv", "emotional_landmarks.csv", "manifest.json", "frames/00015.png"})
    EXPECT_EQ(io::read_bytes(root / "a" / f), io::read_bytes(root / "b" / f)) << f;
  EXPECT_NE(a.emotional, a.neutral);

  pipeline::infer(config({"delta=0", "infer.output=\"" + (root / "z").string() + "\""}), std::cerr);
  EXPECT_EQ(io::read_bytes(root / "z" / "neutral_landmarks.csv"), io::read_bytes(root / "z" / "emotional_landmarks.csv"));

  const auto manifest = io::read_json(root / "a" / "manifest.json");
  EXPECT_EQ(manifest["emotion"], "happy");
  EXPECT_EQ(manifest["frame_pattern"], "frames/%05d.png");
}

TEST_F(PipelineRun, InferFromFeatureFiles) {
  const fs::path clip_dir = root / "data" / "s01_sad";
  auto r = pipeline::infer(config({"infer.audio=\"" + (clip_dir / "audio_features.bin").string() + "\"",
                                   "infer.output=\"" + (root / "files").string() + "\""}),
                           std::cerr);
  auto same = pipeline::infer(config({"infer.clip=5", "infer.output=\"" + (root / "clip5").string() + "\""}), std::cerr);
  EXPECT_EQ(r.neutral, same.neutral);
}

TEST_F(PipelineRun, DistinctErrors) {
  std::ostringstream log;
  EXPECT_EQ(code_of([&] { pipeline::infer(config({"infer.pose_clip=40"}), log); }), ErrorCode::missing_file);
  EXPECT_EQ(code_of([&] { pipeline::infer(config({"infer.audio=\"/no/such/audio.bin\""}), log); }),
            ErrorCode::missing_file);
  EXPECT_EQ(code_of([&] { pipeline::ablate_delta(config(), {}, log); }), ErrorCode::invalid_argument);

  // A checkpoint trained on a different dataset is refused.
  const fs::path other = root / "other_ckpt";
  fs::remove_all(other);
  fs::copy(root / "checkpoints", other, fs::copy_options::recursive);
  auto ck = io::load_checkpoint(other / "ldm");
  ck.config["dataset"] = "0000000000000000";
  io::save_checkpoint(ck, other / "ldm");
  EXPECT_EQ(code_of([&] { pipeline::infer(config({"paths.checkpoints=\"" + other.string() + "\""}), log); }),
            ErrorCode::incompatible_checkpoint);
  EXPECT_EQ(code_of([&] { pipeline::infer(config({"paths.checkpoints=\"" + (root / "none").string() + "\""}), log); }),
            ErrorCode::missing_file);
}

TEST_F(PipelineRun, AblationRowsFollowDeltaList) {
  std::ostringstream log;
  auto r = pipeline::ablate_delta(config(), {0.0, 0.15, 1.0}, log);
  ASSERT_EQ(r.rows.size(), 3u);
  EXPECT_EQ(r.rows[0].emotional_vs_neutral, 0.0);
  EXPECT_GT(r.rows[2].emotional_vs_neutral, r.rows[1].emotional_vs_neutral);
  EXPECT_NE(r.rows[0].m_lmd, r.rows[2].m_lmd);
  EXPECT_EQ(r.perceptual_name, "random_conv");
  EXPECT_TRUE(r.rows[0].perceptual.has_value());
  const auto j = io::read_json(root / "output" / "ablation" / "ablation.json");
  EXPECT_EQ(j["rows"].size(), 3u);
  EXPECT_EQ(j["rows"][1]["label"], "0.15 [full]");
  EXPECT_NE(log.str().find("0.15 [full]"), std::string::npos);
}

TEST_F(PipelineRun, EvalWritesReportAndMergesExternalScorer) {
  const fs::path scorer = root / "scorer.sh";
  io::write_text(scorer, "#!/bin/sh\necho '{\"emotion_accuracy\": 0.75}'\n");
  fs::permissions(scorer, fs::perms::owner_all);
  std::ostringstream log;
  auto r = pipeline::evaluate(config({"eval.external_scorer=\"" + scorer.string() + "\""}), log);
  EXPECT_EQ(r.psnr.size(), 16u);
  EXPECT_EQ(r.extra.at("emotion_accuracy"), 0.75);
  EXPECT_TRUE(r.extra.count("perceptual_random_conv"));
  const auto j = io::read_json(root / "output" / "eval" / "metrics.json");
  EXPECT_EQ(j["aggregate"]["emotion_accuracy"], 0.75);
  EXPECT_TRUE(fs::exists(root / "output" / "eval" / "metrics.csv"));

  io::write_text(scorer, "#!/bin/sh\necho not json\n");
  EXPECT_EQ(code_of([&] { pipeline::evaluate(config({"eval.external_scorer=\"" + scorer.string() + "\""}), log); }),
            ErrorCode::io);
}
