#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "realtalk/data_io.hpp"

using namespace realtalk;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("realtalk_io_" + name);
  fs::remove_all(p);
  return p;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::invalid_argument;
}

}  // namespace

TEST(DataIo, DatasetRoundTrip) {
  SyntheticFaceGenerator gen;
  auto clip = gen.generate_clip(1, Emotion::happy, 6, 32);
  auto root = scratch("roundtrip");
  io::write_dataset(root, {clip});
  auto ds = io::load_dataset(root);
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds.manifest().clips[0].emotion, Emotion::happy);
  auto back = ds.load_clip(0);
  EXPECT_EQ(back.landmarks.rows(), 6);
  for (ad::Index i = 0; i < clip.landmarks.size(); ++i) {
    const double a = clip.landmarks.data()[i], b = back.landmarks.data()[i];
    EXPECT_LE(std::abs(a - b), 1e-6 * std::max(1.0, std::abs(a)));
  }
  EXPECT_EQ(back.content, clip.content);
  EXPECT_EQ(back.pitch, clip.pitch);
  EXPECT_EQ(back.blendshapes, clip.blendshapes);
  ASSERT_EQ(back.poses.size(), clip.poses.size());
  EXPECT_LT((back.poses[3].rotation - clip.poses[3].rotation).norm(), 1e-12);
  for (std::size_t t = 0; t < clip.frames.size(); ++t) EXPECT_EQ(back.frames[t], quantize_8bit(clip.frames[t]));
}

TEST(DataIo, MissingFrameFile) {
  SyntheticFaceGenerator gen;
  auto root = scratch("missing");
  io::write_dataset(root, {gen.generate_clip(1, Emotion::sad, 4, 32)});
  fs::remove(io::frame_path(root / "clip_000", 2));
  EXPECT_EQ(code_of([&] { io::load_dataset(root); }), ErrorCode::missing_file);
}

TEST(DataIo, LandmarkColumnMismatch) {
  SyntheticFaceGenerator gen;
  auto root = scratch("columns");
  auto clip = gen.generate_clip(1, Emotion::sad, 4, 32);
  io::write_dataset(root, {clip});
  io::write_csv(root / "clip_000" / "landmarks.csv", clip.landmarks.leftCols(203));
  try {
    io::load_dataset(root);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::shape_mismatch);
    EXPECT_NE(std::string(e.what()).find("clip_000"), std::string::npos);
  }
}

TEST(DataIo, UnknownSchemaVersion) {
  SyntheticFaceGenerator gen;
  auto root = scratch("schema");
  io::write_dataset(root, {gen.generate_clip(1, Emotion::sad, 2, 32)});
  auto j = io::read_json(root / "manifest.json");
  j["schema_version"] = 7;
  io::write_text(root / "manifest.json", j.dump());
  EXPECT_EQ(code_of([&] { io::load_dataset(root); }), ErrorCode::schema_version);
}

TEST(DataIo, RtafLayout) {
  auto root = scratch("rtaf");
  fs::create_directories(root);
  ad::Matrix<double> m(2, 3);
  m << 1, 2, 3, 4, 5, 6.5;
  io::write_rtaf(root / "a.bin", m);
  auto bytes = io::read_bytes(root / "a.bin");
  ASSERT_EQ(bytes.size(), 12u + 24u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "RTAF");
  EXPECT_EQ(io::get_u32(bytes.data() + 4), 2u);
  EXPECT_EQ(io::get_u32(bytes.data() + 8), 3u);
  EXPECT_EQ(io::read_rtaf(root / "a.bin"), m);
  fs::resize_file(root / "a.bin", 30);
  EXPECT_EQ(code_of([&] { io::read_rtaf(root / "a.bin"); }), ErrorCode::truncated_payload);
}

TEST(DataIo, CheckpointBitExactRoundTrip) {
  std::mt19937_64 rng(3);
  ParameterStore<float> store;
  store.add("a", uniform<float>(3, 4, -1, 1, rng));
  store.add("b.bias", uniform<float>(1, 7, -1e-30, 1e30, rng));
  store.add("stat", uniform<float>(1, 2, 0, 1, rng), false);
  store.set_step(42);
  auto dir = scratch("ckpt");
  io::save_checkpoint(io::to_checkpoint(store, {{"kind", "test"}}), dir);
  auto ck = io::load_checkpoint(dir);
  EXPECT_EQ(ck.step, 42u);
  EXPECT_EQ(ck.config["kind"], "test");
  ParameterStore<float> other;
  other.add("a", Matrix<float>::Zero(3, 4));
  other.add("b.bias", Matrix<float>::Zero(1, 7));
  other.add("stat", Matrix<float>::Zero(1, 2), false);
  io::restore_store(other, ck);
  for (const auto& e : store.entries()) EXPECT_EQ(other.value(e.name), e.var.value()) << e.name;
}

TEST(DataIo, CheckpointTruncatedAndVersion) {
  ParameterStore<float> store;
  store.add("a", Matrix<float>::Ones(2, 2));
  auto dir = scratch("ckpt_trunc");
  io::save_checkpoint(io::to_checkpoint(store, {}), dir);
  fs::resize_file(dir / "tensors.bin", fs::file_size(dir / "tensors.bin") - 4);
  EXPECT_EQ(code_of([&] { io::load_checkpoint(dir); }), ErrorCode::truncated_payload);
  io::save_checkpoint(io::to_checkpoint(store, {}), dir);
  auto j = io::read_json(dir / "index.json");
  j["format_version"] = 99;
  io::write_text(dir / "index.json", j.dump());
  EXPECT_EQ(code_of([&] { io::load_checkpoint(dir); }), ErrorCode::version_mismatch);
}

TEST(DataIo, DuplicateTensorRejectedAtSave) {
  io::Checkpoint ck;
  ck.tensors.push_back({"x", {1}, {1.0f}});
  ck.tensors.push_back({"x", {1}, {2.0f}});
  EXPECT_EQ(code_of([&] { io::save_checkpoint(ck, scratch("dup")); }), ErrorCode::duplicate_name);
}

TEST(DataIo, PoseValidation) {
  HeadPose p;
  EXPECT_NO_THROW(p.validate());
  p.rotation(0, 1) = 0.1;
  EXPECT_THROW(p.validate(), Error);
}
