#pragma once

// Dataset directories and checkpoints.
//
// Dataset layout (one subdirectory per clip, listed in manifest.json):
//   manifest.json
//   <clip>/frames/%05d.png
//   <clip>/landmarks.csv          T rows x 204 columns
//   <clip>/audio_features.bin     "RTAF", u32 T, u32 D, T*D float32 LE
//   <clip>/pitch_features.bin     same container
//   <clip>/blendshapes.csv        T rows x D_b columns
//   <clip>/poses.json
//
// Checkpoint layout: <dir>/index.json + <dir>/tensors.bin (float32 LE, index order).

#include "json.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "realtalk/camera.hpp"
#include "realtalk/emotion.hpp"
#include "realtalk/error.hpp"
#include "realtalk/image.hpp"
#include "realtalk/synth_data.hpp"
#include "realtalk/training.hpp"

namespace realtalk::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;
inline constexpr int kCheckpointFormatVersion = 1;

// ---------------------------------------------------------------------------
// Little-endian primitives

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF), static_cast<unsigned char>((v >> 8) & 0xFF),
                        static_cast<unsigned char>((v >> 16) & 0xFF), static_cast<unsigned char>((v >> 24) & 0xFF)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<std::uint32_t>(f)); }

inline std::uint32_t get_u32(const unsigned char* b) {
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::vector<unsigned char> read_bytes(const fs::path& path) {
  require(fs::exists(path), ErrorCode::missing_file, path.string());
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::io, "cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::io, "cannot write " + path.string());
  out << text;
}

inline json read_json(const fs::path& path) {
  require(fs::exists(path), ErrorCode::missing_file, path.string());
  std::ifstream in(path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorCode::io, path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// RTAF feature container

inline void write_rtaf(const fs::path& path, const ad::Matrix<double>& m) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::io, "cannot write " + path.string());
  out.write("RTAF", 4);
  put_u32(out, static_cast<std::uint32_t>(m.rows()));
  put_u32(out, static_cast<std::uint32_t>(m.cols()));
  for (ad::Index i = 0; i < m.size(); ++i) put_f32(out, static_cast<float>(m.data()[i]));
}

inline ad::Matrix<double> read_rtaf(const fs::path& path) {
  const auto bytes = read_bytes(path);
  require(bytes.size() >= 12 && std::memcmp(bytes.data(), "RTAF", 4) == 0, ErrorCode::io,
          path.string() + ": missing RTAF header");
  const std::uint32_t t = get_u32(bytes.data() + 4);
  const std::uint32_t d = get_u32(bytes.data() + 8);
  const std::size_t expect = 12 + static_cast<std::size_t>(t) * d * 4;
  require(bytes.size() == expect, ErrorCode::truncated_payload,
          path.string() + ": expected " + std::to_string(expect) + " bytes, found " + std::to_string(bytes.size()));
  ad::Matrix<double> m(t, d);
  for (std::size_t i = 0; i < static_cast<std::size_t>(t) * d; ++i)
    m.data()[i] = static_cast<double>(std::bit_cast<float>(get_u32(bytes.data() + 12 + 4 * i)));
  require(m.allFinite(), ErrorCode::non_finite, path.string());
  return m;
}

// ---------------------------------------------------------------------------
// CSV matrices (decimal text, full double round-trip precision)

inline std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_csv(const fs::path& path, const ad::Matrix<double>& m) {
  std::string text;
  text.reserve(static_cast<std::size_t>(m.size()) * 12);
  for (ad::Index r = 0; r < m.rows(); ++r) {
    for (ad::Index c = 0; c < m.cols(); ++c) {
      if (c) text += ',';
      text += format_number(m(r, c));
    }
    text += '\n';
  }
  write_text(path, text);
}

inline std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

inline std::size_t csv_columns(const fs::path& path) {
  require(fs::exists(path), ErrorCode::missing_file, path.string());
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  return split_line(line).size();
}

inline ad::Matrix<double> read_csv(const fs::path& path, std::size_t expected_cols) {
  require(fs::exists(path), ErrorCode::missing_file, path.string());
  std::ifstream in(path);
  std::vector<double> values;
  std::string line;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split_line(line);
    require(cells.size() == expected_cols, ErrorCode::shape_mismatch,
            path.string() + " row " + std::to_string(rows) + ": expected " + std::to_string(expected_cols) +
                " columns, found " + std::to_string(cells.size()));
    for (const auto& c : cells) {
      try {
        values.push_back(std::stod(c));
      } catch (const std::exception&) {
        fail(ErrorCode::io, path.string() + ": bad number '" + c + "'");
      }
    }
    ++rows;
  }
  ad::Matrix<double> m(static_cast<ad::Index>(rows), static_cast<ad::Index>(expected_cols));
  std::copy(values.begin(), values.end(), m.data());
  return m;
}

// ---------------------------------------------------------------------------
// Poses

inline json poses_to_json(const std::vector<HeadPose>& poses, const Intrinsics& k) {
  json j;
  j["intrinsics"] = {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"width", k.width}, {"height", k.height}};
  json frames = json::array();
  for (const auto& p : poses) {
    json f;
    std::vector<double> r(9);
    for (int i = 0; i < 3; ++i)
      for (int c = 0; c < 3; ++c) r[static_cast<std::size_t>(i * 3 + c)] = p.rotation(i, c);
    f["rotation"] = r;
    f["translation"] = {p.translation.x(), p.translation.y(), p.translation.z()};
    if (p.keypoints) {
      json kp = json::array();
      for (const auto& q : *p.keypoints) kp.push_back({q.x(), q.y()});
      f["keypoints"] = kp;
    }
    frames.push_back(f);
  }
  j["frames"] = frames;
  return j;
}

inline std::pair<std::vector<HeadPose>, Intrinsics> poses_from_json(const json& j, const std::string& where) {
  try {
    Intrinsics k;
    const auto& ji = j.at("intrinsics");
    k.fx = ji.at("fx");
    k.fy = ji.at("fy");
    k.cx = ji.at("cx");
    k.cy = ji.at("cy");
    k.width = ji.at("width");
    k.height = ji.at("height");
    std::vector<HeadPose> poses;
    for (const auto& f : j.at("frames")) {
      HeadPose p;
      const auto r = f.at("rotation").get<std::vector<double>>();
      const auto t = f.at("translation").get<std::vector<double>>();
      require(r.size() == 9 && t.size() == 3, ErrorCode::shape_mismatch, where + ": pose needs 9 + 3 values");
      for (int i = 0; i < 3; ++i)
        for (int c = 0; c < 3; ++c) p.rotation(i, c) = r[static_cast<std::size_t>(i * 3 + c)];
      p.translation = Vec3(t[0], t[1], t[2]);
      if (f.contains("keypoints")) {
        std::vector<Eigen::Vector2d> kp;
        for (const auto& q : f["keypoints"]) kp.emplace_back(q.at(0).get<double>(), q.at(1).get<double>());
        p.keypoints = kp;
      }
      poses.push_back(p);
    }
    return {poses, k};
  } catch (const json::exception& e) {
    fail(ErrorCode::io, where + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Dataset

struct ClipDescriptor {
  std::string path;
  Emotion emotion = Emotion::neutral;
  int frames = 0;
  int resolution = 0;
};

struct DatasetManifest {
  int schema_version = kSchemaVersion;
  int landmark_dim = kLandmarkDim;
  int content_dim = 0;
  int pitch_dim = 0;
  int blendshape_dim = 0;
  std::vector<ClipDescriptor> clips;
};

inline fs::path frame_path(const fs::path& clip_dir, int t) {
  char name[32];
  std::snprintf(name, sizeof name, "%05d.png", t);
  return clip_dir / "frames" / name;
}

inline void write_clip(const fs::path& clip_dir, const SyntheticClip& clip) {
  fs::create_directories(clip_dir / "frames");
  for (int t = 0; t < static_cast<int>(clip.frames.size()); ++t)
    write_png(frame_path(clip_dir, t), clip.frames[static_cast<std::size_t>(t)]);
  write_csv(clip_dir / "landmarks.csv", clip.landmarks);
  write_rtaf(clip_dir / "audio_features.bin", clip.content);
  write_rtaf(clip_dir / "pitch_features.bin", clip.pitch);
  write_csv(clip_dir / "blendshapes.csv", clip.blendshapes);
  write_text(clip_dir / "poses.json", poses_to_json(clip.poses, clip.intrinsics).dump(1));
}

inline json manifest_to_json(const DatasetManifest& m) {
  json clips = json::array();
  for (const auto& c : m.clips)
    clips.push_back({{"path", c.path}, {"emotion", std::string(to_string(c.emotion))}, {"frames", c.frames},
                     {"resolution", c.resolution}});
  return {{"schema_version", m.schema_version}, {"landmark_dim", m.landmark_dim}, {"content_dim", m.content_dim},
          {"pitch_dim", m.pitch_dim}, {"blendshape_dim", m.blendshape_dim}, {"clips", clips}};
}

// Writes clips under `root` and the manifest listing them in order.
inline DatasetManifest write_dataset(const fs::path& root, const std::vector<SyntheticClip>& clips,
                                     const std::vector<std::string>& names = {}) {
  require(!clips.empty(), ErrorCode::invalid_argument, "dataset needs at least one clip");
  fs::create_directories(root);
  DatasetManifest m;
  m.content_dim = static_cast<int>(clips[0].content.cols());
  m.pitch_dim = static_cast<int>(clips[0].pitch.cols());
  m.blendshape_dim = static_cast<int>(clips[0].blendshapes.cols());
  for (std::size_t i = 0; i < clips.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "clip_%03zu", i);
    const std::string dir = i < names.size() ? names[i] : std::string(name);
    write_clip(root / dir, clips[i]);
    m.clips.push_back({dir, clips[i].emotion, clips[i].length(), clips[i].resolution});
  }
  write_text(root / "manifest.json", manifest_to_json(m).dump(2));
  return m;
}

// A validated dataset with per-clip lazy loading.
class Dataset {
 public:
  Dataset(fs::path root, DatasetManifest manifest) : root_(std::move(root)), manifest_(std::move(manifest)) {}

  const DatasetManifest& manifest() const { return manifest_; }
  const fs::path& root() const { return root_; }
  std::size_t size() const { return manifest_.clips.size(); }

  SyntheticClip load_clip(std::size_t i) const {
    require(i < manifest_.clips.size(), ErrorCode::invalid_argument, "clip index out of range");
    const auto& d = manifest_.clips[i];
    const fs::path dir = root_ / d.path;
    const std::string tag = "clip '" + d.path + "'";
    SyntheticClip clip;
    clip.emotion = d.emotion;
    clip.resolution = d.resolution;
    clip.landmarks = read_csv(dir / "landmarks.csv", static_cast<std::size_t>(manifest_.landmark_dim));
    clip.content = read_rtaf(dir / "audio_features.bin");
    clip.pitch = read_rtaf(dir / "pitch_features.bin");
    clip.blendshapes = read_csv(dir / "blendshapes.csv", static_cast<std::size_t>(manifest_.blendshape_dim));
    clip.blendshapes = clip.blendshapes.cwiseMax(0.0).cwiseMin(1.0);
    auto [poses, k] = poses_from_json(read_json(dir / "poses.json"), tag + " poses.json");
    clip.poses = std::move(poses);
    clip.intrinsics = k;
    auto check_len = [&](ad::Index n, const char* field) {
      require(n == d.frames, ErrorCode::shape_mismatch,
              tag + " field '" + field + "' has " + std::to_string(n) + " frames, manifest says " + std::to_string(d.frames));
    };
    check_len(clip.landmarks.rows(), "landmarks");
    check_len(clip.content.rows(), "audio_features");
    check_len(clip.pitch.rows(), "pitch_features");
    check_len(clip.blendshapes.rows(), "blendshapes");
    check_len(static_cast<ad::Index>(clip.poses.size()), "poses");
    require(clip.content.cols() == manifest_.content_dim, ErrorCode::shape_mismatch, tag + " audio_features width");
    require(clip.pitch.cols() == manifest_.pitch_dim, ErrorCode::shape_mismatch, tag + " pitch_features width");
    for (int t = 0; t < d.frames; ++t) {
      clip.frames.push_back(read_png(frame_path(dir, t)));
      require(clip.frames.back().width == d.resolution && clip.frames.back().height == d.resolution,
              ErrorCode::shape_mismatch, tag + " frame " + std::to_string(t) + " resolution");
    }
    return clip;
  }

 private:
  fs::path root_;
  DatasetManifest manifest_;
};

inline Dataset load_dataset(const fs::path& root) {
  const json j = read_json(root / "manifest.json");
  DatasetManifest m;
  try {
    m.schema_version = j.at("schema_version");
    require(m.schema_version == kSchemaVersion, ErrorCode::schema_version,
            std::to_string(m.schema_version) + " (supported: " + std::to_string(kSchemaVersion) + ")");
    m.landmark_dim = j.at("landmark_dim");
    require(m.landmark_dim == kLandmarkDim, ErrorCode::shape_mismatch,
            "manifest field 'landmark_dim' = " + std::to_string(m.landmark_dim));
    m.content_dim = j.at("content_dim");
    m.pitch_dim = j.at("pitch_dim");
    m.blendshape_dim = j.value("blendshape_dim", 8);
    for (const auto& c : j.at("clips")) {
      ClipDescriptor d;
      d.path = c.at("path");
      d.emotion = parse_emotion(c.at("emotion").get<std::string>());
      d.frames = c.at("frames");
      d.resolution = c.at("resolution");
      m.clips.push_back(d);
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::io, (root / "manifest.json").string() + ": " + e.what());
  }
  for (const auto& d : m.clips) {
    const fs::path dir = root / d.path;
    const std::string tag = "clip '" + d.path + "'";
    for (const char* f : {"landmarks.csv", "audio_features.bin", "pitch_features.bin", "blendshapes.csv", "poses.json"})
      require(fs::exists(dir / f), ErrorCode::missing_file, tag + ": " + (dir / f).string());
    for (int t = 0; t < d.frames; ++t)
      require(fs::exists(frame_path(dir, t)), ErrorCode::missing_file, tag + ": " + frame_path(dir, t).string());
    const auto cols = csv_columns(dir / "landmarks.csv");
    require(cols == static_cast<std::size_t>(m.landmark_dim), ErrorCode::shape_mismatch,
            tag + " field 'landmarks': " + std::to_string(cols) + " columns, expected " + std::to_string(m.landmark_dim));
  }
  return Dataset(root, std::move(m));
}

// ---------------------------------------------------------------------------
// Checkpoints

struct NamedTensor {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<float> data;
};

struct Checkpoint {
  int format_version = kCheckpointFormatVersion;
  std::uint64_t step = 0;
  json config = json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

inline std::int64_t shape_product(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

inline void save_checkpoint(const Checkpoint& ckpt, const fs::path& dir) {
  std::set<std::string> names;
  for (const auto& t : ckpt.tensors) {
    require(names.insert(t.name).second, ErrorCode::duplicate_name, t.name);
    require(shape_product(t.shape) == static_cast<std::int64_t>(t.data.size()), ErrorCode::shape_mismatch,
            "tensor '" + t.name + "' payload does not match its shape");
  }
  fs::create_directories(dir);
  json index;
  index["format_version"] = ckpt.format_version;
  index["step"] = ckpt.step;
  index["config"] = ckpt.config;
  json list = json::array();
  std::int64_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    list.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += static_cast<std::int64_t>(t.data.size());
  }
  index["tensors"] = list;
  std::ofstream out(dir / "tensors.bin", std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::io, "cannot write " + (dir / "tensors.bin").string());
  for (const auto& t : ckpt.tensors)
    for (float f : t.data) put_f32(out, f);
  out.close();
  write_text(dir / "index.json", index.dump(1));
}

inline Checkpoint load_checkpoint(const fs::path& dir) {
  const json index = read_json(dir / "index.json");
  Checkpoint ckpt;
  try {
    ckpt.format_version = index.at("format_version");
    require(ckpt.format_version == kCheckpointFormatVersion, ErrorCode::version_mismatch,
            "checkpoint format_version " + std::to_string(ckpt.format_version) + ", expected " +
                std::to_string(kCheckpointFormatVersion));
    ckpt.step = index.at("step");
    ckpt.config = index.value("config", json::object());
    const auto bytes = read_bytes(dir / "tensors.bin");
    std::size_t expected = 0;
    std::set<std::string> names;
    for (const auto& t : index.at("tensors")) {
      NamedTensor nt;
      nt.name = t.at("name");
      require(names.insert(nt.name).second, ErrorCode::duplicate_name, nt.name);
      nt.shape = t.at("shape").get<std::vector<std::int64_t>>();
      expected += static_cast<std::size_t>(shape_product(nt.shape));
      ckpt.tensors.push_back(std::move(nt));
    }
    require(bytes.size() >= expected * 4, ErrorCode::truncated_payload,
            "tensors.bin holds " + std::to_string(bytes.size()) + " bytes, index needs " + std::to_string(expected * 4));
    require(bytes.size() == expected * 4, ErrorCode::shape_mismatch, "tensors.bin has trailing bytes");
    std::size_t pos = 0;
    for (auto& nt : ckpt.tensors) {
      const auto n = static_cast<std::size_t>(shape_product(nt.shape));
      nt.data.resize(n);
      for (std::size_t i = 0; i < n; ++i, ++pos) nt.data[i] = std::bit_cast<float>(get_u32(bytes.data() + 4 * pos));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::io, (dir / "index.json").string() + ": " + e.what());
  }
  return ckpt;
}

template <class T>
Checkpoint to_checkpoint(const ParameterStore<T>& store, const json& config) {
  Checkpoint c;
  c.step = store.step();
  c.config = config;
  for (const auto& e : store.entries()) {
    NamedTensor t;
    t.name = e.name;
    t.shape = {e.var.rows(), e.var.cols()};
    t.data.resize(static_cast<std::size_t>(e.var.size()));
    for (ad::Index i = 0; i < e.var.size(); ++i) t.data[static_cast<std::size_t>(i)] = static_cast<float>(e.var.value().data()[i]);
    c.tensors.push_back(std::move(t));
  }
  return c;
}

// Loads every tensor of `store` from the checkpoint; names and shapes must match.
template <class T>
void restore_store(ParameterStore<T>& store, const Checkpoint& ckpt) {
  for (auto& e : store.entries()) {
    const NamedTensor* t = ckpt.find(e.name);
    require(t != nullptr, ErrorCode::incompatible_checkpoint, "missing tensor '" + e.name + "'");
    require(t->shape.size() == 2 && t->shape[0] == e.var.rows() && t->shape[1] == e.var.cols(),
            ErrorCode::incompatible_checkpoint, "tensor '" + e.name + "' has a different shape");
    auto& v = e.var.node()->value;
    for (ad::Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<T>(t->data[static_cast<std::size_t>(i)]);
  }
  require(ckpt.tensors.size() == store.size(), ErrorCode::incompatible_checkpoint, "checkpoint holds extra tensors");
  store.set_step(ckpt.step);
}

}  // namespace realtalk::io
