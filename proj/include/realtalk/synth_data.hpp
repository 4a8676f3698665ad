#pragma once

// Procedural "face" clips whose audio-to-motion and emotion-deformation ground
// truth is known exactly. Landmark values live on a 2^-20 grid so that
// canonical + emotion field + mouth motion is exact in both double and float32.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "realtalk/autodiff.hpp"
#include "realtalk/camera.hpp"
#include "realtalk/emotion.hpp"
#include "realtalk/error.hpp"
#include "realtalk/image.hpp"

namespace realtalk {

inline constexpr int kNumLandmarks = 68;
inline constexpr int kLandmarkDim = kNumLandmarks * 3;
inline constexpr int kMouthBegin = 48;  // iBUG 68-point convention: mouth = 48..67
inline constexpr int kMouthCount = 20;

using Landmarks = ad::Matrix<double>;  // rows = frames, cols = 204 (x0 y0 z0 x1 ...)

inline double quantize_grid(double v) {
  constexpr double scale = 1048576.0;  // 2^20
  return std::round(v * scale) / scale;
}

inline std::vector<int> mouth_indices() {
  std::vector<int> idx(kMouthCount);
  for (int i = 0; i < kMouthCount; ++i) idx[static_cast<std::size_t>(i)] = kMouthBegin + i;
  return idx;
}

struct CanonicalFace {
  ad::Matrix<double> points;  // 68 x 3
  std::vector<int> mouth;
  std::uint64_t topology_seed = 0;

  ad::Matrix<double> flattened() const {
    return Eigen::Map<const ad::Matrix<double>>(points.data(), 1, kLandmarkDim);
  }
};

struct SynthConfig {
  std::uint64_t field_seed = 2024;
  std::uint64_t topology_seed = 11;
  int content_dim = 16;
  int pitch_dim = 4;
  int blendshape_dim = 8;
  double field_norm = 0.25;       // L2 norm of every non-neutral displacement field
  double field_max_norm = 0.4;
  double field_separation = 0.15;  // minimum pairwise L2 distance between fields
  double mouth_open_gain = 0.06;
  double mouth_width_gain = 0.04;
  double splat_radius = 0.04;  // world units
  double splat_alpha = 0.85;
  std::array<float, 3> background = {0.05f, 0.05f, 0.08f};
  double focal_scale = 1.6;
  double camera_distance = 3.0;
  double max_rotation_deg = 6.0;
};

struct SyntheticClip {
  Emotion emotion = Emotion::neutral;
  int resolution = 64;
  std::vector<Image> frames;
  Landmarks landmarks;        // T x 204
  Landmarks mouth_motion;     // T x 204, audio-driven part (zero outside the mouth)
  ad::Matrix<double> content;      // T x content_dim, float32-exact values in [0,1]
  ad::Matrix<double> pitch;        // T x pitch_dim
  ad::Matrix<double> blendshapes;  // T x blendshape_dim in [0,1]
  std::vector<HeadPose> poses;
  Intrinsics intrinsics;

  int length() const { return static_cast<int>(landmarks.rows()); }
};

inline std::array<float, 3> landmark_color(int i) {
  if (i <= 16) return {0.85f, 0.65f, 0.50f};   // jaw
  if (i <= 26) return {0.35f, 0.20f, 0.10f};   // brows
  if (i <= 35) return {0.90f, 0.55f, 0.45f};   // nose
  if (i <= 47) return {0.20f, 0.45f, 0.90f};   // eyes
  if (i <= 59) return {0.85f, 0.15f, 0.20f};   // outer lip
  return {0.60f, 0.05f, 0.10f};                // inner lip
}

// Additive-alpha Gaussian splats composited far-to-near over the background.
inline Image rasterize_landmarks(const ad::Matrix<double>& frame, const HeadPose& pose, const Intrinsics& k,
                                 const SynthConfig& cfg) {
  require(frame.size() == kLandmarkDim, ErrorCode::shape_mismatch, "rasterize expects 204 values");
  Image img(k.width, k.height);
  for (std::size_t p = 0; p < img.pixels(); ++p)
    for (int c = 0; c < 3; ++c) img.rgb[p * 3 + c] = cfg.background[static_cast<std::size_t>(c)];
  struct Splat {
    double depth;
    int index;
    double u, v, sigma;
  };
  std::vector<Splat> splats;
  for (int i = 0; i < kNumLandmarks; ++i) {
    Vec3 w(frame.data()[3 * i], frame.data()[3 * i + 1], frame.data()[3 * i + 2]);
    Vec3 c = pose.to_camera(w);
    if (c.z() <= 1e-6) continue;
    splats.push_back({c.z(), i, k.fx * c.x() / c.z() + k.cx, k.fy * c.y() / c.z() + k.cy,
                      cfg.splat_radius * k.fx / c.z()});
  }
  std::stable_sort(splats.begin(), splats.end(), [](const Splat& a, const Splat& b) {
    return a.depth != b.depth ? a.depth > b.depth : a.index < b.index;
  });
  for (const auto& s : splats) {
    const auto col = landmark_color(s.index);
    const double reach = 3.0 * s.sigma;
    const int x0 = std::max(0, static_cast<int>(std::floor(s.u - reach)));
    const int x1 = std::min(k.width - 1, static_cast<int>(std::ceil(s.u + reach)));
    const int y0 = std::max(0, static_cast<int>(std::floor(s.v - reach)));
    const int y1 = std::min(k.height - 1, static_cast<int>(std::ceil(s.v + reach)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double dx = x + 0.5 - s.u;
        const double dy = y + 0.5 - s.v;
        const double a = cfg.splat_alpha * std::exp(-(dx * dx + dy * dy) / (2.0 * s.sigma * s.sigma));
        for (int c = 0; c < 3; ++c) {
          float& dst = img.at(x, y, c);
          dst = static_cast<float>(a * col[static_cast<std::size_t>(c)] + (1.0 - a) * dst);
        }
      }
    }
  }
  return img;
}

class SyntheticFaceGenerator {
 public:
  explicit SyntheticFaceGenerator(SynthConfig cfg = {}) : cfg_(cfg) {
    build_canonical();
    build_fields();
  }

  const SynthConfig& config() const { return cfg_; }
  const CanonicalFace& canonical() const { return face_; }

  // Exact displacement applied for `e` (zero for neutral).
  const ad::Matrix<double>& oracle_displacement(Emotion e) const {
    const int code = to_code(e);
    require(code >= 0 && code < kNumEmotions, ErrorCode::unknown_emotion, valid_emotion_list());
    return fields_[static_cast<std::size_t>(code)];
  }

  // Audio-driven mouth displacement for one frame of content features.
  ad::Matrix<double> mouth_motion(const Eigen::Ref<const ad::Matrix<double>>& content_row) const {
    require(content_row.size() == cfg_.content_dim, ErrorCode::shape_mismatch, "content feature width");
    const int half = cfg_.content_dim / 2;
    double open_mean = 0, width_mean = 0;
    for (int j = 0; j < half; ++j) open_mean += content_row.data()[j];
    for (int j = half; j < cfg_.content_dim; ++j) width_mean += content_row.data()[j];
    open_mean /= half;
    width_mean /= (cfg_.content_dim - half);
    const double open = cfg_.mouth_open_gain * open_mean;
    const double width = cfg_.mouth_width_gain * (width_mean - 0.5);
    ad::Matrix<double> out = ad::Matrix<double>::Zero(1, kLandmarkDim);
    for (int i : face_.mouth) {
      const double dx = face_.points(i, 0) - mouth_center_.x();
      const double dy = face_.points(i, 1) - mouth_center_.y();
      out(0, 3 * i) = quantize_grid(width * dx / kMouthRx);
      out(0, 3 * i + 1) = quantize_grid(open * dy / kMouthRy);
    }
    return out;
  }

  SyntheticClip generate_clip(std::uint64_t seed, Emotion emotion, int frames, int resolution) const {
    require(frames >= 1, ErrorCode::invalid_argument, "frames must be >= 1");
    require(resolution == 32 || resolution == 64 || resolution == 128, ErrorCode::invalid_argument,
            "resolution must be one of 32, 64, 128");
    const int code = to_code(emotion);
    require(code >= 0 && code < kNumEmotions, ErrorCode::unknown_emotion, valid_emotion_list());

    SyntheticClip clip;
    clip.emotion = emotion;
    clip.resolution = resolution;
    clip.intrinsics = Intrinsics::for_resolution(resolution, cfg_.focal_scale);
    std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ull + 0x5851F42D4C957F2Dull);
    std::normal_distribution<double> gauss(0.0, 1.0);

    // Content features: band energies modulated by a syllable-rate envelope.
    clip.content.resize(frames, cfg_.content_dim);
    std::vector<double> gains(static_cast<std::size_t>(cfg_.content_dim));
    for (auto& g : gains) g = 0.6 + 0.4 * std::uniform_real_distribution<double>(0, 1)(rng);
    double x = 0, y = 0;
    for (int t = 0; t < frames; ++t) {
      x = 0.5 * x + gauss(rng);
      y = 0.5 * y + gauss(rng);
      const double env = 1.0 / (1.0 + std::exp(-2.0 * x));
      const double tilt = 1.0 / (1.0 + std::exp(-2.0 * y));
      for (int j = 0; j < cfg_.content_dim; ++j) {
        const double base = j < cfg_.content_dim / 2 ? env : tilt;
        const double v = std::clamp(gains[static_cast<std::size_t>(j)] * base + 0.05 * gauss(rng), 0.0, 1.0);
        clip.content(t, j) = static_cast<double>(static_cast<float>(v));
      }
    }
    // Pitch features: slow independent walks.
    clip.pitch.resize(frames, cfg_.pitch_dim);
    std::vector<double> pv(static_cast<std::size_t>(cfg_.pitch_dim), 0.0);
    for (int t = 0; t < frames; ++t)
      for (int j = 0; j < cfg_.pitch_dim; ++j) {
        auto& p = pv[static_cast<std::size_t>(j)];
        p = 0.9 * p + 0.3 * gauss(rng);
        clip.pitch(t, j) = static_cast<double>(static_cast<float>(std::tanh(p)));
      }
    // Blendshapes: reflected random walks in [0,1].
    clip.blendshapes.resize(frames, cfg_.blendshape_dim);
    for (int j = 0; j < cfg_.blendshape_dim; ++j) {
      double b = std::uniform_real_distribution<double>(0.2, 0.8)(rng);
      for (int t = 0; t < frames; ++t) {
        b += 0.05 * gauss(rng);
        if (b < 0) b = -b;
        if (b > 1) b = 2 - b;
        clip.blendshapes(t, j) = static_cast<double>(static_cast<float>(b));
      }
    }
    // Poses: smooth small head rotations with slight translation jitter.
    const double max_rad = cfg_.max_rotation_deg * std::numbers::pi / 180.0;
    double yaw = 0, pitch = 0, roll = 0;
    for (int t = 0; t < frames; ++t) {
      yaw = std::clamp(0.85 * yaw + 0.35 * max_rad * gauss(rng), -max_rad, max_rad);
      pitch = std::clamp(0.85 * pitch + 0.25 * max_rad * gauss(rng), -max_rad, max_rad);
      roll = std::clamp(0.85 * roll + 0.15 * max_rad * gauss(rng), -max_rad, max_rad);
      HeadPose pose;
      pose.rotation = rotation_from_euler(yaw, pitch, roll);
      pose.translation = Vec3(0.02 * gauss(rng), 0.02 * gauss(rng), cfg_.camera_distance);
      clip.poses.push_back(pose);
    }
    // Landmarks = canonical + emotion field + mouth motion (exact on the grid).
    const auto canon = face_.flattened();
    const auto& field = fields_[static_cast<std::size_t>(code)];
    clip.landmarks.resize(frames, kLandmarkDim);
    clip.mouth_motion.resize(frames, kLandmarkDim);
    for (int t = 0; t < frames; ++t) {
      clip.mouth_motion.row(t) = mouth_motion(clip.content.row(t));
      clip.landmarks.row(t) = canon + field + clip.mouth_motion.row(t);
    }
    for (int t = 0; t < frames; ++t)
      clip.frames.push_back(rasterize_landmarks(clip.landmarks.row(t), clip.poses[static_cast<std::size_t>(t)],
                                                clip.intrinsics, cfg_));
    return clip;
  }

 private:
  static constexpr double kMouthRx = 0.18;
  static constexpr double kMouthRy = 0.07;

  void build_canonical() {
    face_.topology_seed = cfg_.topology_seed;
    face_.mouth = mouth_indices();
    ad::Matrix<double>& p = face_.points;
    p.resize(kNumLandmarks, 3);
    const double pi = std::numbers::pi;
    auto set = [&](int i, double x, double y, double z) {
      p(i, 0) = x;
      p(i, 1) = y;
      p(i, 2) = z;
    };
    for (int i = 0; i <= 16; ++i) {  // jaw
      const double a = pi * i / 16.0;
      const double x = -0.5 * std::cos(a);
      set(i, x, -0.05 + 0.5 * std::sin(a), 0.05 + 0.15 * std::abs(x));
    }
    for (int i = 0; i < 5; ++i) {  // brows
      const double s = i / 4.0;
      const double arc = std::sin(pi * s);
      set(17 + i, -0.42 + 0.3 * s, -0.30 - 0.05 * arc, -0.02);
      set(22 + i, 0.12 + 0.3 * s, -0.30 - 0.05 * arc, -0.02);
    }
    for (int i = 0; i < 4; ++i) set(27 + i, 0.0, -0.2 + 0.07 * i, -0.05 - 0.035 * i);  // nose bridge
    for (int i = 0; i < 5; ++i) set(31 + i, -0.08 + 0.04 * i, 0.08, -0.08 + 0.02 * std::abs(i - 2));
    for (int i = 0; i < 6; ++i) {  // eyes
      const double a = 2.0 * pi * i / 6.0;
      set(36 + i, -0.25 - 0.08 * std::cos(a), -0.17 - 0.035 * std::sin(a), 0.0);
      set(42 + i, 0.25 - 0.08 * std::cos(a), -0.17 - 0.035 * std::sin(a), 0.0);
    }
    mouth_center_ = Vec3(0.0, 0.25, -0.05);
    for (int i = 0; i < 12; ++i) {  // outer lip
      const double a = 2.0 * pi * i / 12.0;
      set(48 + i, -kMouthRx * std::cos(a), 0.25 - kMouthRy * std::sin(a), -0.05);
    }
    for (int i = 0; i < 8; ++i) {  // inner lip
      const double a = 2.0 * pi * i / 8.0;
      set(60 + i, -0.11 * std::cos(a), 0.25 - 0.035 * std::sin(a), -0.05);
    }
    std::mt19937_64 rng(cfg_.topology_seed);
    std::uniform_real_distribution<double> jitter(-0.01, 0.01);
    for (int i = 0; i < p.size(); ++i) p.data()[i] = quantize_grid(p.data()[i] + jitter(rng));
  }

  void build_fields() {
    std::mt19937_64 rng(cfg_.field_seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    require(cfg_.field_norm <= cfg_.field_max_norm, ErrorCode::invalid_argument, "field_norm exceeds field_max_norm");
    for (int e = 0; e < kNumEmotions; ++e) {
      ad::Matrix<double> f = ad::Matrix<double>::Zero(1, kLandmarkDim);
      if (static_cast<Emotion>(e) != Emotion::neutral) {
        for (int attempt = 0;; ++attempt) {
          require(attempt < 1000, ErrorCode::invalid_argument, "cannot satisfy emotion field separation");
          for (int i = 0; i < kNumLandmarks; ++i) {
            const bool expressive = (i >= 17 && i <= 26) || i >= kMouthBegin;
            const double w = expressive ? 1.5 : 1.0;
            f(0, 3 * i) = w * gauss(rng);
            f(0, 3 * i + 1) = w * gauss(rng);
            f(0, 3 * i + 2) = 0.3 * w * gauss(rng);
          }
          f *= cfg_.field_norm / f.norm();
          for (int i = 0; i < f.size(); ++i) f.data()[i] = quantize_grid(f.data()[i]);
          bool separated = true;
          for (int prev = 0; prev < e; ++prev) {
            if (static_cast<Emotion>(prev) == Emotion::neutral) continue;
            if ((fields_[static_cast<std::size_t>(prev)] - f).norm() < cfg_.field_separation) separated = false;
          }
          if (separated) break;
        }
      }
      fields_[static_cast<std::size_t>(e)] = f;
    }
  }

  SynthConfig cfg_;
  CanonicalFace face_;
  Vec3 mouth_center_;
  std::array<ad::Matrix<double>, kNumEmotions> fields_;
};

}  // namespace realtalk
