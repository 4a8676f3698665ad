#pragma once

// Tri-plane hash-encoded radiance field conditioned on landmarks through a
// small attention network, with alpha-compositing volume rendering and a
// two-stage (ray MSE, then patch MSE + perceptual) trainer.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "realtalk/autodiff.hpp"
#include "realtalk/camera.hpp"
#include "realtalk/data_io.hpp"
#include "realtalk/error.hpp"
#include "realtalk/image.hpp"
#include "realtalk/metrics.hpp"
#include "realtalk/synth_data.hpp"
#include "realtalk/training.hpp"

namespace realtalk {

// ---------------------------------------------------------------------------
// Multiresolution 2-D hash grid

struct HashGridConfig {
  int levels = 14;
  int features = 2;
  int log2_table = 14;
  int base_resolution = 16;
  int finest_resolution = 512;
  double init_scale = 1e-4;

  void validate() const {
    require(levels >= 1 && features >= 1, ErrorCode::config, "hash grid needs >= 1 level and feature");
    require(log2_table >= 4 && log2_table <= 24, ErrorCode::config, "hash grid log2_table must be in [4, 24]");
    require(base_resolution >= 1 && finest_resolution >= base_resolution, ErrorCode::config,
            "hash grid resolutions must satisfy 1 <= base <= finest");
  }
  double growth() const {
    return levels == 1 ? 1.0 : std::exp((std::log(finest_resolution) - std::log(base_resolution)) / (levels - 1));
  }
  int resolution(int level) const {
    return static_cast<int>(std::floor(base_resolution * std::pow(growth(), level) + 1e-9));
  }
  std::uint32_t table_size() const { return 1u << log2_table; }
  int output_dim() const { return levels * features; }

  // Table slot of integer corner (i, j) at a level of the given resolution.
  std::uint32_t slot(int res, int i, int j) const {
    const auto side = static_cast<std::uint64_t>(res) + 1;
    if (side * side <= table_size()) return static_cast<std::uint32_t>(i + side * j);
    const std::uint32_t h = static_cast<std::uint32_t>(i) ^ (static_cast<std::uint32_t>(j) * 2654435761u);
    return h & (table_size() - 1);
  }
};

inline nlohmann::json to_json(const HashGridConfig& g) {
  return {{"levels", g.levels},
          {"features", g.features},
          {"log2_table", g.log2_table},
          {"base_resolution", g.base_resolution},
          {"finest_resolution", g.finest_resolution},
          {"init_scale", g.init_scale}};
}

inline HashGridConfig hash_grid_config_from_json(const nlohmann::json& j) {
  HashGridConfig g;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    const auto& v = it.value();
    if (k == "levels") g.levels = v.get<int>();
    else if (k == "features") g.features = v.get<int>();
    else if (k == "log2_table") g.log2_table = v.get<int>();
    else if (k == "base_resolution") g.base_resolution = v.get<int>();
    else if (k == "finest_resolution") g.finest_resolution = v.get<int>();
    else if (k == "init_scale") g.init_scale = v.get<double>();
    else fail(ErrorCode::config, "unknown hash grid config key '" + k + "'");
  }
  g.validate();
  return g;
}

// Encodes N plane coordinates (N x 2, expected in [-1, 1]) into N x (L*D)
// features by bilinear interpolation of the four surrounding table entries at
// every level. The table is (L * 2^log2_table) x D, level l at row offset
// l * 2^log2_table. Out-of-domain coordinates are clamped with a warning.
template <class T>
Var<T> hash_encode_plane(const Var<T>& table, const ad::Matrix<double>& ab, const HashGridConfig& g) {
  const int levels = g.levels, dims = g.features;
  const std::uint32_t ts = g.table_size();
  require(table.rows() == static_cast<ad::Index>(levels) * ts && table.cols() == dims, ErrorCode::shape_mismatch,
          "hash table shape does not match the grid config");
  require(ab.cols() == 2, ErrorCode::shape_mismatch, "plane coordinates must be N x 2");
  const ad::Index n = ab.rows();
  std::vector<int> res(static_cast<std::size_t>(levels));
  for (int l = 0; l < levels; ++l) res[static_cast<std::size_t>(l)] = g.resolution(l);

  const std::size_t taps = static_cast<std::size_t>(n) * levels * 4;
  std::vector<std::uint32_t> rows(taps);
  std::vector<T> weights(taps);
  Matrix<T> out = Matrix<T>::Zero(n, static_cast<ad::Index>(levels) * dims);
  const T* tab = table.value().data();
  std::size_t clamped = 0;
  for (ad::Index s = 0; s < n; ++s) {
    double a = ab(s, 0), b = ab(s, 1);
    if (!(a >= -1.0 && a <= 1.0 && b >= -1.0 && b <= 1.0)) {
      ++clamped;
      a = std::isfinite(a) ? std::clamp(a, -1.0, 1.0) : 0.0;
      b = std::isfinite(b) ? std::clamp(b, -1.0, 1.0) : 0.0;
    }
    T* o = out.data() + s * out.cols();
    for (int l = 0; l < levels; ++l) {
      const int r = res[static_cast<std::size_t>(l)];
      const double u = (a + 1.0) * 0.5 * r, v = (b + 1.0) * 0.5 * r;
      const int i0 = std::clamp(static_cast<int>(std::floor(u)), 0, r - 1);
      const int j0 = std::clamp(static_cast<int>(std::floor(v)), 0, r - 1);
      const double fu = u - i0, fv = v - j0;
      const std::size_t base = (static_cast<std::size_t>(s) * levels + l) * 4;
      const int di[4] = {0, 1, 0, 1}, dj[4] = {0, 0, 1, 1};
      for (int c = 0; c < 4; ++c) {
        const double w = (di[c] ? fu : 1.0 - fu) * (dj[c] ? fv : 1.0 - fv);
        const std::uint32_t row = static_cast<std::uint32_t>(l) * ts + g.slot(r, i0 + di[c], j0 + dj[c]);
        rows[base + c] = row;
        weights[base + c] = static_cast<T>(w);
        for (int d = 0; d < dims; ++d) o[l * dims + d] += static_cast<T>(w) * tab[static_cast<std::size_t>(row) * dims + d];
      }
    }
  }
  if (clamped > 0) warn("hash_encode_plane clamped " + std::to_string(clamped) + " coordinates into [-1, 1]");
  return ad::make_op<T>(std::move(out), {table},
                        [rows = std::move(rows), weights = std::move(weights), n, levels, dims](ad::Node<T>& self) {
                          auto& p = *self.parents[0];
                          if (!p.requires_grad) return;
                          T* gt = p.grad_buffer().data();
                          const T* go = self.grad.data();
                          for (ad::Index s = 0; s < n; ++s)
                            for (int l = 0; l < levels; ++l) {
                              const std::size_t base = (static_cast<std::size_t>(s) * levels + l) * 4;
                              const T* gl = go + s * static_cast<ad::Index>(levels) * dims + l * dims;
                              for (int c = 0; c < 4; ++c) {
                                T* dst = gt + static_cast<std::size_t>(rows[base + c]) * dims;
                                for (int d = 0; d < dims; ++d) dst[d] += weights[base + c] * gl[d];
                              }
                            }
                        });
}

enum class Plane { xy, yz, xz };

inline const char* plane_name(Plane p) {
  switch (p) {
    case Plane::xy: return "xy";
    case Plane::yz: return "yz";
    case Plane::xz: return "xz";
  }
  return "?";
}

inline ad::Matrix<double> project(const ad::Matrix<double>& xyz, Plane p) {
  ad::Matrix<double> out(xyz.rows(), 2);
  const int a = p == Plane::yz ? 1 : 0;
  const int b = p == Plane::xy ? 1 : 2;
  out.col(0) = xyz.col(a);
  out.col(1) = xyz.col(b);
  return out;
}

// f_x = H_xy(x, y) ++ H_yz(y, z) ++ H_xz(x, z) for N normalized positions.
template <class T>
Var<T> tri_plane_encode(const ParameterStore<T>& store, const std::string& prefix, const ad::Matrix<double>& xyz,
                        const HashGridConfig& g) {
  require(xyz.cols() == 3, ErrorCode::shape_mismatch, "tri_plane_encode expects N x 3 positions");
  std::vector<Var<T>> parts;
  for (Plane p : {Plane::xy, Plane::yz, Plane::xz})
    parts.push_back(hash_encode_plane<T>(store.get(prefix + "." + plane_name(p)), project(xyz, p), g));
  return ad::concat_cols<T>(parts);
}

// ---------------------------------------------------------------------------
// Volume rendering

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
  double t_near = 0;
  double t_far = 1;
  int samples = 2;

  void validate() const {
    require(origin.allFinite() && direction.allFinite(), ErrorCode::invalid_argument, "ray is not finite");
    require(std::abs(direction.norm() - 1.0) <= 1e-6, ErrorCode::invalid_argument, "ray direction must be unit length");
    require(t_near < t_far, ErrorCode::invalid_argument, "ray needs t_near < t_far");
    require(samples >= 2, ErrorCode::invalid_argument, "ray needs at least 2 samples");
  }
};

// Slab test; returns the [t_near, t_far] segment in front of the origin.
inline std::optional<std::pair<double, double>> intersect_box(const Vec3& o, const Vec3& d, const Vec3& lo,
                                                              const Vec3& hi) {
  double tn = 0.0, tf = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-12) {
      if (o[a] < lo[a] || o[a] > hi[a]) return std::nullopt;
      continue;
    }
    double t1 = (lo[a] - o[a]) / d[a], t2 = (hi[a] - o[a]) / d[a];
    if (t1 > t2) std::swap(t1, t2);
    tn = std::max(tn, t1);
    tf = std::min(tf, t2);
  }
  if (!(tf > tn)) return std::nullopt;
  return std::make_pair(tn, tf);
}

template <class T>
struct SampleSet {
  ad::Matrix<double> positions;   // S x 3, world
  ad::Matrix<double> directions;  // S x 3
  std::vector<int> ray;           // ray index per sample
  std::vector<T> delta;           // segment length per sample
  std::vector<int> offsets;       // R + 1 prefix offsets into the samples
};

// Stratified samples: t_k = t_n + (k + xi) * (t_f - t_n) / N_s with xi = 1/2
// (deterministic) or xi ~ U(0, 1) per sample when a jitter RNG is given.
template <class T>
SampleSet<T> stratified_samples(const std::vector<Ray>& rays, std::mt19937_64* jitter = nullptr) {
  SampleSet<T> s;
  s.offsets.assign(rays.size() + 1, 0);
  for (std::size_t r = 0; r < rays.size(); ++r) {
    rays[r].validate();
    s.offsets[r + 1] = s.offsets[r] + rays[r].samples;
  }
  const auto total = static_cast<ad::Index>(s.offsets.back());
  s.positions.resize(total, 3);
  s.directions.resize(total, 3);
  s.ray.resize(static_cast<std::size_t>(total));
  s.delta.resize(static_cast<std::size_t>(total));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (std::size_t r = 0; r < rays.size(); ++r) {
    const auto& ray = rays[r];
    const double dt = (ray.t_far - ray.t_near) / ray.samples;
    for (int k = 0; k < ray.samples; ++k) {
      const auto i = static_cast<ad::Index>(s.offsets[r] + k);
      const double xi = jitter ? u01(*jitter) : 0.5;
      s.positions.row(i) = (ray.origin + (ray.t_near + (k + xi) * dt) * ray.direction).transpose();
      s.directions.row(i) = ray.direction.transpose();
      s.ray[static_cast<std::size_t>(i)] = static_cast<int>(r);
      s.delta[static_cast<std::size_t>(i)] = static_cast<T>(dt);
    }
  }
  return s;
}

// Alpha compositing of S samples grouped into rays by `offsets`.
// Output is R x 4: composited RGB (background included through the final
// transmittance) and the final transmittance itself.
//   alpha_k = 1 - exp(-sigma_k delta_k),  w_k = alpha_k prod_{j<k} (1 - alpha_j)
template <class T>
Var<T> composite(const Var<T>& sigma, const Var<T>& color, const std::vector<T>& delta, const std::vector<int>& offsets,
                 const std::array<double, 3>& background, Matrix<T>* weights_out = nullptr) {
  const ad::Index n = sigma.rows();
  require(sigma.cols() == 1 && color.rows() == n && color.cols() == 3, ErrorCode::shape_mismatch,
          "composite expects S x 1 densities and S x 3 colors");
  require(static_cast<ad::Index>(delta.size()) == n && !offsets.empty() && offsets.back() == n,
          ErrorCode::shape_mismatch, "composite sample bookkeeping");
  require(sigma.value().allFinite() && color.value().allFinite(), ErrorCode::non_finite, "at stage 'composite input'");
  require(n == 0 || sigma.value().minCoeff() >= 0, ErrorCode::invalid_argument, "densities must be non-negative");
  const auto rays = static_cast<ad::Index>(offsets.size() - 1);
  const Eigen::Matrix<T, 1, 3> bg(static_cast<T>(background[0]), static_cast<T>(background[1]),
                                  static_cast<T>(background[2]));
  Matrix<T> out(rays, 4);
  std::vector<T> trans_before(static_cast<std::size_t>(n));  // T_k
  std::vector<T> w(static_cast<std::size_t>(n));
  const auto& sv = sigma.value();
  const auto& cv = color.value();
  for (ad::Index r = 0; r < rays; ++r) {
    T trans = 1;
    Eigen::Matrix<T, 1, 3> c = Eigen::Matrix<T, 1, 3>::Zero();
    for (int k = offsets[static_cast<std::size_t>(r)]; k < offsets[static_cast<std::size_t>(r) + 1]; ++k) {
      const T att = std::exp(-sv(k, 0) * delta[static_cast<std::size_t>(k)]);
      trans_before[static_cast<std::size_t>(k)] = trans;
      w[static_cast<std::size_t>(k)] = trans * (T(1) - att);
      c += w[static_cast<std::size_t>(k)] * cv.row(k);
      trans *= att;
    }
    out.block(r, 0, 1, 3) = c + trans * bg;
    out(r, 3) = trans;
  }
  if (weights_out) *weights_out = Eigen::Map<const Matrix<T>>(w.data(), n, 1);
  return ad::make_op<T>(std::move(out), {sigma, color},
                        [delta, offsets, bg, trans_before = std::move(trans_before), w = std::move(w), rays](ad::Node<T>& self) {
                          auto& ps = *self.parents[0];
                          auto& pc = *self.parents[1];
                          Matrix<T>* gs = ps.requires_grad ? &ps.grad_buffer() : nullptr;
                          Matrix<T>* gc = pc.requires_grad ? &pc.grad_buffer() : nullptr;
                          const auto& sv = ps.value;
                          const auto& cv = pc.value;
                          for (ad::Index r = 0; r < rays; ++r) {
                            const Eigen::Matrix<T, 1, 3> g_c = self.grad.block(r, 0, 1, 3);
                            const T g_t = self.grad(r, 3);
                            const T t_final = self.value(r, 3);
                            Eigen::Matrix<T, 1, 3> suffix = Eigen::Matrix<T, 1, 3>::Zero();  // sum_{j>k} w_j c_j
                            for (int k = offsets[static_cast<std::size_t>(r) + 1] - 1;
                                 k >= offsets[static_cast<std::size_t>(r)]; --k) {
                              const auto ku = static_cast<std::size_t>(k);
                              const T dk = delta[ku];
                              const T t_next = trans_before[ku] * std::exp(-sv(k, 0) * dk);
                              if (gs) {
                                const T dc = g_c.dot(t_next * cv.row(k) - suffix - t_final * bg);
                                (*gs)(k, 0) += dk * (dc - g_t * t_final);
                              }
                              if (gc) gc->row(k) += w[ku] * g_c;
                              suffix += w[ku] * cv.row(k);
                            }
                          }
                        });
}

template <class T>
struct RadianceSamples {
  Var<T> sigma;  // S x 1, >= 0
  Var<T> color;  // S x 3, in [0, 1]
};

template <class T>
struct RenderResult {
  Var<T> rgb;             // R x 3
  Var<T> transmittance;   // R x 1
  Matrix<T> weights;      // S x 1 compositing weights
};

// Renders rays through an arbitrary field: field(const SampleSet<T>&) must
// return RadianceSamples<T> for every sample.
template <class T, class Field>
RenderResult<T> render_rays(const std::vector<Ray>& rays, Field&& field, const std::array<double, 3>& background,
                            std::mt19937_64* jitter = nullptr) {
  auto samples = stratified_samples<T>(rays, jitter);
  RadianceSamples<T> rs = field(samples);
  RenderResult<T> out;
  auto c = composite<T>(rs.sigma, rs.color, samples.delta, samples.offsets, background, &out.weights);
  out.rgb = ad::slice_cols<T>(c, 0, 3);
  out.transmittance = ad::slice_cols<T>(c, 3, 1);
  return out;
}

template <class T, class Field>
RenderResult<T> render_ray(const Ray& ray, Field&& field, const std::array<double, 3>& background,
                           std::mt19937_64* jitter = nullptr) {
  return render_rays<T>(std::vector<Ray>{ray}, std::forward<Field>(field), background, jitter);
}

// [d, sin(2^k pi d), cos(2^k pi d)] for k < frequencies.
inline ad::Matrix<double> encode_directions(const ad::Matrix<double>& d, int frequencies) {
  ad::Matrix<double> out(d.rows(), 3 + 6 * frequencies);
  out.leftCols(3) = d;
  for (int k = 0; k < frequencies; ++k) {
    const double f = std::pow(2.0, k) * std::numbers::pi;
    out.middleCols(3 + 6 * k, 3) = (f * d.array()).sin().matrix();
    out.middleCols(6 + 6 * k, 3) = (f * d.array()).cos().matrix();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model

struct NerfConfig {
  HashGridConfig grid;
  int attention_channels = 16;
  int hidden = 64;
  int geo_features = 15;
  int dir_frequencies = 4;
  int blendshape_dim = 8;
  int samples = 16;              // per ray inside the scene box
  double density_scale = 10.0;   // sigma = density_scale * softplus(raw)
  double box_margin = 0.15;      // world units around the landmark bounding box
  std::array<double, 3> background = {0.05, 0.05, 0.08};
  double lambda_lpips = 0.1;
  int patch = 32;

  void validate() const {
    grid.validate();
    require(attention_channels >= 1 && hidden >= 1 && geo_features >= 1, ErrorCode::config,
            "nerf widths must be positive");
    require(dir_frequencies >= 0 && blendshape_dim >= 0, ErrorCode::config, "nerf encoding sizes must be >= 0");
    require(samples >= 2, ErrorCode::config, "nerf needs at least 2 samples per ray");
    require(density_scale > 0 && box_margin >= 0, ErrorCode::config, "nerf density_scale > 0, box_margin >= 0");
    require(lambda_lpips >= 0 && patch >= 1, ErrorCode::config, "nerf lambda_lpips >= 0, patch >= 1");
    for (double c : background) require(c >= 0 && c <= 1, ErrorCode::config, "nerf background must lie in [0, 1]");
  }
};

inline nlohmann::json to_json(const NerfConfig& c) {
  return {{"grid", to_json(c.grid)},
          {"attention_channels", c.attention_channels},
          {"hidden", c.hidden},
          {"geo_features", c.geo_features},
          {"dir_frequencies", c.dir_frequencies},
          {"blendshape_dim", c.blendshape_dim},
          {"samples", c.samples},
          {"density_scale", c.density_scale},
          {"box_margin", c.box_margin},
          {"background", c.background},
          {"lambda_lpips", c.lambda_lpips},
          {"patch", c.patch}};
}

inline NerfConfig nerf_config_from_json(const nlohmann::json& j) {
  NerfConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    const auto& v = it.value();
    if (k == "grid") c.grid = hash_grid_config_from_json(v);
    else if (k == "attention_channels") c.attention_channels = v.get<int>();
    else if (k == "hidden") c.hidden = v.get<int>();
    else if (k == "geo_features") c.geo_features = v.get<int>();
    else if (k == "dir_frequencies") c.dir_frequencies = v.get<int>();
    else if (k == "blendshape_dim") c.blendshape_dim = v.get<int>();
    else if (k == "samples") c.samples = v.get<int>();
    else if (k == "density_scale") c.density_scale = v.get<double>();
    else if (k == "box_margin") c.box_margin = v.get<double>();
    else if (k == "background") c.background = v.get<std::array<double, 3>>();
    else if (k == "lambda_lpips") c.lambda_lpips = v.get<double>();
    else if (k == "patch") c.patch = v.get<int>();
    else fail(ErrorCode::config, "unknown nerf config key '" + k + "'");
  }
  c.validate();
  return c;
}

// Per-frame conditioning inputs, one row per frame.
struct NerfCondition {
  ad::Matrix<double> landmarks;    // F x 204, emotional landmarks
  ad::Matrix<double> blendshapes;  // F x blendshape_dim

  ad::Index frames() const { return landmarks.rows(); }
};

inline NerfCondition condition_from_clip(const SyntheticClip& clip) { return {clip.landmarks, clip.blendshapes}; }

template <class T>
struct LandmarkAttentionOutput {
  Var<T> feature;     // F x 204: 68 * w_i * p_i, flattened per frame
  Matrix<T> weights;  // F x 68, rows sum to 1
};

template <class T>
struct ConditionOutput {
  Var<T> rows;        // F x hidden, added to the first field layer
  Matrix<T> weights;  // F x 68 landmark attention
};

// A pixel ray together with the frame it belongs to; rays that miss the scene
// box render the background.
struct PixelRay {
  Ray ray;
  bool hit = false;
  int frame = 0;
};

template <class T>
class NerfModel {
 public:
  NerfModel(NerfConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const auto rows = static_cast<ad::Index>(cfg_.grid.levels) * cfg_.grid.table_size();
    for (const char* p : {"xy", "yz", "xz"})
      store_.add(std::string("nerf.grid.") + p,
                 uniform<T>(rows, cfg_.grid.features, -cfg_.grid.init_scale, cfg_.grid.init_scale, rng));
    const int c = cfg_.attention_channels;
    Conv1d<T>::create(store_, "nerf.att.conv1", 3, c, 3, 1, rng);
    Conv1d<T>::create(store_, "nerf.att.conv2", c, c, 3, 1, rng);
    Conv1d<T>::create(store_, "nerf.att.conv3", c, 1, 3, 1, rng);
    Dense<T>::create(store_, "nerf.cond", kLandmarkDim + cfg_.blendshape_dim, cfg_.hidden, rng);
    Dense<T>::create(store_, "nerf.field.l1", 3 * cfg_.grid.output_dim(), cfg_.hidden, rng);
    Dense<T>::create(store_, "nerf.field.l2", cfg_.hidden, cfg_.hidden, rng);
    Dense<T>::create(store_, "nerf.field.out", cfg_.hidden, 1 + cfg_.geo_features, rng);
    Dense<T>::create(store_, "nerf.color.l1", cfg_.geo_features + 3 + 6 * cfg_.dir_frequencies, cfg_.hidden, rng);
    Dense<T>::create(store_, "nerf.color.l2", cfg_.hidden, cfg_.hidden, rng);
    Dense<T>::create(store_, "nerf.color.out", cfg_.hidden, 3, rng);
    // Scene box and landmark normalization, set by fit_scene.
    store_.add("nerf.box_min", Matrix<T>::Constant(1, 3, T(-1)), false);
    store_.add("nerf.box_max", Matrix<T>::Constant(1, 3, T(1)), false);
    store_.add("nerf.lm_mean", zeros<T>(1, kLandmarkDim), false);
    store_.add("nerf.lm_scale", ones<T>(1, 1), false);
  }

  const NerfConfig& config() const { return cfg_; }
  ParameterStore<T>& store() { return store_; }
  const ParameterStore<T>& store() const { return store_; }

  Vec3 box_min() const { return store_.value("nerf.box_min").row(0).transpose().template cast<double>(); }
  Vec3 box_max() const { return store_.value("nerf.box_max").row(0).transpose().template cast<double>(); }

  // Scene box = landmark bounding box over all frames plus a margin;
  // landmarks are centred per coordinate and scaled by one scalar so the
  // moving coordinates have unit mean variance.
  void fit_scene(const ad::Matrix<double>& landmarks) {
    require(landmarks.rows() >= 1 && landmarks.cols() == kLandmarkDim, ErrorCode::shape_mismatch,
            "fit_scene expects F x 204 landmarks");
    require(landmarks.allFinite(), ErrorCode::non_finite, "at stage 'fit_scene landmarks'");
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity()), hi = -lo;
    for (ad::Index t = 0; t < landmarks.rows(); ++t)
      for (int i = 0; i < kNumLandmarks; ++i) {
        const Vec3 p(landmarks(t, 3 * i), landmarks(t, 3 * i + 1), landmarks(t, 3 * i + 2));
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
      }
    lo.array() -= cfg_.box_margin;
    hi.array() += cfg_.box_margin;
    store_.value("nerf.box_min") = lo.transpose().cast<T>();
    store_.value("nerf.box_max") = hi.transpose().cast<T>();
    const Eigen::RowVectorXd mean = landmarks.colwise().mean();
    double var = 0;
    int moving = 0;
    for (int j = 0; j < kLandmarkDim; ++j) {
      const double v = (landmarks.col(j).array() - mean(j)).square().mean();
      if (v > 1e-12) {
        var += v;
        ++moving;
      }
    }
    store_.value("nerf.lm_mean") = mean.cast<T>();
    store_.value("nerf.lm_scale")(0, 0) = static_cast<T>(moving > 0 ? 1.0 / std::sqrt(var / moving) : 1.0);
  }

  // World positions -> [-1, 1]^3 through the scene box.
  ad::Matrix<double> normalize_positions(const ad::Matrix<double>& world) const {
    const Vec3 lo = box_min(), hi = box_max();
    ad::Matrix<double> out(world.rows(), 3);
    for (int a = 0; a < 3; ++a) out.col(a) = (2.0 * (world.col(a).array() - lo[a]) / (hi[a] - lo[a]) - 1.0).matrix();
    return out;
  }

  Matrix<T> normalize_landmarks(const ad::Matrix<double>& landmarks) const {
    Matrix<T> l = landmarks.cast<T>();
    l.rowwise() -= store_.value("nerf.lm_mean").row(0);
    return l * store_.value("nerf.lm_scale")(0, 0);
  }

  // Three 1-D convolutions over the 68-point axis -> one logit per point ->
  // softmax over points. The feature keeps the landmark scale: uniform
  // weights reproduce the normalized landmark itself.
  LandmarkAttentionOutput<T> landmark_attention(const ad::Matrix<double>& landmarks, bool zero_input = false) const {
    require(landmarks.cols() == kLandmarkDim, ErrorCode::shape_mismatch, "landmark attention expects 204 columns");
    require(landmarks.allFinite(), ErrorCode::non_finite, "at stage 'landmark attention input'");
    const auto l = ad::constant<T>(zero_input ? Matrix<T>::Zero(landmarks.rows(), kLandmarkDim)
                                              : normalize_landmarks(landmarks));
    const Conv1d<T> c1{"nerf.att.conv1", 3, 1}, c2{"nerf.att.conv2", 3, 1}, c3{"nerf.att.conv3", 3, 1};
    LandmarkAttentionOutput<T> out;
    out.weights.resize(landmarks.rows(), kNumLandmarks);
    std::vector<Var<T>> feats;
    for (ad::Index f = 0; f < landmarks.rows(); ++f) {
      auto p = ad::reshape<T>(ad::slice_rows<T>(l, f, 1), kNumLandmarks, 3);
      auto h = ad::relu<T>(c1(store_, p));
      h = ad::relu<T>(c2(store_, h));
      auto w = ad::softmax_rows<T>(ad::reshape<T>(c3(store_, h), 1, kNumLandmarks));
      out.weights.row(f) = w.value();
      auto wcol = ad::reshape<T>(ad::scale<T>(w, static_cast<T>(kNumLandmarks)), kNumLandmarks, 1);
      feats.push_back(ad::reshape<T>(ad::mul_col<T>(p, wcol), 1, kLandmarkDim));
    }
    out.feature = ad::concat_rows<T>(feats);
    ad::check_finite(out.feature, "landmark attention");
    return out;
  }

  // Per-frame rows added to the first hidden layer. zero_landmarks feeds
  // zeros in place of the normalized landmarks (conditioning ablation).
  ConditionOutput<T> condition(const NerfCondition& cond, bool zero_landmarks = false) const {
    require(cond.frames() >= 1, ErrorCode::invalid_argument, "condition needs at least one frame");
    require(cond.blendshapes.rows() == cond.frames() && cond.blendshapes.cols() == cfg_.blendshape_dim,
            ErrorCode::shape_mismatch,
            "blendshapes must be F x " + std::to_string(cfg_.blendshape_dim));
    auto att = landmark_attention(cond.landmarks, zero_landmarks);
    auto x = ad::concat_cols<T>({att.feature, ad::constant<T>(cond.blendshapes.cast<T>())});
    return {Dense<T>{"nerf.cond"}(store_, x), std::move(att.weights)};
  }

  // Field evaluation at world positions; `frame` selects the conditioning row
  // of each sample.
  RadianceSamples<T> field(const ad::Matrix<double>& world, const ad::Matrix<double>& directions,
                           const std::vector<int>& frame, const Var<T>& cond_rows) const {
    require(world.cols() == 3 && directions.cols() == 3 && directions.rows() == world.rows() &&
                static_cast<ad::Index>(frame.size()) == world.rows(),
            ErrorCode::shape_mismatch, "field expects matching S x 3 positions/directions and S frame indices");
    auto fx = tri_plane_encode<T>(store_, "nerf.grid", normalize_positions(world), cfg_.grid);
    auto h = ad::relu<T>(ad::add<T>(Dense<T>{"nerf.field.l1"}(store_, fx), ad::gather_rows<T>(cond_rows, frame)));
    h = ad::relu<T>(Dense<T>{"nerf.field.l2"}(store_, h));
    auto o = Dense<T>{"nerf.field.out"}(store_, h);
    RadianceSamples<T> out;
    out.sigma = ad::scale<T>(ad::softplus<T>(ad::slice_cols<T>(o, 0, 1)), static_cast<T>(cfg_.density_scale));
    auto geo = ad::slice_cols<T>(o, 1, cfg_.geo_features);
    auto denc = ad::constant<T>(encode_directions(directions, cfg_.dir_frequencies).cast<T>());
    auto c = ad::relu<T>(Dense<T>{"nerf.color.l1"}(store_, ad::concat_cols<T>({geo, denc})));
    c = ad::relu<T>(Dense<T>{"nerf.color.l2"}(store_, c));
    out.color = ad::sigmoid<T>(Dense<T>{"nerf.color.out"}(store_, c));
    ad::check_finite(out.sigma, "field density");
    ad::check_finite(out.color, "field color");
    return out;
  }

  // Ray through the scene box for one pixel.
  PixelRay pixel_ray(const HeadPose& pose, const Intrinsics& k, double u, double v, int frame) const {
    const CameraRay cr = realtalk::pixel_ray(pose, k, u, v);
    PixelRay pr;
    pr.frame = frame;
    pr.ray.origin = cr.origin;
    pr.ray.direction = cr.direction;
    pr.ray.samples = cfg_.samples;
    if (auto seg = intersect_box(cr.origin, cr.direction, box_min(), box_max())) {
      pr.hit = true;
      pr.ray.t_near = seg->first;
      pr.ray.t_far = seg->second;
    }
    return pr;
  }

  // Renders pixel rays (hits through the field, misses as background).
  // Returns R x 3 colors; `transmittance` (R x 1) is filled when requested.
  Var<T> render_pixels(const std::vector<PixelRay>& px, const Var<T>& cond_rows, std::mt19937_64* jitter = nullptr,
                       Var<T>* transmittance = nullptr) const {
    std::vector<Ray> rays;
    std::vector<int> ray_frame;
    std::vector<int> pick(px.size());
    for (std::size_t i = 0; i < px.size(); ++i) {
      require(px[i].frame >= 0 && px[i].frame < cond_rows.rows(), ErrorCode::invalid_argument,
              "pixel ray frame index out of range");
      if (px[i].hit) {
        pick[i] = static_cast<int>(rays.size());
        rays.push_back(px[i].ray);
        ray_frame.push_back(px[i].frame);
      }
    }
    const int misses = static_cast<int>(rays.size());
    for (std::size_t i = 0; i < px.size(); ++i)
      if (!px[i].hit) pick[i] = misses;
    Matrix<T> bg_row(1, 4);
    bg_row << static_cast<T>(cfg_.background[0]), static_cast<T>(cfg_.background[1]),
        static_cast<T>(cfg_.background[2]), T(1);
    Var<T> table = ad::constant<T>(bg_row);
    if (!rays.empty()) {
      auto field_fn = [&](const SampleSet<T>& s) {
        std::vector<int> frame(s.ray.size());
        for (std::size_t k = 0; k < s.ray.size(); ++k) frame[k] = ray_frame[static_cast<std::size_t>(s.ray[k])];
        return field(s.positions, s.directions, frame, cond_rows);
      };
      auto rr = render_rays<T>(rays, field_fn, cfg_.background, jitter);
      table = ad::concat_rows<T>({ad::concat_cols<T>({rr.rgb, rr.transmittance}), table});
    }
    auto all = ad::gather_rows<T>(table, pick);
    if (transmittance) *transmittance = ad::slice_cols<T>(all, 3, 1);
    return ad::slice_cols<T>(all, 0, 3);
  }

 private:
  NerfConfig cfg_;
  ParameterStore<T> store_;
};

// One ray per pixel at pixel centres, deterministic midpoint samples.
template <class T>
Image render_frame(const NerfModel<T>& model, const HeadPose& pose, const Intrinsics& intrinsics,
                   const ad::Matrix<double>& landmarks, const ad::Matrix<double>& blendshapes, int resolution,
                   bool zero_landmarks = false, Image* opacity = nullptr) {
  pose.validate();
  require(resolution >= 1, ErrorCode::invalid_argument, "resolution must be positive");
  require(landmarks.rows() == 1 && blendshapes.rows() == 1, ErrorCode::shape_mismatch,
          "render_frame conditions on exactly one frame");
  ad::NoGradGuard ng;
  const Intrinsics k = intrinsics.width == resolution ? intrinsics : intrinsics.resized(resolution);
  auto cond = model.condition({landmarks, blendshapes}, zero_landmarks);
  Image img(k.width, k.height);
  if (opacity) *opacity = Image(k.width, k.height);
  const int chunk = 4096;
  std::vector<PixelRay> px;
  auto flush = [&](int first) {
    Var<T> trans;
    auto rgb = model.render_pixels(px, cond.rows, nullptr, &trans);
    for (std::size_t i = 0; i < px.size(); ++i) {
      const int p = first + static_cast<int>(i);
      for (int c = 0; c < 3; ++c)
        img.rgb[static_cast<std::size_t>(p) * 3 + c] =
            std::clamp(static_cast<float>(rgb.value()(static_cast<ad::Index>(i), c)), 0.0f, 1.0f);
      if (opacity)
        for (int c = 0; c < 3; ++c)
          opacity->rgb[static_cast<std::size_t>(p) * 3 + c] =
              1.0f - static_cast<float>(trans.value()(static_cast<ad::Index>(i), 0));
    }
    px.clear();
  };
  int first = 0;
  for (int v = 0; v < k.height; ++v)
    for (int u = 0; u < k.width; ++u) {
      px.push_back(model.pixel_ray(pose, k, u + 0.5, v + 0.5, 0));
      if (static_cast<int>(px.size()) == chunk) {
        flush(first);
        first = v * k.width + u + 1;
      }
    }
  if (!px.empty()) flush(first);
  return img;
}

// Renders every frame of a clip from its own pose and conditioning.
template <class T>
std::vector<Image> render_clip(const NerfModel<T>& model, const SyntheticClip& clip, bool zero_landmarks = false) {
  std::vector<Image> out;
  for (int t = 0; t < clip.length(); ++t)
    out.push_back(render_frame(model, clip.poses[static_cast<std::size_t>(t)], clip.intrinsics, clip.landmarks.row(t),
                               clip.blendshapes.row(t), clip.resolution, zero_landmarks));
  return out;
}

// ---------------------------------------------------------------------------
// Losses

// Pluggable perceptual distance between a predicted patch (differentiable)
// and a target patch, both (h*w) x 3.
template <class T>
class PerceptualBackend {
 public:
  virtual ~PerceptualBackend() = default;
  virtual Var<T> distance(const Var<T>& pred, const Matrix<T>& target, int height, int width) const = 0;
  virtual std::string name() const = 0;
};

// Fixed random 3-layer conv feature extractor. Features are unit-normalized
// per pixel across channels, then compared by mean squared difference.
template <class T>
class RandomConvPerceptual : public PerceptualBackend<T> {
 public:
  explicit RandomConvPerceptual(std::uint64_t seed, std::array<int, 3> channels = {8, 16, 16}) {
    std::mt19937_64 rng(seed);
    int in = 3;
    for (int c : channels) {
      weights_.push_back(he_normal<T>(9 * in, c, rng));
      in = c;
    }
  }

  Var<T> distance(const Var<T>& pred, const Matrix<T>& target, int height, int width) const override {
    require(pred.rows() == static_cast<ad::Index>(height) * width && pred.cols() == 3 && target.rows() == pred.rows() &&
                target.cols() == 3,
            ErrorCode::shape_mismatch, "perceptual patches must both be (h*w) x 3");
    auto a = pred;
    auto b = ad::constant<T>(target);
    int h = height, w = width;
    std::vector<Var<T>> terms;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      const int stride = l == 0 ? 1 : 2;
      int oh = 0, ow = 0;
      auto wl = ad::constant<T>(weights_[l]);
      a = ad::relu<T>(ad::matmul<T>(ad::im2col_2d<T>(a, h, w, 3, stride, 1, &oh, &ow), wl));
      {
        ad::NoGradGuard ng;
        b = ad::relu<T>(ad::matmul<T>(ad::im2col_2d<T>(b, h, w, 3, stride, 1), wl));
      }
      h = oh;
      w = ow;
      auto unit = [](const Var<T>& f) {
        return ad::mul_col<T>(f, ad::rsqrt<T>(ad::add_scalar<T>(ad::sum_cols<T>(ad::square<T>(f)), T(1e-6))));
      };
      terms.push_back(ad::mean<T>(ad::sum_cols<T>(ad::square<T>(ad::sub<T>(unit(a), unit(b))))));
    }
    Var<T> total = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) total = ad::add<T>(total, terms[i]);
    return ad::scale<T>(total, T(1) / static_cast<T>(terms.size()));
  }

  std::string name() const override { return "random_conv"; }

 private:
  std::vector<Matrix<T>> weights_;
};

enum class NerfStage { coarse, fine };

template <class T>
struct NerfLossTerms {
  Var<T> total;
  double color = 0;       // sum over pixels of ||C - C_hat||^2
  double perceptual = 0;  // lambda-weighted
};

// coarse: sum ||C - C_hat||^2 over pixels. fine: the same over a patch plus
// lambda * perceptual(patch_hat, patch); pixels are then the patch in
// row-major order.
template <class T>
NerfLossTerms<T> nerf_loss(const Var<T>& pred, const Matrix<T>& target, NerfStage stage,
                           const PerceptualBackend<T>* backend = nullptr, int patch_h = 0, int patch_w = 0,
                           double lambda = 0.1) {
  require(pred.rows() == target.rows() && pred.cols() == 3 && target.cols() == 3, ErrorCode::shape_mismatch,
          "nerf_loss expects matching R x 3 pixel sets");
  NerfLossTerms<T> out;
  auto color = ad::sum<T>(ad::square<T>(ad::sub<T>(pred, ad::constant<T>(target))));
  out.color = static_cast<double>(color.item());
  out.total = color;
  if (stage == NerfStage::fine) {
    require(backend != nullptr, ErrorCode::config,
            "fine stage needs a perceptual backend; configure one (e.g. \"perceptual\": \"random_conv\") "
            "or train the coarse stage only");
    // The first patch_h * patch_w rows form the patch; any further rows only
    // enter the color term.
    const ad::Index pn = static_cast<ad::Index>(patch_h) * patch_w;
    require(patch_h >= 1 && patch_w >= 1 && pn <= pred.rows(), ErrorCode::shape_mismatch,
            "fine stage pixels must start with the declared patch");
    auto p = ad::scale<T>(backend->distance(ad::slice_rows<T>(pred, 0, pn), target.topRows(pn), patch_h, patch_w),
                          static_cast<T>(lambda));
    out.perceptual = static_cast<double>(p.item());
    out.total = ad::add<T>(color, p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct NerfTrainConfig {
  int coarse_steps = 6000;
  int fine_steps = 1000;
  int rays_per_batch = 1024;
  double lr = 5e-3;
  double lr_final_ratio = 0.1;  // exponential decay to lr * ratio at the last step
  int eval_every = 500;
  double target_psnr = 0;  // stop early once reached (0 = never)
  std::uint64_t seed = 1;
  bool zero_landmarks = false;  // conditioning ablation
};

struct NerfCurvePoint {
  int step = 0;
  double psnr = 0;  // mean per-frame training-view PSNR
  double loss = 0;  // last training loss
};

struct NerfTrainResult {
  std::vector<NerfCurvePoint> curve;
  bool diverged = false;
  std::string message;
  int steps_completed = 0;
  double final_psnr = 0;
};

template <class T>
double training_view_psnr(const NerfModel<T>& model, const SyntheticClip& clip, bool zero_landmarks = false) {
  const auto frames = render_clip(model, clip, zero_landmarks);
  double acc = 0;
  for (std::size_t t = 0; t < frames.size(); ++t) acc += metrics::psnr(frames[t], clip.frames[t]);
  return acc / static_cast<double>(frames.size());
}

// Stage 1 samples random ray batches over every frame with the color loss;
// stage 2 renders random patch x patch crops with color + perceptual loss.
template <class T>
NerfTrainResult train_nerf(NerfModel<T>& model, const SyntheticClip& clip, const NerfTrainConfig& tc,
                           const PerceptualBackend<T>* backend = nullptr) {
  const auto& cfg = model.config();
  require(clip.length() >= 1 && static_cast<int>(clip.frames.size()) == clip.length() &&
              static_cast<int>(clip.poses.size()) == clip.length() && clip.blendshapes.rows() == clip.length(),
          ErrorCode::invalid_argument, "train_nerf needs frames, poses, landmarks and blendshapes for every frame");
  require(tc.coarse_steps >= 0 && tc.fine_steps >= 0 && tc.rays_per_batch >= 1 && tc.eval_every >= 1 && tc.lr >= 0 &&
              tc.lr_final_ratio > 0 && tc.lr_final_ratio <= 1,
          ErrorCode::config, "train_nerf schedule");
  require(tc.fine_steps == 0 || backend != nullptr, ErrorCode::config,
          "fine stage needs a perceptual backend; set \"perceptual\": \"random_conv\" or fine_steps = 0");
  const int res = clip.resolution;
  require(tc.fine_steps == 0 || cfg.patch <= res, ErrorCode::config, "patch larger than the frame");
  for (const auto& p : clip.poses) p.validate();
  model.fit_scene(clip.landmarks);

  // Every pixel ray of every frame, with its ground-truth color.
  std::vector<PixelRay> rays;
  Matrix<T> gt(static_cast<ad::Index>(clip.length()) * res * res, 3);
  std::vector<std::size_t> hits;
  for (int t = 0; t < clip.length(); ++t) {
    const auto& img = clip.frames[static_cast<std::size_t>(t)];
    require(img.width == res && img.height == res, ErrorCode::shape_mismatch, "frame resolution");
    for (int v = 0; v < res; ++v)
      for (int u = 0; u < res; ++u) {
        const std::size_t i = rays.size();
        rays.push_back(model.pixel_ray(clip.poses[static_cast<std::size_t>(t)], clip.intrinsics, u + 0.5, v + 0.5, t));
        if (rays.back().hit) hits.push_back(i);
        for (int c = 0; c < 3; ++c) gt(static_cast<ad::Index>(i), c) = img.at(u, v, c);
      }
  }
  require(!hits.empty(), ErrorCode::degenerate, "no pixel ray intersects the scene box");
  const NerfCondition cond = condition_from_clip(clip);

  Adam<T> adam(AdamConfig{tc.lr});
  std::mt19937_64 rng(tc.seed);
  NerfTrainResult result;
  ParameterStore<T> last_good = model.store().clone();
  double last_loss = std::nan("");
  auto evaluate = [&](int step) {
    const double p = training_view_psnr(model, clip, tc.zero_landmarks);
    result.curve.push_back({step, p, last_loss});
    result.final_psnr = p;
    last_good = model.store().clone();
    return p;
  };
  if (evaluate(0) >= tc.target_psnr && tc.target_psnr > 0) return result;

  const int total = tc.coarse_steps + tc.fine_steps;
  std::uniform_int_distribution<std::size_t> pick_hit(0, hits.size() - 1);
  std::uniform_int_distribution<int> pick_frame(0, clip.length() - 1);
  std::uniform_int_distribution<int> pick_corner(0, res - cfg.patch);
  for (int step = 1; step <= total; ++step) {
    const bool fine = step > tc.coarse_steps;
    std::vector<PixelRay> batch;
    Matrix<T> target;
    // Fine steps put one patch of one frame first; both stages then add
    // random hit rays over all frames so no frame is forgotten.
    const int patch_rows = fine ? cfg.patch * cfg.patch : 0;
    target.resize(patch_rows + tc.rays_per_batch, 3);
    batch.reserve(static_cast<std::size_t>(target.rows()));
    if (fine) {
      const int t = pick_frame(rng), x0 = pick_corner(rng), y0 = pick_corner(rng);
      for (int y = 0; y < cfg.patch; ++y)
        for (int x = 0; x < cfg.patch; ++x) {
          const std::size_t i = (static_cast<std::size_t>(t) * res + (y0 + y)) * res + (x0 + x);
          target.row(static_cast<ad::Index>(batch.size())) = gt.row(static_cast<ad::Index>(i));
          batch.push_back(rays[i]);
        }
    }
    for (int b = 0; b < tc.rays_per_batch; ++b) {
      const auto i = hits[pick_hit(rng)];
      target.row(static_cast<ad::Index>(batch.size())) = gt.row(static_cast<ad::Index>(i));
      batch.push_back(rays[i]);
    }
    try {
      adam.set_lr(tc.lr * std::pow(tc.lr_final_ratio, static_cast<double>(step - 1) / std::max(1, total - 1)));
      model.store().zero_grad();
      auto c = model.condition(cond, tc.zero_landmarks);
      auto pred = model.render_pixels(batch, c.rows, &rng);
      auto loss = nerf_loss<T>(pred, target, fine ? NerfStage::fine : NerfStage::coarse, backend, cfg.patch, cfg.patch,
                               cfg.lambda_lpips);
      last_loss = static_cast<double>(loss.total.item());
      require(std::isfinite(last_loss), ErrorCode::diverged, "loss is not finite");
      ad::backward(loss.total);
      adam.step(model.store());
      result.steps_completed = step;
      if (step % tc.eval_every == 0 || step == total) {
        if (evaluate(step) >= tc.target_psnr && tc.target_psnr > 0) break;
      }
    } catch (const Error& e) {
      if (e.code() != ErrorCode::diverged && e.code() != ErrorCode::non_finite) throw;
      model.store().copy_values_from(last_good);
      result.diverged = true;
      result.message = "diverged at step " + std::to_string(step) + ": " + e.what();
      break;
    }
  }
  return result;
}

template <class T>
io::Checkpoint nerf_checkpoint(const NerfModel<T>& model) {
  return io::to_checkpoint(model.store(), nlohmann::json{{"kind", "nerf"}, {"model", to_json(model.config())}});
}

template <class T>
NerfModel<T> nerf_from_checkpoint(const io::Checkpoint& ckpt) {
  require(ckpt.config.value("kind", std::string()) == "nerf", ErrorCode::incompatible_checkpoint,
          "checkpoint is not a nerf checkpoint");
  NerfModel<T> model(nerf_config_from_json(ckpt.config.at("model")), 0);
  io::restore_store(model.store(), ckpt);
  return model;
}

}  // namespace realtalk
