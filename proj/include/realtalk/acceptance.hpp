#pragma once

// The ten acceptance criteria as runnable checks, shared by `realtalk accept`
// and the acceptance test binary. Each criterion records its measured
// quantities, so a failure says by how much.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "realtalk/pipeline.hpp"

namespace realtalk::acceptance {

using json = nlohmann::json;
namespace fs = std::filesystem;
using M = ad::Matrix<double>;

class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    passed_ = passed_ && ok;
    note(ok ? what : "FAILED " + what);
  }
  void lt(const std::string& name, double v, double bound) { expect(v < bound, name + " " + fmt(v) + " < " + fmt(bound)); }
  void le(const std::string& name, double v, double bound) { expect(v <= bound, name + " " + fmt(v) + " <= " + fmt(bound)); }
  void gt(const std::string& name, double v, double bound) { expect(v > bound, name + " " + fmt(v) + " > " + fmt(bound)); }
  void ge(const std::string& name, double v, double bound) { expect(v >= bound, name + " " + fmt(v) + " >= " + fmt(bound)); }
  void note(const std::string& what) {
    if (!detail_.empty()) detail_ += "; ";
    detail_ += what;
  }
  bool passed() const { return passed_; }
  const std::string& detail() const { return detail_; }

  static std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(4) << v;
    return os.str();
  }

 private:
  bool passed_ = true;
  std::string detail_;
};

struct Context {
  fs::path workdir;      // scratch space for the end-to-end criterion
  fs::path config_file;  // shipped configs/default.json
  std::ostream* log = nullptr;
};

struct Criterion {
  int id;
  std::string name;
  bool training;
  std::function<void(Checks&, const Context&)> run;
};

struct CriterionResult {
  int id = 0;
  std::string name;
  bool passed = false;
  double seconds = 0;
  std::string detail;
};

namespace detail {

template <class T>
ad::Matrix<T> randn(ad::Index r, ad::Index c, std::mt19937_64& rng, double s = 1.0) {
  std::normal_distribution<double> n(0.0, s);
  ad::Matrix<T> m(r, c);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(n(rng));
  return m;
}

// Moves trainable parameters off their init so nothing sits at a special
// value (identity flow, zero heads). Flow mixing matrices get 1/sqrt(Z).
template <class T>
void perturb(ParameterStore<T>& store, std::uint64_t seed, double s,
             const std::function<bool(const std::string&)>& select = {}) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, s);
  for (auto& e : store.entries()) {
    if (!e.trainable || (select && !select(e.name))) continue;
    auto& v = store.value(e.name);
    const double k = e.name.find(".mix") != std::string::npos ? 1.0 / std::sqrt(double(v.cols())) : 1.0;
    for (ad::Index i = 0; i < v.size(); ++i) v.data()[i] += static_cast<T>(k * n(rng));
  }
}

template <class T>
void perturb_flow(VaeModel<T>& model, std::uint64_t seed) {
  perturb(model.store(), seed, 0.1, [](const std::string& n) { return n.rfind("flow", 0) == 0; });
}

inline VaeConfig small_vae() {
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

inline LdmConfig small_ldm() {
  LdmConfig c;
  c.hidden = 16;
  c.heads = 4;
  c.ffn = 24;
  c.window = 4;
  return c;
}

inline NerfConfig small_nerf() {
  NerfConfig c;
  c.grid.levels = 4;
  c.grid.features = 2;
  c.grid.log2_table = 8;
  c.grid.base_resolution = 4;
  c.grid.finest_resolution = 32;
  c.attention_channels = 4;
  c.hidden = 8;
  c.geo_features = 3;
  c.dir_frequencies = 2;
  c.samples = 6;
  return c;
}

// Direct-loop SSIM: Gaussian-weighted statistics of every fully contained
// 11x11 window of the luminance image.
inline double reference_ssim(const Image& a, const Image& b) {
  const int n = 11;
  const double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double kernel[11][11];
  double total = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      kernel[i][j] = std::exp(-((i - 5.0) * (i - 5.0) + (j - 5.0) * (j - 5.0)) / (2 * sigma * sigma));
      total += kernel[i][j];
    }
  auto gray = [](const Image& im, int x, int y) {
    return 0.299 * im.at(x, y, 0) + 0.587 * im.at(x, y, 1) + 0.114 * im.at(x, y, 2);
  };
  double sum = 0;
  int count = 0;
  for (int y0 = 0; y0 + n <= a.height; ++y0)
    for (int x0 = 0; x0 + n <= a.width; ++x0) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          const double w = kernel[i][j] / total;
          const double pa = gray(a, x0 + j, y0 + i), pb = gray(b, x0 + j, y0 + i);
          ma += w * pa;
          mb += w * pb;
          saa += w * pa * pa;
          sbb += w * pb * pb;
          sab += w * pa * pb;
        }
      const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
      sum += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  return sum / count;
}

inline bool same_bytes(const fs::path& a, const fs::path& b) {
  return fs::exists(a) && fs::exists(b) && io::read_bytes(a) == io::read_bytes(b);
}

struct GradPair {
  GradCheckReport f64, f32;
};

inline void record(Checks& c, const std::string& module, const GradPair& g) {
  auto line = [&](const GradCheckReport& r, double tol, const char* prec) {
    const bool ok = r.passed(tol) && r.checked >= 20;
    c.expect(ok, module + " " + prec + " " + Checks::fmt(r.max_rel_error) + " over " + std::to_string(r.checked) +
                     (ok ? "" : " (worst " + r.worst_coordinate + ")"));
  };
  line(g.f64, 1e-4, "f64");
  line(g.f32, 1e-3, "f32");
}

// Mixed checks compare float analytic gradients with double finite
// differences. Parameters feeding batch norm or a softmax shift have a true
// gradient of 0, so relative errors below abs_floor 1e-5 are float noise.
inline GradCheckOptions options(std::size_t coords, std::function<bool(const std::string&)> include = {},
                                double floor = 1e-6) {
  GradCheckOptions o;
  o.min_coordinates = coords;
  o.include = std::move(include);
  o.abs_floor = floor;
  return o;
}

// Biases directly before batch norm: a per-channel constant is removed by the
// normalization, so their true gradient is exactly 0 and a relative error
// would only compare rounding noise. They are checked for a zero gradient
// instead.
inline bool feeds_batch_norm(const std::string& n) {
  return n.rfind("audio.", 0) == 0 && n.size() > 8 && n.compare(n.size() - 8, 8, ".conv1.b") == 0;
}

// max |dL/dw| over parameters passing `select`, relative to the largest
// gradient of any trainable parameter.
inline double relative_gradient(ParameterStore<double>& store, const std::function<Var<double>()>& loss,
                                const std::function<bool(const std::string&)>& select) {
  store.zero_grad();
  ad::backward(loss());
  double sel = 0, all = 0;
  for (auto& e : store.entries()) {
    if (!e.trainable || !e.var.node()->has_grad()) continue;
    const double g = e.var.grad().cwiseAbs().maxCoeff();
    all = std::max(all, g);
    if (select(e.name)) sel = std::max(sel, g);
  }
  store.zero_grad();
  return all > 0 ? sel / all : 0.0;
}

inline void record_zero(Checks& c, const std::string& module, double rel) {
  c.lt(module + " batch-norm-fed bias |grad| / max|grad|", rel, 1e-9);
}

template <class T>
struct AudioSetup {
  ParameterStore<T> store;
  AudioFrontend<T> frontend;
  M content, pitch, wh, wp;
  AudioSetup() {
    std::mt19937_64 rng(31);
    frontend = AudioFrontend<T>::create(store, "audio", 6, 3, AudioEncoderConfig{5, 3}, rng);
    perturb(store, 32, 0.2);
    std::mt19937_64 data(33);
    content = randn<double>(12, 6, data);
    pitch = randn<double>(12, 3, data);
    wh = randn<double>(12, 5, data);
    wp = randn<double>(12, 5, data);
  }
  Var<T> loss() {
    auto enc = frontend.encode(store, ad::constant<T>(content.cast<T>()), ad::constant<T>(pitch.cast<T>()),
                               ad::BatchNormMode::batch_frozen);
    return ad::add<T>(ad::sum<T>(ad::mul<T>(enc.h, ad::constant<T>(wh.cast<T>()))),
                      ad::sum<T>(ad::mul<T>(enc.p, ad::constant<T>(wp.cast<T>()))));
  }
};

inline GradPair grad_audio(double* bn_bias_rel = nullptr) {
  AudioSetup<double> d;
  AudioSetup<float> f;
  d.store.copy_values_from(f.store);
  auto include = [](const std::string& n) { return !feeds_batch_norm(n); };
  GradPair g;
  g.f64 = grad_check<double>(d.store, [&] { return d.loss(); }, options(200, include));
  g.f32 = grad_check<float, double>(f.store, [&] { return f.loss(); }, d.store, [&] { return d.loss(); },
                                    options(200, include, 1e-5));
  if (bn_bias_rel) *bn_bias_rel = relative_gradient(d.store, [&] { return d.loss(); }, feeds_batch_norm);
  return g;
}

// part 0: VAE objective (audio encoders, encoder, decoder, flow);
// part 1: sync scorer through its own loss; part 2: flow prior density.
template <class T>
struct VaeSetup {
  VaeModel<T> model;
  SyntheticClip clip;
  M eps, z;
  realtalk::detail::SyncBatch batch;
  VaeSetup() : model(small_vae(), 22) {
    SyntheticFaceGenerator gen(SynthConfig{});
    clip = gen.generate_clip(21, Emotion::neutral, 16, 32);
    model.fit_normalization({&clip});
    perturb_flow(model, 23);
    std::mt19937_64 rng(24);
    eps = randn<double>(16, 4, rng);
    z = randn<double>(8, 4, rng);
    batch = realtalk::detail::make_sync_batch(16, model.config().sync_window, rng);
  }
  Var<T> loss(int part) {
    if (part == 2) return ad::sum<T>(model.prior_log_prob(ad::constant<T>(z.cast<T>())));
    auto r = realtalk::detail::vae_objective<T>(model, clip.landmarks.cast<T>(), clip.content.cast<T>(),
                                                clip.pitch.cast<T>(), eps.cast<T>(), batch,
                                                ad::BatchNormMode::batch_frozen);
    return part == 0 ? r.terms.total : r.scorer;
  }
};

inline GradPair grad_vae(int part, double* bn_bias_rel = nullptr) {
  std::function<bool(const std::string&)> include;
  // The scorer is read as constants by the VAE objective.
  if (part == 0) include = [](const std::string& n) { return n.rfind("sync.", 0) != 0 && !feeds_batch_norm(n); };
  if (part == 1) include = [](const std::string& n) { return n.rfind("sync.", 0) == 0; };
  if (part == 2) include = [](const std::string& n) { return n.rfind("flow", 0) == 0; };
  VaeSetup<double> d;
  VaeSetup<float> f;
  d.model.store().copy_values_from(f.model.store());
  GradPair g;
  g.f64 = grad_check<double>(d.model.store(), [&] { return d.loss(part); }, options(300, include));
  g.f32 = grad_check<float, double>(f.model.store(), [&] { return f.loss(part); }, d.model.store(),
                                    [&] { return d.loss(part); }, options(300, include, 1e-5));
  if (bn_bias_rel) *bn_bias_rel = relative_gradient(d.model.store(), [&] { return d.loss(part); }, feeds_batch_norm);
  return g;
}

template <class T>
struct LdmSetup {
  LdmModel<T> model;
  M l, target;
  std::vector<int> labels{1, 1, 1, 1, 6, 6, 6, 6};
  LdmSetup() : model(small_ldm(), 15, false) {
    std::mt19937_64 rng(14);
    l = randn<double>(8, kLandmarkDim, rng, 0.5);
    target = randn<double>(8, kLandmarkDim, rng, 0.5);
  }
  Var<T> loss() {
    auto lv = ad::constant<T>(l.cast<T>());
    auto out = model.forward(lv, labels, {4, 4}, LdmMode::frozen_stats_no_dropout);
    return ldm_loss<T>(ad::add<T>(lv, out.delta), ad::constant<T>(target.cast<T>()));
  }
};

inline GradPair grad_ldm() {
  LdmSetup<double> d;
  LdmSetup<float> f;
  d.model.store().copy_values_from(f.model.store());
  GradPair g;
  g.f64 = grad_check<double>(d.model.store(), [&] { return d.loss(); }, options(300));
  g.f32 = grad_check<float, double>(f.model.store(), [&] { return f.loss(); }, d.model.store(),
                                    [&] { return d.loss(); }, options(300, {}, 1e-5));
  return g;
}

// Pixel rays with 3..8 samples through the whole conditioned field.
template <class T>
struct NerfSetup {
  NerfModel<T> model;
  SyntheticClip clip;
  std::vector<PixelRay> px;
  M target;
  NerfSetup() : model(small_nerf(), 16) {
    SyntheticFaceGenerator gen(SynthConfig{});
    clip = gen.generate_clip(3, Emotion::happy, 2, 32);
    model.fit_scene(clip.landmarks);
    perturb(model.store(), 17, 0.3);
    for (int t = 0; t < 2; ++t)
      for (auto [u, v] : {std::pair{14.5, 15.5}, {17.5, 12.5}, {16.5, 19.5}}) {
        px.push_back(model.pixel_ray(clip.poses[static_cast<std::size_t>(t)], clip.intrinsics, u, v, t));
        px.back().ray.samples = 2 + static_cast<int>(px.size());
      }
    std::mt19937_64 rng(18);
    target = randn<double>(static_cast<ad::Index>(px.size()), 3, rng).cwiseAbs();
  }
  Var<T> loss() {
    auto c = model.condition(condition_from_clip(clip));
    return nerf_loss<T>(model.render_pixels(px, c.rows), target.cast<T>(), NerfStage::coarse).total;
  }
};

inline GradPair grad_nerf(const std::string& prefix) {
  std::function<bool(const std::string&)> include = [prefix](const std::string& n) {
    // The last attention bias shifts every logit equally; its true gradient is 0.
    return n.rfind(prefix, 0) == 0 && n != "nerf.att.conv3.b";
  };
  NerfSetup<double> d;
  NerfSetup<float> f;
  d.model.store().copy_values_from(f.model.store());
  GradPair g;
  g.f64 = grad_check<double>(d.model.store(), [&] { return d.loss(); }, options(300, include));
  g.f32 = grad_check<float, double>(f.model.store(), [&] { return f.loss(); }, d.model.store(),
                                    [&] { return d.loss(); }, options(300, include, 1e-5));
  return g;
}

template <class T>
struct CompositeSetup {
  ParameterStore<T> store;
  std::vector<T> delta;
  std::vector<int> offsets{0, 2, 7, 13};
  M weights;
  CompositeSetup() {
    std::mt19937_64 rng(15);
    store.add("sigma", uniform<T>(13, 1, 0.1, 4.0, rng));
    store.add("color", uniform<T>(13, 3, 0.0, 1.0, rng));
    for (int i = 0; i < 13; ++i) delta.push_back(static_cast<T>(std::uniform_real_distribution<double>(0.05, 0.3)(rng)));
    weights = randn<double>(3, 4, rng);
  }
  Var<T> loss() {
    auto out = composite<T>(store.get("sigma"), store.get("color"), delta, offsets, {0.2, 0.5, 0.7});
    return ad::sum<T>(ad::mul<T>(out, ad::constant<T>(weights.cast<T>())));
  }
};

inline GradPair grad_composite() {
  CompositeSetup<double> d;
  CompositeSetup<float> f;
  d.store.copy_values_from(f.store);
  for (std::size_t i = 0; i < d.delta.size(); ++i) d.delta[i] = f.delta[i];
  GradPair g;
  g.f64 = grad_check<double>(d.store, [&] { return d.loss(); }, options(52));
  g.f32 = grad_check<float, double>(f.store, [&] { return f.loss(); }, d.store, [&] { return d.loss(); },
                                    options(52, {}, 1e-5));
  return g;
}

// Small end-to-end configuration for the determinism criterion.
inline json toy_pipeline_config(const fs::path& root) {
  json cfg = pipeline::default_config();
  cfg["resolution"] = 32;
  cfg["paths"] = {{"data", (root / "data").string()},
                  {"checkpoints", (root / "checkpoints").string()},
                  {"output", (root / "output").string()}};
  cfg["synth"]["sentences"] = 2;
  cfg["synth"]["frames"] = 24;
  cfg["synth"]["emotions"] = {"neutral", "happy", "sad"};
  cfg["vae"]["model"] = to_json(small_vae());
  cfg["vae"]["train"]["steps"] = 40;
  cfg["vae"]["train"]["log_every"] = 20;
  cfg["ldm"]["model"] = to_json(small_ldm());
  cfg["ldm"]["train"]["steps"] = 200;
  cfg["ldm"]["train"]["batch_windows"] = 4;
  cfg["ldm"]["train"]["log_every"] = 100;
  cfg["nerf"]["model"] = to_json(small_nerf());
  cfg["nerf"]["train"]["coarse_steps"] = 60;
  cfg["nerf"]["train"]["fine_steps"] = 10;
  cfg["nerf"]["train"]["rays_per_batch"] = 256;
  cfg["nerf"]["train"]["eval_every"] = 70;
  cfg["nerf"]["clips"] = {0, 1};
  cfg["nerf"]["frames_per_clip"] = 8;
  cfg["infer"]["clip"] = 1;
  cfg["infer"]["emotion"] = "happy";
  cfg["eval"]["clip"] = 1;
  return cfg;
}

}  // namespace detail

// ---------------------------------------------------------------------------

inline void flow_round_trip(Checks& c, const Context&) {
  std::mt19937_64 rng(9);
  VaeModel<float> model(VaeConfig{}, 10);
  detail::perturb_flow(model, 11);
  auto z = detail::randn<float>(1000, 16, rng);
  auto u = model.flow_forward(ad::constant<float>(z)).u.value();
  c.gt("flow moves latents max|u-z|", static_cast<double>((u - z).cwiseAbs().maxCoeff()), 1e-2);
  c.lt("max|z-inverse(forward(z))|", static_cast<double>((model.flow_inverse(u) - z).cwiseAbs().maxCoeff()), 1e-5);

  VaeConfig small = detail::small_vae();
  VaeModel<double> dm(small, 13);
  detail::perturb_flow(dm, 14);
  double worst = 0;
  for (int trial = 0; trial < 10; ++trial) {
    M zz = detail::randn<double>(1, 4, rng);
    const double ld = dm.flow_forward(ad::constant<double>(zz)).log_det.item();
    M jac(4, 4);
    const double h = 1e-5;
    for (int j = 0; j < 4; ++j) {
      M zp = zz, zm = zz;
      zp(0, j) += h;
      zm(0, j) -= h;
      jac.col(j) = ((dm.flow_forward(ad::constant<double>(zp)).u.value() -
                     dm.flow_forward(ad::constant<double>(zm)).u.value()) /
                    (2 * h))
                       .transpose();
    }
    worst = std::max(worst, std::abs(ld - std::log(std::abs(jac.determinant()))));
  }
  c.lt("|log-det - log|det J_numeric|| at Z=4", worst, 1e-4);
}

inline void kl_sanity(Checks& c, const Context&) {
  c.lt("KL(N(0,1)||N(0,1))", std::abs(kl_standard_normal({0, 0, 0, 0}, {1, 1, 1, 1})), 1e-7);
  std::mt19937_64 rng(18);
  std::uniform_real_distribution<double> mu(-1.5, 1.5), sg(0.3, 2.0);
  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> m(4), s(4);
    for (int j = 0; j < 4; ++j) {
      m[static_cast<std::size_t>(j)] = mu(rng);
      s[static_cast<std::size_t>(j)] = sg(rng);
    }
    const double exact = kl_standard_normal(m, s);
    const double mc = monte_carlo_kl_standard_normal(m, s, 100000, 100 + static_cast<std::uint64_t>(trial));
    worst = std::max(worst, std::abs(mc - exact) / exact);
  }
  c.lt("worst Monte-Carlo relative error over 20 Gaussians", worst, 0.02);
}

inline void gradient_checks(Checks& c, const Context&) {
  double rel = 0;
  detail::record(c, "audio encoders", detail::grad_audio(&rel));
  detail::record_zero(c, "audio encoders", rel);
  detail::record(c, "vae enc/dec/flow", detail::grad_vae(0, &rel));
  detail::record_zero(c, "vae", rel);
  detail::record(c, "sync scorer", detail::grad_vae(1));
  detail::record(c, "flow prior", detail::grad_vae(2));
  detail::record(c, "ldm (no dropout)", detail::grad_ldm());
  detail::record(c, "landmark attention", detail::grad_nerf("nerf.att."));
  detail::record(c, "field network", detail::grad_nerf("nerf."));
  detail::record(c, "hash features via render_ray", detail::grad_nerf("nerf.grid."));
  detail::record(c, "compositing", detail::grad_composite());
}

inline void volume_rendering(Checks& c, const Context&) {
  const std::array<double, 3> bg = {0.1, 0.2, 0.3};
  const double sigma = 2.5;
  const Eigen::RowVector3d col(0.8, 0.5, 0.1);
  auto field = [&](const SampleSet<double>& s) {
    const auto n = static_cast<ad::Index>(s.ray.size());
    M cm(n, 3);
    cm.rowwise() = col;
    return RadianceSamples<double>{ad::constant<double>(M::Constant(n, 1, sigma)), ad::constant<double>(cm)};
  };
  Ray ray;
  ray.origin = Vec3(0.1, 0.2, -1);
  ray.t_near = 0.3;
  ray.t_far = 1.1;
  ray.samples = 256;
  std::mt19937_64 jitter(1);
  auto r = render_ray<double>(ray, field, bg, &jitter);
  const double att = std::exp(-sigma * (ray.t_far - ray.t_near));
  double err = 0;
  for (int k = 0; k < 3; ++k) err = std::max(err, std::abs(r.rgb.value()(0, k) - (col(k) * (1 - att) + att * bg[k])));
  c.lt("homogeneous medium vs closed form (256 samples)", err, 1e-3);

  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::exponential_distribution<double> e(0.5);
  const int rays = 10000;
  std::vector<int> offsets{0};
  std::vector<double> delta;
  for (int i = 0; i < rays; ++i) {
    const int n = 2 + static_cast<int>(u(rng) * 30);
    offsets.push_back(offsets.back() + n);
    for (int k = 0; k < n; ++k) delta.push_back(0.01 + 0.2 * u(rng));
  }
  const auto s = static_cast<ad::Index>(delta.size());
  M sig(s, 1), color = M::Random(s, 3).cwiseAbs();
  for (ad::Index i = 0; i < s; ++i) sig(i, 0) = e(rng) * (u(rng) < 0.3 ? 20.0 : 1.0);
  M w;
  auto out = composite<double>(ad::constant<double>(sig), ad::constant<double>(color), delta, offsets, {0, 0, 0}, &w);
  double worst = 0;
  for (int i = 0; i < rays; ++i)
    worst = std::max(worst, std::abs(w.middleRows(offsets[i], offsets[i + 1] - offsets[i]).sum() + out.value()(i, 3) - 1.0));
  c.lt("max|sum w + T_final - 1| over 1e4 rays", worst, 1e-6);

  double ins_worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + trial % 7;
    M sg(n, 1), cl(n, 3);
    std::vector<double> d(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) {
      sg(k, 0) = 5 * u(rng);
      cl.row(k) << u(rng), u(rng), u(rng);
      d[static_cast<std::size_t>(k)] = 0.1 * u(rng) + 0.01;
    }
    const std::array<double, 3> b = {0.3, 0.3, 0.3};
    auto base = composite<double>(ad::constant<double>(sg), ad::constant<double>(cl), d, {0, n}, b).value();
    const int at = trial % (n + 1);
    M s2(n + 1, 1), c2(n + 1, 3);
    std::vector<double> d2 = d;
    d2.insert(d2.begin() + at, 0.37);
    s2 << sg.topRows(at), 0.0, sg.bottomRows(n - at);
    c2 << cl.topRows(at), Eigen::RowVector3d(u(rng), u(rng), u(rng)), cl.bottomRows(n - at);
    auto ins = composite<double>(ad::constant<double>(s2), ad::constant<double>(c2), d2, {0, n + 1}, b).value();
    ins_worst = std::max(ins_worst, (base - ins).cwiseAbs().maxCoeff());
  }
  c.lt("zero-density insertion change", ins_worst, 1e-6);
}

inline void deformation_semantics(Checks& c, const Context& ctx) {
  std::mt19937_64 rng(10);
  const M l = detail::randn<double>(6, kLandmarkDim, rng), d = detail::randn<double>(6, kLandmarkDim, rng);
  c.expect(apply_deformation(l, d, 0.0) == l, "delta=0 returns the input bit for bit");
  LdmModel<double> model(LdmConfig{}, 3, false);
  c.expect(deform_sequence(model, l, Emotion::happy, 0.0) == l, "delta=0 through the LDM returns the input bit for bit");
  double worst = 0;
  const double unit = (deform_sequence(model, l, Emotion::happy, 1.0) - l).norm();
  for (double delta : {0.15, 0.2, 0.3, 0.5, 2.0}) {
    const double dist = (deform_sequence(model, l, Emotion::happy, delta) - l).norm();
    worst = std::max(worst, std::abs(dist - delta * unit) / (delta * unit));
  }
  c.lt("relative deviation of ||l_E - l|| from delta * ||Delta||", worst, 1e-12);
  c.expect(kDefaultDelta == 0.15, "library default delta " + Checks::fmt(kDefaultDelta));
  if (ctx.config_file.empty() || !fs::exists(ctx.config_file)) {
    c.expect(false, "shipped config not found at '" + ctx.config_file.string() + "'");
    return;
  }
  const auto shipped = pipeline::parse_config(pipeline::load_config(ctx.config_file, {}, std::nullopt));
  c.expect(shipped.delta == 0.15, "shipped config delta " + Checks::fmt(shipped.delta));
  c.expect(shipped.delta_sweep == pipeline::kDefaultDeltaSweep, "shipped delta_sweep is {0, 0.15, 0.2, 0.3, 0.4, 0.5, 1.0}");
}

inline void ldm_recovery(Checks& c, const Context&) {
  SyntheticFaceGenerator gen(SynthConfig{});
  const auto train = make_ldm_pairs(gen, 4, 32, 0.001, 1);
  const auto held = make_ldm_pairs(gen, 2, 32, 0.0, 2);
  LdmEvaluation ev[2];
  for (int perm = 0; perm < 2; ++perm) {
    LdmModel<float> model(LdmConfig{}, 3);
    LdmTrainConfig tc;
    tc.permute_labels = perm == 1;
    auto r = train_ldm(model, train, tc);
    c.expect(!r.diverged, std::string(perm ? "permuted" : "true") + "-label run finished");
    ev[perm] = evaluate_ldm(model, gen, held);
  }
  const double ratio = ev[0].mean_error / ev[0].mean_oracle_norm;
  const double control = ev[1].mean_error / ev[1].mean_oracle_norm;
  c.lt("held-out error / oracle norm", ratio, 0.05);
  c.ge("permuted-label error ratio / true-label ratio", control / ratio, 3.0);
  c.lt("neutral displacement / mean non-neutral norm", ev[0].neutral_norm / ev[0].mean_nonneutral_norm, 0.10);
}

inline void vae_overfit(Checks& c, const Context&) {
  SyntheticFaceGenerator gen(SynthConfig{});
  const auto clip = gen.generate_clip(1, Emotion::neutral, 160, 32);
  const auto held = gen.generate_clip(99, Emotion::neutral, 160, 32);
  VaeModel<float> model(VaeConfig{}, 5);
  c.lt("untrained |sync gap|", std::abs(sync_gap(model, held, 3)), 0.1);
  VaeTrainConfig tc;
  tc.log_every = 50;
  auto r = train_vae(model, {&clip}, tc);
  c.expect(!r.diverged && r.steps_completed == tc.steps, "completed " + std::to_string(r.steps_completed) + " steps");
  double at50 = std::nan(""), at2000 = std::nan("");
  for (const auto& p : r.curve) {
    if (p.step == 50) at50 = p.recon_mse;
    if (p.step == 2000) at2000 = p.recon_mse;
  }
  c.le("recon MSE at step 2000 / step 50", at2000 / at50, 0.10);
  c.gt("held-out sync gap after training", sync_gap(model, held, 3), 0.3);
  std::mt19937_64 rng(4);
  auto z = detail::randn<float>(1000, model.config().latent, rng);
  auto u = model.flow_forward(ad::constant<float>(z)).u.value();
  c.lt("trained flow round trip", static_cast<double>((model.flow_inverse(u) - z).cwiseAbs().maxCoeff()), 1e-5);
}

// Mouth gains 0.3/0.2 give visible mouth motion at 64x64; the default toy
// gains move the mouth by less than a pixel.
inline void nerf_overfit(Checks& c, const Context&) {
  SynthConfig sc;
  sc.mouth_open_gain = 0.3;
  sc.mouth_width_gain = 0.2;
  const auto clip = SyntheticFaceGenerator(sc).generate_clip(1, Emotion::happy, 16, 64);
  RandomConvPerceptual<float> backend(7);
  double psnr[2] = {0, 0};
  int steps = 0;
  for (int ablate = 0; ablate < 2; ++ablate) {
    NerfModel<float> model(NerfConfig{}, 3);
    NerfTrainConfig tc;
    tc.coarse_steps = 500;
    tc.fine_steps = 100;
    tc.eval_every = 100;
    tc.zero_landmarks = ablate == 1;
    auto r = train_nerf(model, clip, tc, &backend);
    c.expect(!r.diverged, std::string(ablate ? "ablated" : "conditioned") + " run finished");
    psnr[ablate] = r.final_psnr;
    steps = r.steps_completed;
  }
  c.ge("training-view PSNR (dB) after " + std::to_string(steps) + " steps", psnr[0], 30.0);
  c.lt("zeroed-landmark PSNR (dB)", psnr[1], psnr[0]);
}

inline void metric_identities(Checks& c, const Context&) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  auto random_image = [&](int w, int h) {
    Image img(w, h);
    for (auto& v : img.rgb) v = u(rng);
    return img;
  };
  const Image a = random_image(32, 32);
  c.expect(metrics::psnr(a, a) == 99.0, "PSNR(x,x) = " + Checks::fmt(metrics::psnr(a, a)));
  c.lt("|SSIM(x,x) - 1|", std::abs(metrics::ssim(a, a) - 1.0), 1e-9);
  const M l = detail::randn<double>(4, kLandmarkDim, rng);
  c.expect(metrics::lmd(l, l, metrics::Region::mouth) == 0.0 && metrics::lmd(l, l, metrics::Region::face) == 0.0,
           "M-LMD(x,x) = F-LMD(x,x) = 0");
  double worst = 0;
  for (int k = 0; k < 20; ++k) {
    const int w = 11 + k % 7, h = 11 + (k * 3) % 9;
    Image x = random_image(w, h), y = random_image(w, h);
    if (k % 2)
      for (std::size_t i = 0; i < y.rgb.size(); ++i) y.rgb[i] = 0.7f * x.rgb[i] + 0.3f * y.rgb[i];
    worst = std::max(worst, std::abs(metrics::ssim(x, y) - detail::reference_ssim(x, y)));
  }
  c.lt("SSIM vs direct reference, 20 pairs", worst, 1e-6);
}

inline void end_to_end(Checks& c, const Context& ctx) {
  const fs::path root = ctx.workdir / "e2e";
  fs::remove_all(root);
  std::ostringstream sink;
  std::ostream& log = ctx.log ? *ctx.log : sink;
  json raw = detail::toy_pipeline_config(root);
  auto cfg = pipeline::parse_config(raw);
  pipeline::synth_data(cfg, sink);
  pipeline::train_vae_stage(cfg, sink);
  pipeline::train_ldm_stage(cfg, sink);
  pipeline::train_nerf_stage(cfg, sink);
  log << "  toy checkpoints trained in " << root.string() << "\n";

  auto run_infer = [&](const std::string& name, double delta) {
    json r = raw;
    r["infer"]["output"] = (root / name).string();
    r["delta"] = delta;
    auto pc = pipeline::parse_config(r);
    return pipeline::infer(pc, sink);
  };
  const auto first = run_infer("infer_a", kDefaultDelta);
  run_infer("infer_b", kDefaultDelta);
  bool identical = true;
  for (std::size_t t = 0; t < first.frames.size(); ++t)
    identical = identical && detail::same_bytes(io::frame_path(root / "infer_a", static_cast<int>(t)),
                                                io::frame_path(root / "infer_b", static_cast<int>(t)));
  for (const char* f : {"neutral_landmarks.csv", "emotional_landmarks.csv", "manifest.json"})
    identical = identical && detail::same_bytes(root / "infer_a" / f, root / "infer_b" / f);
  c.expect(identical && !first.frames.empty(),
           "two infer runs byte-identical (" + std::to_string(first.frames.size()) + " frames, CSVs, manifest)");

  run_infer("infer_zero", 0.0);
  c.expect(io::read_bytes(root / "infer_zero" / "neutral_landmarks.csv") ==
               io::read_bytes(root / "infer_zero" / "emotional_landmarks.csv"),
           "delta=0 emotional CSV equals neutral CSV");

  auto sweep = pipeline::ablate_delta(cfg, cfg.delta_sweep, sink);
  std::vector<double> got;
  for (const auto& row : sweep.rows) got.push_back(row.delta);
  c.expect(got == pipeline::kDefaultDeltaSweep, "default sweep rows {0, 0.15, 0.2, 0.3, 0.4, 0.5, 1.0}");
  const auto table = pipeline::format_ablation_table(sweep);
  c.expect(table.find("0.15 [full]") != std::string::npos, "table labels the 0.15 row \"0.15 [full]\"");
  c.expect(!sweep.rows.empty() && sweep.rows[0].emotional_vs_neutral == 0.0, "delta=0 row has emotional = neutral");
  double lo = 1e300, hi = -1e300;
  for (const auto& row : sweep.rows) {
    lo = std::min(lo, row.m_lmd);
    hi = std::max(hi, row.m_lmd);
  }
  c.gt("M-LMD spread across delta", hi - lo, 0.0);
  bool rejected = false;
  try {
    pipeline::ablate_delta(cfg, {}, sink);
  } catch (const Error&) {
    rejected = true;
  }
  c.expect(rejected, "empty delta list rejected");
  log << table;
}

inline std::vector<Criterion> criteria() {
  return {
      {1, "flow prior round trip and log-det", false, flow_round_trip},
      {2, "KL sanity", false, kl_sanity},
      {3, "gradient checks", false, gradient_checks},
      {4, "volume rendering", false, volume_rendering},
      {5, "deformation semantics", false, deformation_semantics},
      {6, "LDM oracle recovery", true, ldm_recovery},
      {7, "VAE overfit and sync gap", true, vae_overfit},
      {8, "NeRF overfit and attention ablation", true, nerf_overfit},
      {9, "metric identities", false, metric_identities},
      {10, "end-to-end determinism", true, end_to_end},
  };
}

// "invariants", "training", "full"/"all", or a comma list of ids ("1,5,9").
inline std::vector<int> select(const std::string& selector) {
  std::vector<int> ids;
  for (const auto& c : criteria()) {
    if (selector == "full" || selector == "all") ids.push_back(c.id);
    else if (selector == "invariants" && !c.training) ids.push_back(c.id);
    else if (selector == "training" && c.training) ids.push_back(c.id);
  }
  if (!ids.empty()) return ids;
  std::set<int> chosen;
  std::stringstream ss(selector);
  for (std::string part; std::getline(ss, part, ',');) {
    char* end = nullptr;
    const long v = std::strtol(part.c_str(), &end, 10);
    require(!part.empty() && end && *end == '\0' && v >= 1 && v <= 10, ErrorCode::config,
            "unknown acceptance selector '" + selector + "' (use invariants, training, full or ids like 1,5,9)");
    chosen.insert(static_cast<int>(v));
  }
  require(!chosen.empty(), ErrorCode::config, "empty acceptance selector");
  return {chosen.begin(), chosen.end()};
}

inline std::string format(const CriterionResult& r) {
  std::ostringstream os;
  os << (r.passed ? "PASS" : "FAIL") << " [" << std::setw(2) << r.id << "] " << r.name << " (" << std::fixed
     << std::setprecision(1) << r.seconds << " s): " << r.detail;
  return os.str();
}

// Runs the selected criteria in order. Exceptions count as failures.
inline std::vector<CriterionResult> run(const std::vector<int>& ids, const Context& ctx, std::ostream& out) {
  std::vector<CriterionResult> results;
  for (const auto& crit : criteria()) {
    if (std::find(ids.begin(), ids.end(), crit.id) == ids.end()) continue;
    Checks checks;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      crit.run(checks, ctx);
    } catch (const std::exception& e) {
      checks.expect(false, std::string("exception: ") + e.what());
    }
    CriterionResult r{crit.id, crit.name, checks.passed(),
                      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), checks.detail()};
    out << format(r) << std::endl;
    results.push_back(r);
  }
  return results;
}

inline json to_json(const std::vector<CriterionResult>& results) {
  json j = json::array();
  for (const auto& r : results)
    j.push_back({{"id", r.id}, {"name", r.name}, {"passed", r.passed}, {"seconds", r.seconds}, {"detail", r.detail}});
  return j;
}

}  // namespace realtalk::acceptance
