#pragma once

// Audio-to-motion VAE: dilated-conv encoder/decoder conditioned on encoded
// audio, a Glow-style flow prior over the latent, and a windowed sync scorer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "realtalk/audio_frontend.hpp"
#include "realtalk/autodiff.hpp"
#include "realtalk/data_io.hpp"
#include "realtalk/error.hpp"
#include "realtalk/metrics.hpp"
#include "realtalk/synth_data.hpp"
#include "realtalk/training.hpp"

namespace realtalk {

struct VaeConfig {
  int content_dim = 16;
  int pitch_dim = 4;
  int latent = 16;
  int width = 128;
  int kernel = 3;
  std::vector<int> dilations{1, 2, 4, 8};
  int flow_steps = 4;
  int coupling_hidden = 64;
  int sync_window = 5;
  int sync_hidden = 64;
  int sync_embed = 32;
  AudioEncoderConfig audio;

  void validate() const {
    require(content_dim >= 1 && pitch_dim >= 1, ErrorCode::config, "audio feature dims must be positive");
    require(latent >= 2, ErrorCode::config, "latent must be >= 2 (coupling splits it)");
    require(width >= 1 && kernel >= 1 && kernel % 2 == 1, ErrorCode::config, "vae conv sizes");
    require(!dilations.empty(), ErrorCode::config, "vae needs at least one dilation");
    for (int d : dilations) require(d >= 1, ErrorCode::config, "dilation must be >= 1");
    require(flow_steps >= 0 && coupling_hidden >= 1, ErrorCode::config, "flow sizes");
    require(sync_window >= 1 && sync_hidden >= 1 && sync_embed >= 1, ErrorCode::config, "sync scorer sizes");
    require(audio.channels >= 1 && audio.kernel % 2 == 1, ErrorCode::config, "audio encoder sizes");
  }
};

inline nlohmann::json to_json(const VaeConfig& c) {
  return {{"content_dim", c.content_dim},     {"pitch_dim", c.pitch_dim},
          {"latent", c.latent},               {"width", c.width},
          {"kernel", c.kernel},               {"dilations", c.dilations},
          {"flow_steps", c.flow_steps},       {"coupling_hidden", c.coupling_hidden},
          {"sync_window", c.sync_window},     {"sync_hidden", c.sync_hidden},
          {"sync_embed", c.sync_embed},       {"audio_channels", c.audio.channels},
          {"audio_kernel", c.audio.kernel}};
}

inline VaeConfig vae_config_from_json(const nlohmann::json& j) {
  VaeConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    const auto& v = it.value();
    if (k == "content_dim") c.content_dim = v.get<int>();
    else if (k == "pitch_dim") c.pitch_dim = v.get<int>();
    else if (k == "latent") c.latent = v.get<int>();
    else if (k == "width") c.width = v.get<int>();
    else if (k == "kernel") c.kernel = v.get<int>();
    else if (k == "dilations") c.dilations = v.get<std::vector<int>>();
    else if (k == "flow_steps") c.flow_steps = v.get<int>();
    else if (k == "coupling_hidden") c.coupling_hidden = v.get<int>();
    else if (k == "sync_window") c.sync_window = v.get<int>();
    else if (k == "sync_hidden") c.sync_hidden = v.get<int>();
    else if (k == "sync_embed") c.sync_embed = v.get<int>();
    else if (k == "audio_channels") c.audio.channels = v.get<int>();
    else if (k == "audio_kernel") c.audio.kernel = v.get<int>();
    else fail(ErrorCode::config, "unknown vae config key '" + k + "'");
  }
  c.validate();
  return c;
}

template <class T>
struct Posterior {
  Var<T> mu;
  Var<T> log_sigma;
  Var<T> sigma;
};

template <class T>
struct FlowResult {
  Var<T> u;
  Var<T> log_det;  // T x 1
};

// Per-row log N(x; 0, I).
template <class T>
Var<T> standard_normal_log_prob(const Var<T>& x) {
  const T c = static_cast<T>(0.5 * std::log(2.0 * std::numbers::pi) * static_cast<double>(x.cols()));
  return ad::add_scalar<T>(ad::scale<T>(ad::sum_cols<T>(ad::square<T>(x)), T(-0.5)), -c);
}

// Per-row log N(mu + sigma*eps; mu, diag sigma^2) evaluated at the
// reparameterized sample, which reduces to a function of eps and log sigma.
template <class T>
Var<T> posterior_log_prob(const Matrix<T>& eps, const Var<T>& log_sigma) {
  const T c = static_cast<T>(0.5 * std::log(2.0 * std::numbers::pi) * static_cast<double>(eps.cols()));
  Matrix<T> quad = (T(-0.5) * eps.array().square()).rowwise().sum();
  return ad::add<T>(ad::neg<T>(ad::sum_cols<T>(log_sigma)), ad::constant<T>((quad.array() - c).matrix()));
}

// Closed-form KL(N(mu, sigma^2) || N(0, I)).
inline double kl_standard_normal(const std::vector<double>& mu, const std::vector<double>& sigma) {
  require(mu.size() == sigma.size(), ErrorCode::shape_mismatch, "kl: mu/sigma size");
  double kl = 0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    require(sigma[i] > 0, ErrorCode::invalid_argument, "kl: sigma must be positive");
    kl += mu[i] * mu[i] + sigma[i] * sigma[i] - 1.0 - 2.0 * std::log(sigma[i]);
  }
  return 0.5 * kl;
}

// Monte-Carlo estimate of the same KL: mean of log q(z) - log p(z) over
// reparameterized draws, using the densities the VAE loss uses.
inline double monte_carlo_kl_standard_normal(const std::vector<double>& mu, const std::vector<double>& sigma,
                                             int samples, std::uint64_t seed) {
  require(mu.size() == sigma.size() && !mu.empty(), ErrorCode::shape_mismatch, "kl: mu/sigma size");
  require(samples >= 1, ErrorCode::invalid_argument, "kl: samples must be >= 1");
  ad::NoGradGuard ng;
  const auto z_dim = static_cast<ad::Index>(mu.size());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix<double> eps(samples, z_dim), z(samples, z_dim), log_sigma(1, z_dim);
  for (ad::Index j = 0; j < z_dim; ++j) log_sigma(0, j) = std::log(sigma[static_cast<std::size_t>(j)]);
  for (int i = 0; i < samples; ++i)
    for (ad::Index j = 0; j < z_dim; ++j) {
      eps(i, j) = n(rng);
      z(i, j) = mu[static_cast<std::size_t>(j)] + sigma[static_cast<std::size_t>(j)] * eps(i, j);
    }
  auto log_q = posterior_log_prob<double>(eps, ad::repeat_row<double>(ad::constant<double>(log_sigma), samples));
  auto log_p = standard_normal_log_prob<double>(ad::constant<double>(z));
  return (log_q.value() - log_p.value()).mean();
}

// Rows t..t+W-1 of `seq` flattened into one row per start.
template <class T>
Var<T> window_rows(const Var<T>& seq, const std::vector<int>& starts, int window) {
  require(window >= 1, ErrorCode::invalid_argument, "window must be >= 1");
  std::vector<int> idx;
  idx.reserve(starts.size() * static_cast<std::size_t>(window));
  for (int s : starts) {
    require(s >= 0 && s + window <= seq.rows(), ErrorCode::invalid_argument, "window out of range");
    for (int k = 0; k < window; ++k) idx.push_back(s + k);
  }
  return ad::reshape<T>(ad::gather_rows<T>(seq, idx), static_cast<ad::Index>(starts.size()),
                        static_cast<ad::Index>(window) * seq.cols());
}

// Row-wise cosine similarity of two embedding batches (N x E) -> N x 1.
template <class T>
Var<T> cosine_rows(const Var<T>& a, const Var<T>& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorCode::shape_mismatch, "cosine: embedding shapes");
  Matrix<T> na = a.value().rowwise().squaredNorm();
  Matrix<T> nb = b.value().rowwise().squaredNorm();
  const T tiny = std::numeric_limits<T>::min() * T(1e6);
  require(na.minCoeff() > tiny && nb.minCoeff() > tiny, ErrorCode::degenerate, "sync score: zero-norm embedding");
  auto dot = ad::sum_cols<T>(ad::mul<T>(a, b));
  auto inv = ad::mul<T>(ad::rsqrt<T>(ad::sum_cols<T>(ad::square<T>(a))), ad::rsqrt<T>(ad::sum_cols<T>(ad::square<T>(b))));
  return ad::clamp<T>(ad::mul<T>(dot, inv), T(-1), T(1));
}

// Binary cross-entropy on p = (s + 1) / 2, clamped away from 0 and 1.
// Returns the mean over rows of `s`.
template <class T>
Var<T> sync_loss(const Var<T>& s, const std::vector<int>& y) {
  require(s.cols() == 1 && static_cast<std::size_t>(s.rows()) == y.size(), ErrorCode::shape_mismatch,
          "sync_loss: one label per score");
  Matrix<T> ym(s.rows(), 1);
  for (std::size_t i = 0; i < y.size(); ++i) {
    require(y[i] == 0 || y[i] == 1, ErrorCode::invalid_argument, "sync_loss: labels must be 0 or 1");
    ym(static_cast<ad::Index>(i), 0) = static_cast<T>(y[i]);
  }
  const T lo = T(1e-7);
  auto p = ad::clamp<T>(ad::add_scalar<T>(ad::scale<T>(s, T(0.5)), T(0.5)), lo, T(1) - lo);
  auto y_c = ad::constant<T>(ym);
  auto one_minus_y = ad::constant<T>((Matrix<T>::Ones(s.rows(), 1) - ym).eval());
  auto ll = ad::add<T>(ad::mul<T>(y_c, ad::log<T>(p)),
                       ad::mul<T>(one_minus_y, ad::log<T>(ad::add_scalar<T>(ad::neg<T>(p), T(1)))));
  return ad::neg<T>(ad::mean<T>(ll));
}

template <class T>
Var<T> sync_loss(const Var<T>& s, int y) {
  return sync_loss<T>(s, std::vector<int>(static_cast<std::size_t>(s.rows()), y));
}

template <class T>
struct VaeLossTerms {
  Var<T> total;
  double recon = 0;
  double kl = 0;
  double sync = 0;
};

// recon: per-frame squared error summed over coordinates, averaged over
// frames. kl: mean over frames of log q - log p. sync: already averaged.
template <class T>
VaeLossTerms<T> vae_loss(const Var<T>& l, const Var<T>& l_hat, const Var<T>& log_q, const Var<T>& log_p,
                         const std::optional<Var<T>>& sync_term) {
  require(l.rows() == l_hat.rows() && l.cols() == l_hat.cols(), ErrorCode::shape_mismatch, "vae_loss: l vs l_hat");
  require(log_q.rows() == log_p.rows(), ErrorCode::shape_mismatch, "vae_loss: density lengths");
  const T frames = static_cast<T>(l.rows());
  auto recon = ad::scale<T>(ad::sum<T>(ad::square<T>(ad::sub<T>(l, l_hat))), T(1) / frames);
  auto kl = ad::mean<T>(ad::sub<T>(log_q, log_p));
  VaeLossTerms<T> out;
  out.recon = static_cast<double>(recon.item());
  out.kl = static_cast<double>(kl.item());
  require(std::isfinite(out.recon), ErrorCode::non_finite, "vae_loss term 'recon' is not finite");
  require(std::isfinite(out.kl), ErrorCode::non_finite, "vae_loss term 'kl' is not finite");
  out.total = ad::add<T>(recon, kl);
  if (sync_term) {
    out.sync = static_cast<double>(sync_term->item());
    require(std::isfinite(out.sync), ErrorCode::non_finite, "vae_loss term 'sync' is not finite");
    out.total = ad::add<T>(out.total, *sync_term);
  }
  return out;
}

template <class T>
class VaeModel {
 public:
  VaeModel(VaeConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const int z = cfg_.latent;
    const int cond = 2 * cfg_.audio.channels;
    const int audio_dim = cfg_.content_dim + cfg_.pitch_dim;

    store_.add("norm.lm_mean", zeros<T>(1, kLandmarkDim), false);
    store_.add("norm.lm_scale", ones<T>(1, 1), false);
    store_.add("norm.audio_mean", zeros<T>(1, audio_dim), false);
    store_.add("norm.audio_scale", ones<T>(1, audio_dim), false);

    frontend_ = AudioFrontend<T>::create(store_, "audio", cfg_.content_dim, cfg_.pitch_dim, cfg_.audio, rng);

    enc_in_ = Conv1d<T>::create(store_, "enc.in", kLandmarkDim + cond, cfg_.width, cfg_.kernel, 1, rng);
    dec_in_ = Conv1d<T>::create(store_, "dec.in", z + cond, cfg_.width, cfg_.kernel, 1, rng);
    for (std::size_t i = 0; i < cfg_.dilations.size(); ++i) {
      const int d = cfg_.dilations[i];
      enc_blocks_.push_back(Conv1d<T>::create(store_, "enc.block" + std::to_string(i), cfg_.width, cfg_.width,
                                              cfg_.kernel, d, rng));
      dec_blocks_.push_back(Conv1d<T>::create(store_, "dec.block" + std::to_string(i), cfg_.width, cfg_.width,
                                              cfg_.kernel, d, rng));
    }
    enc_head_ = Dense<T>::create(store_, "enc.head", cfg_.width, 2 * z, rng);
    // log sigma starts at 0 so early posterior samples stay on the prior's scale.
    store_.value("enc.head.w").rightCols(z).setZero();
    dec_out_ = Dense<T>::create(store_, "dec.out", cfg_.width, kLandmarkDim, rng);

    const int za = z / 2;
    const int zb = z - za;
    for (int k = 0; k < cfg_.flow_steps; ++k) {
      const std::string p = "flow" + std::to_string(k);
      store_.add(p + ".actnorm.log_scale", zeros<T>(1, z));
      store_.add(p + ".actnorm.bias", zeros<T>(1, z));
      store_.add(p + ".mix", Matrix<T>::Identity(z, z));
      Dense<T>::create(store_, p + ".coupling.hidden", za, cfg_.coupling_hidden, rng);
      Dense<T>::create(store_, p + ".coupling.out", cfg_.coupling_hidden, 2 * zb, rng, true);
    }

    const int w = cfg_.sync_window;
    Dense<T>::create(store_, "sync.audio.l1", w * audio_dim, cfg_.sync_hidden, rng);
    Dense<T>::create(store_, "sync.audio.l2", cfg_.sync_hidden, cfg_.sync_embed, rng);
    Dense<T>::create(store_, "sync.lm.l1", w * kLandmarkDim, cfg_.sync_hidden, rng);
    Dense<T>::create(store_, "sync.lm.l2", cfg_.sync_hidden, cfg_.sync_embed, rng);
  }

  const VaeConfig& config() const { return cfg_; }
  ParameterStore<T>& store() { return store_; }
  const ParameterStore<T>& store() const { return store_; }

  // Data-dependent normalization buffers (not trained).
  void fit_normalization(const std::vector<const SyntheticClip*>& clips) {
    require(!clips.empty(), ErrorCode::invalid_argument, "normalization needs at least one clip");
    const int audio_dim = cfg_.content_dim + cfg_.pitch_dim;
    ad::Index rows = 0;
    for (const auto* c : clips) rows += c->length();
    Matrix<double> lm(rows, kLandmarkDim), au(rows, audio_dim);
    ad::Index r = 0;
    for (const auto* c : clips) {
      require(c->content.cols() == cfg_.content_dim && c->pitch.cols() == cfg_.pitch_dim, ErrorCode::shape_mismatch,
              "clip audio dims do not match the vae config");
      lm.middleRows(r, c->length()) = c->landmarks;
      au.middleRows(r, c->length()) << c->content, c->pitch;
      r += c->length();
    }
    Matrix<double> lm_mean = lm.colwise().mean();
    Matrix<double> lm_var = (lm.rowwise() - lm_mean.row(0)).array().square().colwise().mean();
    double var_sum = 0;
    int moving = 0;
    for (ad::Index j = 0; j < lm_var.cols(); ++j)
      if (lm_var(0, j) > 1e-12) {
        var_sum += lm_var(0, j);
        ++moving;
      }
    const double lm_scale = moving > 0 ? 1.0 / std::sqrt(var_sum / moving) : 1.0;
    Matrix<double> au_mean = au.colwise().mean();
    Matrix<double> au_std = (au.rowwise() - au_mean.row(0)).array().square().colwise().mean().sqrt();
    Matrix<double> au_scale = au_std.unaryExpr([](double s) { return s > 1e-6 ? 1.0 / s : 1.0; });
    store_.value("norm.lm_mean") = lm_mean.cast<T>();
    store_.value("norm.lm_scale")(0, 0) = static_cast<T>(lm_scale);
    store_.value("norm.audio_mean") = au_mean.cast<T>();
    store_.value("norm.audio_scale") = au_scale.cast<T>();
  }

  Var<T> condition(const Var<T>& content, const Var<T>& pitch, ad::BatchNormMode mode) {
    auto enc = encode_audio<T>(store_, frontend_, content, pitch, mode);
    return concat_encodings<T>(enc.h, enc.p);
  }

  Var<T> normalize_landmarks(const Var<T>& l) const {
    auto centered = ad::sub<T>(l, ad::repeat_row<T>(ad::constant<T>(store_.value("norm.lm_mean")), l.rows()));
    return ad::scale<T>(centered, store_.value("norm.lm_scale")(0, 0));
  }

  Var<T> denormalize_landmarks(const Var<T>& n) const {
    auto scaled = ad::scale<T>(n, T(1) / store_.value("norm.lm_scale")(0, 0));
    return ad::add_row<T>(scaled, ad::constant<T>(store_.value("norm.lm_mean")));
  }

  Posterior<T> encode(const Var<T>& l, const Var<T>& cond) const {
    require(l.rows() == cond.rows(), ErrorCode::shape_mismatch,
            "vae_encode: landmark length " + std::to_string(l.rows()) + " vs conditioning " + std::to_string(cond.rows()));
    require(l.cols() == kLandmarkDim, ErrorCode::shape_mismatch, "vae_encode: landmarks must be 204 wide");
    require(cond.cols() == 2 * cfg_.audio.channels, ErrorCode::shape_mismatch, "vae_encode: conditioning width");
    auto h = ad::gelu<T>(enc_in_(store_, ad::concat_cols<T>({normalize_landmarks(l), cond})));
    for (const auto& b : enc_blocks_) h = ad::add<T>(h, ad::gelu<T>(b(store_, h)));
    auto head = enc_head_(store_, h);
    Posterior<T> post;
    post.mu = ad::slice_cols<T>(head, 0, cfg_.latent);
    post.log_sigma = ad::slice_cols<T>(head, cfg_.latent, cfg_.latent);
    post.sigma = ad::exp<T>(post.log_sigma);
    return post;
  }

  Var<T> decode(const Var<T>& z, const Var<T>& cond) const { return denormalize_landmarks(decode_normalized(z, cond)); }

  // Decoder output in normalized landmark units.
  Var<T> decode_normalized(const Var<T>& z, const Var<T>& cond) const {
    require(z.rows() == cond.rows(), ErrorCode::shape_mismatch,
            "vae_decode: latent length " + std::to_string(z.rows()) + " vs conditioning " + std::to_string(cond.rows()));
    require(z.cols() == cfg_.latent, ErrorCode::shape_mismatch, "vae_decode: latent width");
    require(cond.cols() == 2 * cfg_.audio.channels, ErrorCode::shape_mismatch, "vae_decode: conditioning width");
    auto h = ad::gelu<T>(dec_in_(store_, ad::concat_cols<T>({z, cond})));
    for (const auto& b : dec_blocks_) h = ad::add<T>(h, ad::gelu<T>(b(store_, h)));
    return dec_out_(store_, h);
  }

  // z -> u with per-row log|det dU/dz|.
  FlowResult<T> flow_forward(const Var<T>& z) const {
    require(z.cols() == cfg_.latent, ErrorCode::shape_mismatch, "flow: latent width");
    require(ad::all_finite(z.value()), ErrorCode::non_finite, "flow input is not finite");
    const ad::Index rows = z.rows();
    const int za = cfg_.latent / 2;
    const int zb = cfg_.latent - za;
    Var<T> x = z;
    Var<T> log_det = ad::constant<T>(Matrix<T>::Zero(rows, 1));
    for (int k = 0; k < cfg_.flow_steps; ++k) {
      const std::string p = "flow" + std::to_string(k);
      auto logs = store_.get(p + ".actnorm.log_scale");
      x = ad::add_row<T>(ad::mul_row<T>(x, ad::exp<T>(logs)), store_.get(p + ".actnorm.bias"));
      auto ld = ad::sum<T>(logs);
      auto w = store_.get(p + ".mix");
      x = ad::matmul<T>(x, w);
      ld = ad::add<T>(ld, ad::log_abs_det<T>(w));
      log_det = ad::add<T>(log_det, ad::repeat_row<T>(ld, rows));

      auto xa = ad::slice_cols<T>(x, 0, za);
      auto xb = ad::slice_cols<T>(x, za, zb);
      auto st = coupling(p, xa);
      auto log_s = ad::slice_cols<T>(st, 0, zb);
      auto shift = ad::slice_cols<T>(st, zb, zb);
      xb = ad::add<T>(ad::mul<T>(xb, ad::exp<T>(log_s)), shift);
      log_det = ad::add<T>(log_det, ad::sum_cols<T>(log_s));
      x = ad::concat_cols<T>({xa, xb});
      require(ad::all_finite(x.value()) && ad::all_finite(log_det.value()), ErrorCode::non_finite,
              "flow step " + std::to_string(k) + " produced a non-finite value");
    }
    return {x, log_det};
  }

  // u -> z, no graph. Evaluated in double whatever T is, so single-precision
  // models round-trip to float accuracy.
  Matrix<T> flow_inverse(const Matrix<T>& u) const {
    require(u.cols() == cfg_.latent, ErrorCode::shape_mismatch, "flow inverse: latent width");
    require(ad::all_finite(u), ErrorCode::non_finite, "flow inverse input is not finite");
    const int za = cfg_.latent / 2;
    const int zb = cfg_.latent - za;
    auto p64 = [&](const std::string& name) { return Matrix<double>(store_.value(name).template cast<double>()); };
    Matrix<double> x = u.template cast<double>();
    for (int k = cfg_.flow_steps - 1; k >= 0; --k) {
      const std::string p = "flow" + std::to_string(k);
      Matrix<double> hidden = ((x.leftCols(za) * p64(p + ".coupling.hidden.w")).rowwise() +
                               p64(p + ".coupling.hidden.b").row(0))
                                  .array()
                                  .tanh()
                                  .matrix();
      Matrix<double> raw = (hidden * p64(p + ".coupling.out.w")).rowwise() + p64(p + ".coupling.out.b").row(0);
      Matrix<double> log_s = raw.leftCols(zb).array().tanh().matrix();
      Matrix<double> shift = raw.rightCols(zb);
      x.rightCols(zb) = ((x.rightCols(zb) - shift).array() * (-log_s.array()).exp()).matrix();
      x = (x * p64(p + ".mix").inverse()).eval();
      Matrix<double> logs = p64(p + ".actnorm.log_scale");
      Matrix<double> bias = p64(p + ".actnorm.bias");
      x = ((x.rowwise() - bias.row(0)).array().rowwise() * (-logs.row(0).array()).exp()).matrix();
      require(ad::all_finite(x), ErrorCode::non_finite,
              "flow inverse step " + std::to_string(k) + " produced a non-finite value");
    }
    return x.template cast<T>();
  }

  // log p(z) = log N(u; 0, I) + log|det|, per row.
  Var<T> prior_log_prob(const Var<T>& z) const {
    auto f = flow_forward(z);
    return ad::add<T>(standard_normal_log_prob<T>(f.u), f.log_det);
  }

  // Window features: raw audio features and landmarks, normalized by the
  // stored buffers. `frozen` reads parameters as constants.
  Var<T> embed_audio(const Var<T>& audio_windows, bool frozen = false) const {
    return embed("sync.audio", audio_windows, frozen);
  }
  Var<T> embed_landmarks(const Var<T>& landmark_windows, bool frozen = false) const {
    return embed("sync.lm", landmark_windows, frozen);
  }

  Var<T> normalized_audio(const Matrix<T>& content, const Matrix<T>& pitch) const {
    require(content.rows() == pitch.rows(), ErrorCode::shape_mismatch, "content and pitch lengths differ");
    Matrix<T> a(content.rows(), content.cols() + pitch.cols());
    a << content, pitch;
    a = ((a.rowwise() - store_.value("norm.audio_mean").row(0)).array().rowwise() *
         store_.value("norm.audio_scale").row(0).array())
            .matrix();
    return ad::constant<T>(std::move(a));
  }

  Var<T> sync_score(const Var<T>& audio_windows, const Var<T>& landmark_windows, bool frozen = false) const {
    const ad::Index w = cfg_.sync_window;
    require(audio_windows.cols() == w * (cfg_.content_dim + cfg_.pitch_dim), ErrorCode::shape_mismatch,
            "sync_score: audio window must span W_s frames");
    require(landmark_windows.cols() == w * kLandmarkDim, ErrorCode::shape_mismatch,
            "sync_score: landmark window must span W_s frames");
    return cosine_rows<T>(embed_audio(audio_windows, frozen), embed_landmarks(landmark_windows, frozen));
  }

 private:
  Var<T> coupling(const std::string& p, const Var<T>& xa) const {
    auto hidden = ad::tanh<T>(Dense<T>{p + ".coupling.hidden"}(store_, xa));
    auto raw = Dense<T>{p + ".coupling.out"}(store_, hidden);
    const int zb = cfg_.latent - cfg_.latent / 2;
    return ad::concat_cols<T>({ad::tanh<T>(ad::slice_cols<T>(raw, 0, zb)), ad::slice_cols<T>(raw, zb, zb)});
  }

  Var<T> param(const std::string& name, bool frozen) const {
    return frozen ? ad::constant<T>(store_.value(name)) : store_.get(name);
  }

  Var<T> embed(const std::string& p, const Var<T>& x, bool frozen) const {
    auto h = ad::gelu<T>(ad::linear<T>(x, param(p + ".l1.w", frozen), param(p + ".l1.b", frozen)));
    return ad::linear<T>(h, param(p + ".l2.w", frozen), param(p + ".l2.b", frozen));
  }

  VaeConfig cfg_;
  ParameterStore<T> store_;
  AudioFrontend<T> frontend_;
  Conv1d<T> enc_in_, dec_in_;
  std::vector<Conv1d<T>> enc_blocks_, dec_blocks_;
  Dense<T> enc_head_, dec_out_;
};

// ---------------------------------------------------------------------------
// Training

struct VaeTrainConfig {
  int steps = 2000;
  double lr = 5e-4;
  int log_every = 10;
  std::uint64_t seed = 1;
  bool shuffle_pairing = false;  // negative control: break the audio/landmark correspondence
};

struct VaeCurvePoint {
  int step = 0;
  double total = 0;
  double recon = 0;
  double recon_mse = 0;  // mean over frames and coordinates, original landmark units
  double kl = 0;
  double sync = 0;
  double scorer = 0;
};

struct VaeTrainResult {
  std::vector<VaeCurvePoint> curve;
  bool diverged = false;
  std::string message;
  int steps_completed = 0;
};

namespace detail {

struct SyncBatch {
  std::vector<int> starts;
  std::vector<int> negatives;
};

// All valid window starts paired with starts shifted circularly by at least
// W_s in both directions.
inline SyncBatch make_sync_batch(int frames, int window, std::mt19937_64& rng) {
  const int n = frames - window + 1;
  require(n >= 2 * window, ErrorCode::invalid_argument,
          "clip too short for sync negatives: need at least " + std::to_string(3 * window - 1) + " frames");
  SyncBatch b;
  std::uniform_int_distribution<int> shift(window, n - window);
  for (int t = 0; t < n; ++t) {
    b.starts.push_back(t);
    b.negatives.push_back((t + shift(rng)) % n);
  }
  return b;
}

template <class T>
struct VaeStepTerms {
  Var<T> objective;
  VaeLossTerms<T> terms;
  Var<T> scorer;
  double recon_mse = 0;
};

template <class T>
VaeStepTerms<T> vae_objective(VaeModel<T>& model, const Matrix<T>& landmarks, const Matrix<T>& content,
                              const Matrix<T>& pitch, const Matrix<T>& eps, const SyncBatch& batch,
                              ad::BatchNormMode mode) {
  const int w = model.config().sync_window;
  auto l = ad::constant<T>(landmarks);
  auto cond = model.condition(ad::constant<T>(content), ad::constant<T>(pitch), mode);
  auto post = model.encode(l, cond);
  auto z_hat = ad::add<T>(post.mu, ad::mul<T>(post.sigma, ad::constant<T>(eps)));
  auto gen = model.decode_normalized(z_hat, cond);
  auto gt = model.normalize_landmarks(l);
  auto log_q = posterior_log_prob<T>(eps, post.log_sigma);
  auto log_p = model.prior_log_prob(z_hat);

  auto audio = model.normalized_audio(content, pitch);
  auto a_win = window_rows<T>(audio, batch.starts, w);
  auto sync_gen = sync_loss<T>(model.sync_score(a_win, window_rows<T>(gen, batch.starts, w), true), 1);

  auto pos = model.sync_score(a_win, window_rows<T>(gt, batch.starts, w));
  auto neg = model.sync_score(a_win, window_rows<T>(gt, batch.negatives, w));
  auto scorer = ad::scale<T>(ad::add<T>(sync_loss<T>(pos, 1), sync_loss<T>(neg, 0)), T(0.5));

  VaeStepTerms<T> out;
  // Reconstruction is scored in normalized landmark units.
  out.terms = vae_loss<T>(gt, gen, log_q, log_p, sync_gen);
  out.scorer = scorer;
  out.objective = ad::add<T>(out.terms.total, scorer);
  const double scale = static_cast<double>(model.store().value("norm.lm_scale")(0, 0));
  out.recon_mse = out.terms.recon / (kLandmarkDim * scale * scale);
  return out;
}

}  // namespace detail

// Mean aligned score minus mean shifted score over every window of a clip.
template <class T>
double sync_gap(const VaeModel<T>& model, const SyntheticClip& clip, std::uint64_t seed) {
  ad::NoGradGuard ng;
  std::mt19937_64 rng(seed);
  const int w = model.config().sync_window;
  auto batch = detail::make_sync_batch(clip.length(), w, rng);
  auto audio = model.normalized_audio(ad::cast_matrix<T>(clip.content), ad::cast_matrix<T>(clip.pitch));
  auto gt = model.normalize_landmarks(ad::constant<T>(ad::cast_matrix<T>(clip.landmarks)));
  auto a_win = window_rows<T>(audio, batch.starts, w);
  auto pos = model.sync_score(a_win, window_rows<T>(gt, batch.starts, w)).value();
  auto neg = model.sync_score(a_win, window_rows<T>(gt, batch.negatives, w)).value();
  return metrics::sync_eval(ad::cast_matrix<double>(pos), ad::cast_matrix<double>(neg));
}

// Trains on the given clips (one clip per step, cycling). The logged curve
// is a deterministic evaluation with fixed noise and fixed negatives using
// batch statistics without touching the running buffers.
template <class T>
VaeTrainResult train_vae(VaeModel<T>& model, const std::vector<const SyntheticClip*>& clips,
                         const VaeTrainConfig& tc) {
  require(!clips.empty(), ErrorCode::invalid_argument, "train_vae needs at least one clip");
  require(tc.steps >= 0 && tc.log_every >= 1 && tc.lr >= 0, ErrorCode::config, "train_vae schedule");
  model.fit_normalization(clips);

  struct Prepared {
    Matrix<T> landmarks, content, pitch, eval_eps;
    detail::SyncBatch eval_batch;
  };
  std::mt19937_64 rng(tc.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto noise = [&](ad::Index r, ad::Index c) {
    Matrix<T> m(r, c);
    for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(gauss(rng));
    return m;
  };
  std::vector<Prepared> data;
  for (const auto* c : clips) {
    Prepared p;
    p.landmarks = ad::cast_matrix<T>(c->landmarks);
    p.content = ad::cast_matrix<T>(c->content);
    p.pitch = ad::cast_matrix<T>(c->pitch);
    if (tc.shuffle_pairing) {
      std::vector<int> perm(static_cast<std::size_t>(c->length()));
      for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
      std::shuffle(perm.begin(), perm.end(), rng);
      Matrix<T> shuffled(p.landmarks.rows(), p.landmarks.cols());
      for (std::size_t i = 0; i < perm.size(); ++i)
        shuffled.row(static_cast<ad::Index>(i)) = p.landmarks.row(perm[i]);
      p.landmarks = std::move(shuffled);
    }
    p.eval_eps = noise(c->length(), model.config().latent);
    p.eval_batch = detail::make_sync_batch(c->length(), model.config().sync_window, rng);
    data.push_back(std::move(p));
  }

  auto evaluate = [&](int step) {
    ad::NoGradGuard ng;
    VaeCurvePoint pt;
    pt.step = step;
    for (const auto& p : data) {
      auto r = detail::vae_objective(model, p.landmarks, p.content, p.pitch, p.eval_eps, p.eval_batch,
                                     ad::BatchNormMode::batch_frozen);
      pt.total += r.terms.recon + r.terms.kl + r.terms.sync;
      pt.recon += r.terms.recon;
      pt.recon_mse += r.recon_mse;
      pt.kl += r.terms.kl;
      pt.sync += r.terms.sync;
      pt.scorer += static_cast<double>(r.scorer.item());
    }
    const double n = static_cast<double>(data.size());
    pt.total /= n;
    pt.recon /= n;
    pt.recon_mse /= n;
    pt.kl /= n;
    pt.sync /= n;
    pt.scorer /= n;
    return pt;
  };

  Adam<T> adam(AdamConfig{tc.lr});
  VaeTrainResult result;
  ParameterStore<T> last_good = model.store().clone();
  result.curve.push_back(evaluate(0));
  for (int step = 1; step <= tc.steps; ++step) {
    const auto& p = data[static_cast<std::size_t>(step - 1) % data.size()];
    auto eps = noise(p.landmarks.rows(), model.config().latent);
    auto batch = detail::make_sync_batch(static_cast<int>(p.landmarks.rows()), model.config().sync_window, rng);
    double loss_value = 0;
    try {
      model.store().zero_grad();
      auto r = detail::vae_objective(model, p.landmarks, p.content, p.pitch, eps, batch, ad::BatchNormMode::train);
      loss_value = static_cast<double>(r.objective.item());
      require(std::isfinite(loss_value), ErrorCode::diverged, "loss is not finite");
      ad::backward(r.objective);
      adam.step(model.store());
    } catch (const Error& e) {
      if (e.code() != ErrorCode::diverged && e.code() != ErrorCode::non_finite) throw;
      model.store().copy_values_from(last_good);
      result.diverged = true;
      result.message = "diverged at step " + std::to_string(step) + ": " + e.what();
      break;
    }
    result.steps_completed = step;
    if (step % tc.log_every == 0 || step == tc.steps) {
      auto pt = evaluate(step);
      if (!std::isfinite(pt.total)) {
        model.store().copy_values_from(last_good);
        result.diverged = true;
        result.message = "diverged at step " + std::to_string(step) + ": evaluation loss is not finite";
        break;
      }
      result.curve.push_back(pt);
      last_good = model.store().clone();
    }
  }
  return result;
}

// Samples u ~ N(0, I), maps it through the inverse flow and decodes with the
// encoded audio (batch-norm in eval mode).
template <class T>
Matrix<double> infer_motion(VaeModel<T>& model, const Matrix<double>& content, const Matrix<double>& pitch,
                            std::uint64_t seed) {
  require(content.rows() == pitch.rows(), ErrorCode::shape_mismatch, "content and pitch lengths differ");
  require(content.cols() == model.config().content_dim && pitch.cols() == model.config().pitch_dim,
          ErrorCode::shape_mismatch, "audio feature widths do not match the checkpoint");
  ad::NoGradGuard ng;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix<T> u(content.rows(), model.config().latent);
  for (ad::Index i = 0; i < u.size(); ++i) u.data()[i] = static_cast<T>(gauss(rng));
  auto z = model.flow_inverse(u);
  auto cond = model.condition(ad::constant<T>(ad::cast_matrix<T>(content)), ad::constant<T>(ad::cast_matrix<T>(pitch)),
                              ad::BatchNormMode::eval);
  return ad::cast_matrix<double>(model.decode(ad::constant<T>(z), cond).value());
}

template <class T>
io::Checkpoint vae_checkpoint(const VaeModel<T>& model) {
  return io::to_checkpoint(model.store(), nlohmann::json{{"kind", "vae"}, {"model", to_json(model.config())}});
}

template <class T>
VaeModel<T> vae_from_checkpoint(const io::Checkpoint& ckpt) {
  require(ckpt.config.value("kind", std::string()) == "vae", ErrorCode::incompatible_checkpoint,
          "checkpoint is not a vae checkpoint");
  VaeModel<T> model(vae_config_from_json(ckpt.config.at("model")), 0);
  io::restore_store(model.store(), ckpt);
  return model;
}

}  // namespace realtalk
