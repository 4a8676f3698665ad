#pragma once

// Landmark deformation model: neutral landmarks + emotion label -> displacement.
// Backbone FC-BN-ReLU, two residual FC blocks, a residual multi-head
// self-attention block over a temporal window of frames, and a final FC.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "realtalk/autodiff.hpp"
#include "realtalk/data_io.hpp"
#include "realtalk/emotion.hpp"
#include "realtalk/error.hpp"
#include "realtalk/synth_data.hpp"
#include "realtalk/training.hpp"

namespace realtalk {

inline constexpr double kDefaultDelta = 0.15;

struct LdmConfig {
  int embed_dim = 16;
  int hidden = 256;
  int heads = 4;
  int ffn = 512;
  int window = 8;
  double dropout = 0.1;

  void validate() const {
    require(embed_dim >= 1 && hidden >= 1 && ffn >= 1, ErrorCode::config, "ldm widths must be positive");
    require(heads >= 1 && hidden % heads == 0, ErrorCode::config, "ldm hidden width must divide into heads");
    require(window >= 1, ErrorCode::config, "ldm window must be >= 1");
    require(dropout >= 0 && dropout < 1, ErrorCode::config, "ldm dropout must be in [0, 1)");
  }
};

inline nlohmann::json to_json(const LdmConfig& c) {
  return {{"embed_dim", c.embed_dim}, {"hidden", c.hidden}, {"heads", c.heads},
          {"ffn", c.ffn},             {"window", c.window}, {"dropout", c.dropout}};
}

inline LdmConfig ldm_config_from_json(const nlohmann::json& j) {
  LdmConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    const auto& v = it.value();
    if (k == "embed_dim") c.embed_dim = v.get<int>();
    else if (k == "hidden") c.hidden = v.get<int>();
    else if (k == "heads") c.heads = v.get<int>();
    else if (k == "ffn") c.ffn = v.get<int>();
    else if (k == "window") c.window = v.get<int>();
    else if (k == "dropout") c.dropout = v.get<double>();
    else fail(ErrorCode::config, "unknown ldm config key '" + k + "'");
  }
  c.validate();
  return c;
}

template <class T>
struct LdmOutput {
  Var<T> delta;                      // rows x 204
  std::vector<Matrix<T>> attention;  // one rows x rows matrix per head; zero across windows
};

enum class LdmMode { train, eval, frozen_stats_no_dropout };

template <class T>
class LdmModel {
 public:
  LdmModel(LdmConfig cfg, std::uint64_t seed, bool zero_output = true) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const int h = cfg_.hidden;
    store_.add("emb", uniform<T>(kNumEmotions, cfg_.embed_dim, -1.0, 1.0, rng));
    Dense<T>::create(store_, "backbone.fc", kLandmarkDim + cfg_.embed_dim, h, rng);
    add_bn("backbone.bn", h);
    for (int b = 0; b < 2; ++b) {
      const std::string p = "res" + std::to_string(b);
      Dense<T>::create(store_, p + ".fc1", h, h, rng);
      add_bn(p + ".bn1", h);
      Dense<T>::create(store_, p + ".fc2", h, h, rng);
      add_bn(p + ".bn2", h);
    }
    for (const char* n : {"att.q", "att.k", "att.v", "att.o"}) Dense<T>::create(store_, n, h, h, rng);
    store_.add("att.ln.gamma", ones<T>(1, h));
    store_.add("att.ln.beta", zeros<T>(1, h));
    Dense<T>::create(store_, "ffn.fc1", h, cfg_.ffn, rng);
    Dense<T>::create(store_, "ffn.fc2", cfg_.ffn, h, rng);
    store_.add("ffn.ln.gamma", ones<T>(1, h));
    store_.add("ffn.ln.beta", zeros<T>(1, h));
    Dense<T>::create(store_, "out", h, kLandmarkDim, rng, zero_output);
  }

  const LdmConfig& config() const { return cfg_; }
  ParameterStore<T>& store() { return store_; }
  const ParameterStore<T>& store() const { return store_; }

  Var<T> embed_emotion(const std::vector<int>& codes) const {
    for (int c : codes)
      require(c >= 0 && c < kNumEmotions, ErrorCode::unknown_emotion,
              "emotion code " + std::to_string(c) + " is not one of " + valid_emotion_list());
    return ad::gather_rows<T>(store_.get("emb"), codes);
  }

  // `landmarks` holds consecutive windows of `window_sizes[i]` rows each; a
  // label per row. Attention never crosses window boundaries.
  LdmOutput<T> forward(const Var<T>& landmarks, const std::vector<int>& labels, const std::vector<int>& window_sizes,
                       LdmMode mode, std::mt19937_64* rng = nullptr) {
    const ad::Index rows = landmarks.rows();
    require(rows >= 1, ErrorCode::invalid_argument, "ldm needs at least one frame");
    require(landmarks.cols() == kLandmarkDim, ErrorCode::shape_mismatch, "ldm input must be 204 wide");
    require(static_cast<ad::Index>(labels.size()) == rows, ErrorCode::shape_mismatch, "one emotion label per frame");
    ad::Index covered = 0;
    for (int w : window_sizes) {
      require(w >= 1, ErrorCode::invalid_argument, "window sizes must be positive");
      covered += w;
    }
    require(covered == rows, ErrorCode::shape_mismatch, "window sizes must cover every frame");
    require(mode != LdmMode::train || rng != nullptr, ErrorCode::invalid_argument, "train mode needs an rng");
    const bool dropout_on = mode == LdmMode::train && cfg_.dropout > 0;
    const auto bn_mode = mode == LdmMode::train ? ad::BatchNormMode::train
                         : mode == LdmMode::eval ? ad::BatchNormMode::eval
                                                 : ad::BatchNormMode::batch_frozen;
    auto drop = [&](const Var<T>& v) { return dropout_on ? ad::dropout<T>(v, static_cast<T>(cfg_.dropout), *rng) : v; };
    auto stage = [](const Var<T>& v, const char* name) {
      ad::check_finite(v, std::string("ldm ") + name);
      return v;
    };

    auto x = ad::concat_cols<T>({landmarks, embed_emotion(labels)});
    auto h = stage(ad::relu<T>(bn("backbone.bn", dense("backbone.fc", x), bn_mode)), "backbone");
    for (int b = 0; b < 2; ++b) {
      const std::string p = "res" + std::to_string(b);
      auto f = ad::relu<T>(bn(p + ".bn1", dense(p + ".fc1", h), bn_mode));
      f = bn(p + ".bn2", dense(p + ".fc2", f), bn_mode);
      h = stage(ad::relu<T>(ad::add<T>(f, h)), "residual block");
    }

    LdmOutput<T> out;
    auto z_att = stage(attention(h, window_sizes, out.attention), "attention");
    auto z = stage(ad::layer_norm<T>(ad::add<T>(drop(z_att), h), store_.get("att.ln.gamma"), store_.get("att.ln.beta")),
                   "attention residual");
    auto ff = dense("ffn.fc2", ad::relu<T>(dense("ffn.fc1", z)));
    // The feed-forward residual adds the pre-attention h, as written in the model description.
    auto h_final = stage(ad::layer_norm<T>(ad::add<T>(drop(ff), h), store_.get("ffn.ln.gamma"), store_.get("ffn.ln.beta")),
                         "feed-forward residual");
    out.delta = stage(dense("out", h_final), "output");
    return out;
  }

 private:
  void add_bn(const std::string& p, int n) {
    store_.add(p + ".gamma", ones<T>(1, n));
    store_.add(p + ".beta", zeros<T>(1, n));
    store_.add(p + ".running_mean", zeros<T>(1, n), false);
    store_.add(p + ".running_var", ones<T>(1, n), false);
  }

  Var<T> dense(const std::string& p, const Var<T>& x) const { return Dense<T>{p}(store_, x); }

  Var<T> bn(const std::string& p, const Var<T>& x, ad::BatchNormMode mode) {
    return ad::batch_norm<T>(x, store_.get(p + ".gamma"), store_.get(p + ".beta"), store_.value(p + ".running_mean"),
                             store_.value(p + ".running_var"), mode);
  }

  Var<T> attention(const Var<T>& h, const std::vector<int>& window_sizes, std::vector<Matrix<T>>& weights) const {
    const ad::Index rows = h.rows();
    const int dk = cfg_.hidden / cfg_.heads;
    Matrix<T> mask = Matrix<T>::Constant(rows, rows, T(-1e30));
    ad::Index start = 0;
    for (int w : window_sizes) {
      mask.block(start, start, w, w).setZero();
      start += w;
    }
    auto mask_c = ad::constant<T>(std::move(mask));
    auto q = dense("att.q", h);
    auto k = dense("att.k", h);
    auto v = dense("att.v", h);
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));
    std::vector<Var<T>> heads;
    for (int i = 0; i < cfg_.heads; ++i) {
      auto qi = ad::slice_cols<T>(q, i * dk, dk);
      auto ki = ad::slice_cols<T>(k, i * dk, dk);
      auto vi = ad::slice_cols<T>(v, i * dk, dk);
      auto p = ad::softmax_rows<T>(ad::add<T>(ad::scale<T>(ad::matmul_nt<T>(qi, ki), scale), mask_c));
      weights.push_back(p.value());
      heads.push_back(ad::matmul<T>(p, vi));
    }
    return dense("att.o", ad::concat_cols<T>(heads));
  }

  LdmConfig cfg_;
  ParameterStore<T> store_;
};

// l_E = l + delta * dl, element-wise.
template <class Mat>
Mat apply_deformation(const Mat& neutral, const Mat& displacement, double delta) {
  require(neutral.rows() == displacement.rows() && neutral.cols() == displacement.cols(), ErrorCode::shape_mismatch,
          "apply_deformation: landmark and displacement shapes differ");
  require(delta >= 0 && std::isfinite(delta), ErrorCode::invalid_argument, "delta must be a finite non-negative value");
  using S = typename Mat::Scalar;
  return neutral + static_cast<S>(delta) * displacement;
}

// Mean over batch and coordinates of the squared difference.
template <class T>
Var<T> ldm_loss(const Var<T>& predicted, const Var<T>& target) {
  require(predicted.rows() == target.rows() && predicted.cols() == target.cols(), ErrorCode::shape_mismatch,
          "ldm_loss: shapes differ");
  return ad::mean<T>(ad::square<T>(ad::sub<T>(predicted, target)));
}

// Splits `rows` frames into consecutive windows of at most `window`.
inline std::vector<int> split_windows(ad::Index rows, int window) {
  std::vector<int> out;
  for (ad::Index s = 0; s < rows; s += window) out.push_back(static_cast<int>(std::min<ad::Index>(window, rows - s)));
  return out;
}

// Eval-mode deformation of a whole sequence with one label.
template <class T>
Matrix<double> deform_sequence(LdmModel<T>& model, const Matrix<double>& neutral, Emotion e, double delta) {
  ad::NoGradGuard ng;
  std::vector<int> labels(static_cast<std::size_t>(neutral.rows()), to_code(e));
  auto out = model.forward(ad::constant<T>(ad::cast_matrix<T>(neutral)), labels,
                           split_windows(neutral.rows(), model.config().window), LdmMode::eval);
  return apply_deformation<Matrix<double>>(neutral, ad::cast_matrix<double>(out.delta.value()), delta);
}

// ---------------------------------------------------------------------------
// Training on neutral/emotional pairs

struct LdmPair {
  Matrix<double> neutral;    // T x 204
  Matrix<double> emotional;  // T x 204
  Emotion emotion = Emotion::neutral;
};

// Pairs from the synthetic generator: emotional = neutral + field(e) + noise.
inline std::vector<LdmPair> make_ldm_pairs(const SyntheticFaceGenerator& gen, int clips_per_emotion, int frames,
                                           double noise, std::uint64_t seed) {
  std::vector<LdmPair> pairs;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, noise);
  for (int c = 0; c < clips_per_emotion; ++c) {
    for (int e = 0; e < kNumEmotions; ++e) {
      const auto emo = emotion_from_code(e);
      auto clip = gen.generate_clip(seed * 1000 + static_cast<std::uint64_t>(c * kNumEmotions + e), emo, frames, 32);
      LdmPair p;
      p.emotion = emo;
      p.neutral = clip.landmarks.rowwise() - gen.oracle_displacement(emo).row(0);
      p.emotional = clip.landmarks;
      if (noise > 0)
        for (ad::Index i = 0; i < p.emotional.size(); ++i) p.emotional.data()[i] += n(rng);
      pairs.push_back(std::move(p));
    }
  }
  return pairs;
}

struct LdmTrainConfig {
  int steps = 6000;
  double lr = 1e-3;
  int batch_windows = 8;
  int log_every = 100;
  std::uint64_t seed = 1;
  bool permute_labels = false;  // negative control
  bool cosine_decay = true;     // lr follows a half cosine down to 0
};

struct LdmTrainResult {
  std::vector<std::pair<int, double>> curve;  // (step, training loss)
  bool diverged = false;
  std::string message;
};

template <class T>
LdmTrainResult train_ldm(LdmModel<T>& model, const std::vector<LdmPair>& pairs, const LdmTrainConfig& tc) {
  require(!pairs.empty(), ErrorCode::invalid_argument, "train_ldm needs at least one pair");
  require(tc.steps >= 0 && tc.batch_windows >= 1 && tc.log_every >= 1 && tc.lr >= 0, ErrorCode::config,
          "train_ldm schedule");
  const int w = model.config().window;
  for (const auto& p : pairs)
    require(p.neutral.rows() >= w && p.neutral.rows() == p.emotional.rows(), ErrorCode::invalid_argument,
            "every pair needs at least one full window of frames");
  std::mt19937_64 rng(tc.seed);
  std::vector<int> codes;
  for (const auto& p : pairs) codes.push_back(to_code(p.emotion));
  if (tc.permute_labels) {
    std::uniform_int_distribution<int> any(0, kNumEmotions - 1);
    for (auto& c : codes) c = any(rng);
  }

  Adam<T> adam(AdamConfig{tc.lr});
  LdmTrainResult result;
  ParameterStore<T> last_good = model.store().clone();
  std::uniform_int_distribution<std::size_t> pick_pair(0, pairs.size() - 1);
  for (int step = 1; step <= tc.steps; ++step) {
    Matrix<T> neutral(static_cast<ad::Index>(tc.batch_windows) * w, kLandmarkDim);
    Matrix<T> target(neutral.rows(), kLandmarkDim);
    std::vector<int> labels;
    for (int b = 0; b < tc.batch_windows; ++b) {
      const auto i = pick_pair(rng);
      const auto& p = pairs[i];
      std::uniform_int_distribution<ad::Index> start(0, p.neutral.rows() - w);
      const auto s = start(rng);
      neutral.middleRows(b * w, w) = p.neutral.middleRows(s, w).template cast<T>();
      target.middleRows(b * w, w) = p.emotional.middleRows(s, w).template cast<T>();
      for (int k = 0; k < w; ++k) labels.push_back(codes[i]);
    }
    if (tc.cosine_decay)
      adam.set_lr(0.5 * tc.lr * (1.0 + std::cos(std::numbers::pi * (step - 1) / std::max(1, tc.steps))));
    try {
      model.store().zero_grad();
      auto l = ad::constant<T>(neutral);
      auto out = model.forward(l, labels, std::vector<int>(static_cast<std::size_t>(tc.batch_windows), w),
                               LdmMode::train, &rng);
      // delta = 1 during training so the output learns the full displacement.
      auto loss = ldm_loss<T>(ad::add<T>(l, out.delta), ad::constant<T>(target));
      const double v = static_cast<double>(loss.item());
      require(std::isfinite(v), ErrorCode::diverged, "loss is not finite");
      ad::backward(loss);
      adam.step(model.store());
      if (step % tc.log_every == 0 || step == tc.steps) {
        result.curve.emplace_back(step, v);
        last_good = model.store().clone();
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

struct LdmEvaluation {
  double mean_error = 0;         // mean per-frame ||dl - field||
  double mean_oracle_norm = 0;   // mean per-frame ||field||, all labels
  double neutral_norm = 0;       // mean per-frame ||dl|| for neutral inputs
  double mean_nonneutral_norm = 0;
};

// Compares predicted displacements (delta = 1) with the generator's fields.
template <class T>
LdmEvaluation evaluate_ldm(LdmModel<T>& model, const SyntheticFaceGenerator& gen, const std::vector<LdmPair>& pairs) {
  ad::NoGradGuard ng;
  LdmEvaluation ev;
  double frames = 0, neutral_frames = 0, nonneutral_frames = 0;
  for (const auto& p : pairs) {
    std::vector<int> labels(static_cast<std::size_t>(p.neutral.rows()), to_code(p.emotion));
    auto out = model.forward(ad::constant<T>(ad::cast_matrix<T>(p.neutral)), labels,
                             split_windows(p.neutral.rows(), model.config().window), LdmMode::eval);
    Matrix<double> d = ad::cast_matrix<double>(out.delta.value());
    const auto& field = gen.oracle_displacement(p.emotion);
    for (ad::Index t = 0; t < d.rows(); ++t) {
      ev.mean_error += (d.row(t) - field.row(0)).norm();
      ev.mean_oracle_norm += field.norm();
      if (p.emotion == Emotion::neutral) {
        ev.neutral_norm += d.row(t).norm();
        neutral_frames += 1;
      } else {
        ev.mean_nonneutral_norm += field.norm();
        nonneutral_frames += 1;
      }
      frames += 1;
    }
  }
  ev.mean_error /= std::max(frames, 1.0);
  ev.mean_oracle_norm /= std::max(frames, 1.0);
  ev.neutral_norm /= std::max(neutral_frames, 1.0);
  ev.mean_nonneutral_norm /= std::max(nonneutral_frames, 1.0);
  return ev;
}

template <class T>
io::Checkpoint ldm_checkpoint(const LdmModel<T>& model) {
  return io::to_checkpoint(model.store(), nlohmann::json{{"kind", "ldm"}, {"model", to_json(model.config())}});
}

template <class T>
LdmModel<T> ldm_from_checkpoint(const io::Checkpoint& ckpt) {
  require(ckpt.config.value("kind", std::string()) == "ldm", ErrorCode::incompatible_checkpoint,
          "checkpoint is not an ldm checkpoint");
  LdmModel<T> model(ldm_config_from_json(ckpt.config.at("model")), 0);
  io::restore_store(model.store(), ckpt);
  return model;
}

}  // namespace realtalk
