#pragma once

// Audio stream encoders: conv(k) -> batch-norm -> GeLU -> conv(k) per stream.

#include <random>
#include <string>

#include "realtalk/autodiff.hpp"
#include "realtalk/error.hpp"
#include "realtalk/training.hpp"

namespace realtalk {

struct AudioEncoderConfig {
  int channels = 64;
  int kernel = 3;
};

template <class T>
struct AudioStreamEncoder {
  std::string prefix;
  Conv1d<T> conv1;
  Conv1d<T> conv2;

  static AudioStreamEncoder create(ParameterStore<T>& store, const std::string& prefix, ad::Index in_dim,
                                   const AudioEncoderConfig& cfg, std::mt19937_64& rng) {
    require(in_dim >= 1 && cfg.channels >= 1, ErrorCode::invalid_argument, "audio encoder sizes must be positive");
    AudioStreamEncoder e{prefix, {}, {}};
    e.conv1 = Conv1d<T>::create(store, prefix + ".conv1", in_dim, cfg.channels, cfg.kernel, 1, rng);
    store.add(prefix + ".bn.gamma", ones<T>(1, cfg.channels));
    store.add(prefix + ".bn.beta", zeros<T>(1, cfg.channels));
    store.add(prefix + ".bn.running_mean", zeros<T>(1, cfg.channels), false);
    store.add(prefix + ".bn.running_var", ones<T>(1, cfg.channels), false);
    e.conv2 = Conv1d<T>::create(store, prefix + ".conv2", cfg.channels, cfg.channels, cfg.kernel, 1, rng);
    return e;
  }

  Var<T> operator()(ParameterStore<T>& store, const Var<T>& x, ad::BatchNormMode mode) const {
    require(x.rows() >= 1, ErrorCode::invalid_argument, "audio sequence must have at least one frame");
    require(ad::all_finite(x.value()), ErrorCode::invalid_argument, prefix + ": non-finite audio feature");
    Var<T> h = conv1(store, x);
    h = ad::batch_norm<T>(h, store.get(prefix + ".bn.gamma"), store.get(prefix + ".bn.beta"),
                          store.value(prefix + ".bn.running_mean"), store.value(prefix + ".bn.running_var"), mode);
    return conv2(store, ad::gelu<T>(h));
  }
};

template <class T>
struct AudioEncoding {
  Var<T> h;
  Var<T> p;
};

// Content and pitch encoders sharing one config.
template <class T>
struct AudioFrontend {
  AudioStreamEncoder<T> content;
  AudioStreamEncoder<T> pitch;

  static AudioFrontend create(ParameterStore<T>& store, const std::string& prefix, ad::Index content_dim,
                              ad::Index pitch_dim, const AudioEncoderConfig& cfg, std::mt19937_64& rng) {
    return AudioFrontend{AudioStreamEncoder<T>::create(store, prefix + ".content", content_dim, cfg, rng),
                         AudioStreamEncoder<T>::create(store, prefix + ".pitch", pitch_dim, cfg, rng)};
  }

  AudioEncoding<T> encode(ParameterStore<T>& store, const Var<T>& a_content, const Var<T>& a_pitch,
                          ad::BatchNormMode mode) const {
    require(a_content.rows() == a_pitch.rows(), ErrorCode::shape_mismatch, "content and pitch lengths differ");
    return {content(store, a_content, mode), pitch(store, a_pitch, mode)};
  }
};

template <class T>
AudioEncoding<T> encode_audio(ParameterStore<T>& store, const AudioFrontend<T>& frontend, const Var<T>& a_content,
                              const Var<T>& a_pitch, ad::BatchNormMode mode) {
  return frontend.encode(store, a_content, a_pitch, mode);
}

// h first, then p.
template <class T>
Var<T> concat_encodings(const Var<T>& h, const Var<T>& p) {
  require(h.rows() == p.rows(), ErrorCode::shape_mismatch,
          "encoding lengths differ: " + std::to_string(h.rows()) + " vs " + std::to_string(p.rows()));
  return ad::concat_cols<T>({h, p});
}

}  // namespace realtalk
