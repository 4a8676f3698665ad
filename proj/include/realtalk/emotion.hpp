#pragma once

#include <array>
#include <string>
#include <string_view>

#include "realtalk/error.hpp"

namespace realtalk {

// Eight discrete emotion categories; integer codes are stable (0-7).
enum class Emotion : int { angry = 0, disgust, contempt, fear, happy, neutral, sad, surprise };

inline constexpr int kNumEmotions = 8;

inline constexpr std::array<std::string_view, kNumEmotions> kEmotionNames = {
    "angry", "disgust", "contempt", "fear", "happy", "neutral", "sad", "surprise"};

inline std::string valid_emotion_list() {
  std::string out;
  for (auto n : kEmotionNames) {
    if (!out.empty()) out += ", ";
    out += n;
  }
  return out;
}

inline std::string_view to_string(Emotion e) { return kEmotionNames.at(static_cast<std::size_t>(e)); }

inline int to_code(Emotion e) { return static_cast<int>(e); }

inline Emotion emotion_from_code(int code) {
  require(code >= 0 && code < kNumEmotions, ErrorCode::unknown_emotion,
          "code " + std::to_string(code) + " (valid: " + valid_emotion_list() + ")");
  return static_cast<Emotion>(code);
}

inline Emotion parse_emotion(std::string_view name) {
  for (int i = 0; i < kNumEmotions; ++i)
    if (kEmotionNames[static_cast<std::size_t>(i)] == name) return static_cast<Emotion>(i);
  fail(ErrorCode::unknown_emotion, "'" + std::string(name) + "' (valid: " + valid_emotion_list() + ")");
}

}  // namespace realtalk
