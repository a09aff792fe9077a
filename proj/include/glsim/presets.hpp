#pragma once

#include <algorithm>
#include <cctype>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "scoring.hpp"

namespace glsim {

/// Validated hyperparameters for known models. Keys are matched against the
/// pack's model_id after lowercasing and dropping non-alphanumerics.
struct ModelPreset {
  std::string_view name;
  std::vector<std::string_view> keys;
  int image_layer;
  int text_layer;
  std::size_t k;
  double w;
};

inline const std::vector<ModelPreset>& model_presets() {
  static const std::vector<ModelPreset> kPresets = {
      {"LLaVA-1.5-7b", {"llava157b", "llavav157b"}, 32, 31, 32, 0.6},
      {"LLaVA-1.5-13b", {"llava1513b", "llavav1513b"}, 40, 38, 32, 0.6},
      {"MiniGPT-4", {"minigpt4"}, 32, 30, 4, 0.5},
      {"Shikra", {"shikra"}, 30, 27, 16, 0.6},
  };
  return kPresets;
}

inline std::optional<ModelPreset> find_preset(std::string_view model_id) {
  std::string key;
  for (unsigned char c : model_id)
    if (std::isalnum(c)) key += static_cast<char>(std::tolower(c));
  for (const auto& p : model_presets())
    for (auto k : p.keys)
      if (key.find(k) != std::string::npos) return p;
  return std::nullopt;
}

inline ScoringConfig apply_preset(ScoringConfig cfg, const ModelPreset& p) {
  cfg.image_layer = p.image_layer;
  cfg.text_layer = p.text_layer;
  cfg.k = p.k;
  cfg.w = p.w;
  return cfg;
}

}  // namespace glsim
