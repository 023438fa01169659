#pragma once

#include <cstdint>

#include <nlohmann/json.hpp>

namespace steerlab::tinylmm {

struct ModelConfig {
  int vocab_size = 256;
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 256;
  int max_seq = 128;
  int n_image_tokens = 4;
  double layernorm_eps = 1e-5;
  std::uint64_t seed = 1;

  int head_dim() const noexcept { return d_model / n_heads; }
  // Longest text (in tokens) that fits after the image prefix.
  int max_text() const noexcept { return max_seq - n_image_tokens; }

  // Throws ConfigError.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

}  // namespace steerlab::tinylmm
