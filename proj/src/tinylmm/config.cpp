#include "steerlab/tinylmm/config.hpp"

#include <cmath>
#include <string>

#include "steerlab/error.hpp"

namespace steerlab::tinylmm {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("invalid model config: " + msg); };
  if (vocab_size < 2) fail("vocab_size must be >= 2");
  if (d_model < 1) fail("d_model must be >= 1");
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (n_heads < 1) fail("n_heads must be >= 1");
  if (d_model % n_heads != 0) {
    fail("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
         std::to_string(n_heads));
  }
  if (d_ff < 1) fail("d_ff must be >= 1");
  if (n_image_tokens < 1) fail("n_image_tokens must be >= 1");
  if (max_seq <= n_image_tokens) fail("max_seq must exceed n_image_tokens");
  if (!(layernorm_eps > 0.0) || !std::isfinite(layernorm_eps)) fail("layernorm_eps must be > 0");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
          {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},             {"max_seq", c.max_seq},
          {"n_image_tokens", c.n_image_tokens},
          {"layernorm_eps", c.layernorm_eps},
          {"seed", c.seed}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.max_seq = j.value("max_seq", c.max_seq);
    c.n_image_tokens = j.value("n_image_tokens", c.n_image_tokens);
    c.layernorm_eps = j.value("layernorm_eps", c.layernorm_eps);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
  return c;
}

}  // namespace steerlab::tinylmm
