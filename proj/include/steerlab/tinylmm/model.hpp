#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "steerlab/tinylmm/params.hpp"

namespace steerlab::tinylmm {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

// K x d continuous prefix embeddings.
template <typename T>
using ImageTokens = Matrix<T>;

// Where h^l is read from the per-position residual.
struct CapturePosition {
  enum class Kind { kFinal, kMean, kFromEnd };
  Kind kind = Kind::kFinal;
  int offset = 0;  // kFromEnd only; offset 0 is the final position

  static CapturePosition final_position() { return {}; }
  static CapturePosition mean() { return {Kind::kMean, 0}; }
  static CapturePosition from_end(int k) { return {Kind::kFromEnd, k}; }

  std::string to_string() const;
  static CapturePosition parse(const std::string& s);

  bool operator==(const CapturePosition&) const = default;
};

// Projection hook used during steered inference: every residual r is
// replaced by r - a<a, r> after each block (and, optionally, on the
// embedding stream before block 0).
struct Ablation {
  std::vector<double> direction;  // unit length, size d
  bool include_embeddings = true;
};

template <typename T>
struct ActivationTrace {
  std::vector<int> layers;
  std::vector<RowVector<T>> hidden;  // h^l at the capture position, per entry of `layers`
  std::vector<Matrix<T>> residuals;  // full seq x d residuals, when requested
};

struct ForwardOptions {
  std::vector<int> capture_layers;
  CapturePosition position;
  bool keep_residuals = false;
  bool all_logits = false;
  const Ablation* ablation = nullptr;
};

template <typename T>
struct ForwardResult {
  RowVector<T> logits;     // next-token logits at the final position
  Matrix<T> all_logits;    // seq x V, only when requested
  ActivationTrace<T> trace;
};

template <typename T>
ForwardResult<T> forward(const BasicParams<T>& params, const TokenSequence& text,
                         const ImageTokens<T>& image, const ForwardOptions& options = {});

// Loss on the final-position logits: returns the value and writes dloss/dz.
template <typename T>
using LogitLoss = std::function<T(const RowVector<T>& z, RowVector<T>& grad)>;

template <typename T>
struct ImageGradient {
  T loss = T(0);
  RowVector<T> logits;
  Matrix<T> grad;  // K x d
};

template <typename T>
ImageGradient<T> backward_wrt_image_tokens(const BasicParams<T>& params,
                                           const TokenSequence& text,
                                           const ImageTokens<T>& image,
                                           const LogitLoss<T>& loss);

// Mean next-token cross-entropy over the text and its full parameter
// gradient (accumulated into `grads` when non-null).
template <typename T>
T sequence_loss(const BasicParams<T>& params, const TokenSequence& text,
                const ImageTokens<T>& image, BasicParams<T>* grads);

struct DecodeOptions {
  // temperature <= 0 selects greedy decoding (lowest id wins ties).
  double temperature = 0.0;
  std::uint64_t seed = 0;
  std::optional<TokenId> stop_token;

  static DecodeOptions greedy() { return {}; }
  static DecodeOptions sampled(double t, std::uint64_t seed) { return {t, seed, std::nullopt}; }
};

// Returns only the newly generated tokens (the stop token, if hit, is not
// included).
TokenSequence generate(const ModelParams& params, const TokenSequence& text,
                       const ImageTokens<float>& image, const Ablation* ablation,
                       const DecodeOptions& decode, int max_new);

TokenId argmax(std::span<const float> logits);

struct Example {
  TokenSequence text;
  ImageTokens<float> image;
};

// exp(mean NLL) over every next-token prediction inside each text.
double perplexity(const ModelParams& params, std::span<const Example> corpus,
                  const Ablation* ablation = nullptr);

void validate_ablation(const Ablation& ablation, int d_model);

}  // namespace steerlab::tinylmm
