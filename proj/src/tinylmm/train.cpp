#include "steerlab/tinylmm/train.hpp"

#include <cmath>

#include "steerlab/error.hpp"
#include "steerlab/rng.hpp"

namespace steerlab::tinylmm {

TrainResult train_toy(const ModelParams& params, std::span<const Example> corpus,
                      const TrainOptions& options) {
  if (options.steps < 1) throw ArgumentError("train_toy needs steps >= 1");
  if (options.batch_size < 1) throw ArgumentError("train_toy needs batch_size >= 1");
  if (corpus.empty()) throw ArgumentError("train_toy needs a non-empty corpus");
  if (!(options.learning_rate >= 0.0)) throw ArgumentError("learning rate must be >= 0");

  TrainResult result{params, {}};
  result.loss_curve.reserve(static_cast<std::size_t>(options.steps));
  ModelParams grads = ModelParams::zeros(params.config);
  CounterRng rng(options.seed, Stream::kTrain);
  const float inv_batch = 1.0f / static_cast<float>(options.batch_size);

  for (int step = 0; step < options.steps; ++step) {
    grads.set_zero();
    double batch_loss = 0.0;
    for (int b = 0; b < options.batch_size; ++b) {
      const Example& ex = corpus[rng.below(corpus.size())];
      batch_loss += sequence_loss(result.params, ex.text, ex.image, &grads);
    }
    batch_loss /= options.batch_size;
    if (!std::isfinite(batch_loss)) {
      throw NumericError("training diverged at step " + std::to_string(step));
    }
    float scale = inv_batch;
    if (options.clip_norm > 0.0) {
      const double norm = std::sqrt(static_cast<double>(grads.squared_norm())) * inv_batch;
      if (norm > options.clip_norm) scale *= static_cast<float>(options.clip_norm / norm);
    }
    if (options.learning_rate != 0.0) {
      result.params.axpy(-static_cast<float>(options.learning_rate) * scale, grads);
    }
    result.loss_curve.push_back(batch_loss);
    if (options.on_step) options.on_step(step, batch_loss);
  }
  if (!result.params.all_finite()) throw NumericError("training produced non-finite weights");
  return result;
}

}  // namespace steerlab::tinylmm
