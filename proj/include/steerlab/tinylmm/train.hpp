#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "steerlab/tinylmm/model.hpp"

namespace steerlab::tinylmm {

struct TrainOptions {
  int steps = 1000;
  double learning_rate = 1e-2;
  int batch_size = 8;
  // Global gradient-norm clip; <= 0 disables clipping.
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  // Called after every step with (step, mean batch loss).
  std::function<void(int, double)> on_step;
};

struct TrainResult {
  ModelParams params;
  std::vector<double> loss_curve;  // mean batch loss per step
};

// Minibatch SGD on next-token cross-entropy. Batches are drawn with
// replacement from `corpus` using CounterRng(seed, kTrain).
TrainResult train_toy(const ModelParams& params, std::span<const Example> corpus,
                      const TrainOptions& options);

}  // namespace steerlab::tinylmm
