#pragma once

#include <span>
#include <vector>

#include "steerlab/tinylmm/model.hpp"

namespace steerlab::evalkit {

struct ShiftInput {
  tinylmm::TokenSequence prompt;
  tinylmm::TokenSequence generated;
  tinylmm::ImageTokens<float> image;
};

struct TokenShift {
  tinylmm::TokenId token = 0;
  double mean_delta = 0.0;  // mean of p_steered - p_unsteered
};

struct ShiftTable {
  std::vector<TokenShift> rows;  // top_k by |mean_delta|, descending
  std::size_t positions = 0;
  double max_abs_position_sum = 0.0;  // max over positions of |sum_v delta_v|
};

// Teacher-forces each prompt + generated response with and without the
// ablation and averages the per-token probability change over every
// generation step.
ShiftTable token_probability_shift(const tinylmm::ModelParams& model, std::span<const ShiftInput> inputs,
                                   const tinylmm::Ablation& ablation, std::size_t top_k);

}  // namespace steerlab::evalkit
