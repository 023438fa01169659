#include "steerlab/evalkit/token_shift.hpp"

#include <algorithm>
#include <cmath>

#include "steerlab/error.hpp"

namespace steerlab::evalkit {

namespace {

using tinylmm::Matrix;

Matrix<double> softmax_rows(const Matrix<float>& logits, Eigen::Index first, Eigen::Index count) {
  Matrix<double> p = logits.middleRows(first, count).cast<double>();
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double mx = p.row(i).maxCoeff();
    p.row(i) = (p.row(i).array() - mx).exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

}  // namespace

ShiftTable token_probability_shift(const tinylmm::ModelParams& model, std::span<const ShiftInput> inputs,
                                   const tinylmm::Ablation& ablation, std::size_t top_k) {
  if (inputs.empty()) throw ArgumentError("token probability shift needs at least one record");
  const int vocab = model.config.vocab_size;
  const int k = model.config.n_image_tokens;
  std::vector<double> sum(static_cast<std::size_t>(vocab), 0.0);
  ShiftTable table;

  tinylmm::ForwardOptions plain;
  plain.all_logits = true;
  tinylmm::ForwardOptions steered = plain;
  steered.ablation = &ablation;

  for (const ShiftInput& in : inputs) {
    if (in.prompt.empty()) throw ArgumentError("token probability shift needs a non-empty prompt");
    tinylmm::TokenSequence seq = in.prompt;
    seq.insert(seq.end(), in.generated.begin(), in.generated.end());
    // One step per generated token, plus the step after the last one when
    // nothing was generated.
    const Eigen::Index first = k + static_cast<Eigen::Index>(in.prompt.size()) - 1;
    const Eigen::Index steps = std::max<Eigen::Index>(1, static_cast<Eigen::Index>(in.generated.size()));
    const auto base = tinylmm::forward(model, seq, in.image, plain);
    const auto abl = tinylmm::forward(model, seq, in.image, steered);
    const Matrix<double> delta = softmax_rows(abl.all_logits, first, steps) - softmax_rows(base.all_logits, first, steps);
    for (Eigen::Index i = 0; i < delta.rows(); ++i) {
      table.max_abs_position_sum = std::max(table.max_abs_position_sum, std::abs(delta.row(i).sum()));
      for (int v = 0; v < vocab; ++v) sum[static_cast<std::size_t>(v)] += delta(i, v);
    }
    table.positions += static_cast<std::size_t>(steps);
  }

  std::vector<TokenShift> all;
  all.reserve(sum.size());
  for (int v = 0; v < vocab; ++v) {
    all.push_back({v, sum[static_cast<std::size_t>(v)] / static_cast<double>(table.positions)});
  }
  std::stable_sort(all.begin(), all.end(), [](const TokenShift& a, const TokenShift& b) {
    return std::abs(a.mean_delta) > std::abs(b.mean_delta);
  });
  all.resize(std::min(top_k, all.size()));
  table.rows = std::move(all);
  return table;
}

}  // namespace steerlab::evalkit
