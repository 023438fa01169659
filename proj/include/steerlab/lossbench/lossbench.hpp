#pragma once

#include <span>
#include <string>
#include <vector>

namespace steerlab::lossbench {

using TokenIds = std::vector<int>;

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

// Max-subtracted softmax.
std::vector<double> softmax(std::span<const double> z);

// KL(q || p) with q uniform over T. grad_j = p_j - [j in T]/N.
LossAndGrad kl_loss_and_grad(std::span<const double> z, const TokenIds& targets);

// -sum_{t in T} log p_t. grad_j = N p_j - [j in T].
LossAndGrad column_ce_loss_and_grad(std::span<const double> z, const TokenIds& targets);

// sum_{i in T} (z_i - M)^2. grad_j = 2 (z_j - M) on T, 0 elsewhere.
LossAndGrad mse_target_loss_and_grad(std::span<const double> z, const TokenIds& targets, double m);

// -sum_{t in T} sigmoid(z_t), i.e. maximize the target sigmoids.
LossAndGrad sigmoid_target_loss_and_grad(std::span<const double> z, const TokenIds& targets);

// sigma'(x) = sigma(x)(1 - sigma(x)), evaluated without overflow.
double sigmoid_grad_factor(double x);

struct SaturationRow {
  double magnitude = 0.0;
  double grad_factor = 0.0;   // sigma'(magnitude)
  double grad_inf_norm = 0.0; // ||grad||_inf of the sigmoid loss at z_t = magnitude
};

std::vector<SaturationRow> sigmoid_saturation_probe(std::span<const double> magnitudes,
                                                    const TokenIds& targets, int vocab_size);

enum class LossId { kKl, kCe, kMse, kSigmoid };

std::string to_string(LossId id);
LossId parse_loss_id(const std::string& s);

struct GradCheckParams {
  double mse_target = 0.0;  // M for the MSE loss
  double step = 1e-5;       // central-difference step, scaled by max(1, |z_j|)
  double tolerance = 1e-7;  // max relative error, denominator floored at 1e-2
  // Use an unguarded softmax (exp without max subtraction); overflow is
  // reported instead of silently producing garbage.
  bool naive_softmax = false;
};

struct GradCheckReport {
  LossId loss = LossId::kMse;
  std::size_t vocab_size = 0;
  std::size_t n_targets = 0;
  double max_rel_err = 0.0;
  bool pass = false;
  bool numeric_error = false;
  std::string message;
};

GradCheckReport grad_check(LossId loss, std::span<const double> z, const TokenIds& targets,
                           const GradCheckParams& params = {});

// Default MSE target for the bench: max(z) + 1.
double default_mse_target(std::span<const double> z);

}  // namespace steerlab::lossbench
