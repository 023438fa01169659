#include "steerlab/lossbench/lossbench.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>

#include "steerlab/error.hpp"

namespace steerlab::lossbench {

namespace {

void check_targets(std::span<const double> z, const TokenIds& targets) {
  if (targets.empty()) throw ArgumentError("target set T is empty");
  std::set<int> seen;
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= z.size()) {
      throw ArgumentError("target index " + std::to_string(t) + " outside logit vector");
    }
    if (!seen.insert(t).second) throw ArgumentError("duplicate target index " + std::to_string(t));
  }
}

std::vector<double> naive_softmax(std::span<const double> z) {
  std::vector<double> p(z.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i]);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

using SoftmaxFn = std::function<std::vector<double>(std::span<const double>)>;

LossAndGrad kl_impl(std::span<const double> z, const TokenIds& targets, const SoftmaxFn& sm) {
  check_targets(z, targets);
  const auto p = sm(z);
  const double n = static_cast<double>(targets.size());
  LossAndGrad out{0.0, p};
  for (int t : targets) {
    const double pt = p[static_cast<std::size_t>(t)];
    if (!(pt > 0.0) || !std::isfinite(pt)) {
      throw NumericError("KL loss: target probability is zero or not finite (log of zero)");
    }
    out.loss += (1.0 / n) * std::log((1.0 / n) / pt);
    out.grad[static_cast<std::size_t>(t)] -= 1.0 / n;
  }
  return out;
}

LossAndGrad ce_impl(std::span<const double> z, const TokenIds& targets, const SoftmaxFn& sm) {
  check_targets(z, targets);
  const auto p = sm(z);
  const double n = static_cast<double>(targets.size());
  LossAndGrad out{0.0, std::vector<double>(z.size())};
  for (std::size_t j = 0; j < z.size(); ++j) out.grad[j] = n * p[j];
  for (int t : targets) {
    const double pt = p[static_cast<std::size_t>(t)];
    if (!(pt > 0.0) || !std::isfinite(pt)) {
      throw NumericError("CE loss: target probability is zero or not finite (log of zero)");
    }
    out.loss -= std::log(pt);
    out.grad[static_cast<std::size_t>(t)] -= 1.0;
  }
  return out;
}

}  // namespace

std::vector<double> softmax(std::span<const double> z) {
  const double mx = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - mx);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

LossAndGrad kl_loss_and_grad(std::span<const double> z, const TokenIds& targets) {
  return kl_impl(z, targets, softmax);
}

LossAndGrad column_ce_loss_and_grad(std::span<const double> z, const TokenIds& targets) {
  return ce_impl(z, targets, softmax);
}

LossAndGrad mse_target_loss_and_grad(std::span<const double> z, const TokenIds& targets, double m) {
  check_targets(z, targets);
  LossAndGrad out{0.0, std::vector<double>(z.size(), 0.0)};
  for (int t : targets) {
    const double diff = z[static_cast<std::size_t>(t)] - m;
    out.loss += diff * diff;
    out.grad[static_cast<std::size_t>(t)] = 2.0 * diff;
  }
  return out;
}

double sigmoid_grad_factor(double x) {
  const double e = std::exp(-std::abs(x));
  return e / ((1.0 + e) * (1.0 + e));
}

LossAndGrad sigmoid_target_loss_and_grad(std::span<const double> z, const TokenIds& targets) {
  check_targets(z, targets);
  LossAndGrad out{0.0, std::vector<double>(z.size(), 0.0)};
  for (int t : targets) {
    const double x = z[static_cast<std::size_t>(t)];
    const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    out.loss -= s;
    out.grad[static_cast<std::size_t>(t)] = -sigmoid_grad_factor(x);
  }
  return out;
}

std::vector<SaturationRow> sigmoid_saturation_probe(std::span<const double> magnitudes,
                                                    const TokenIds& targets, int vocab_size) {
  std::vector<SaturationRow> rows;
  for (double m : magnitudes) {
    if (!(m >= 0.0)) throw ArgumentError("saturation probe magnitudes must be non-negative");
    std::vector<double> z(static_cast<std::size_t>(vocab_size), 0.0);
    for (int t : targets) z.at(static_cast<std::size_t>(t)) = m;
    const auto lg = sigmoid_target_loss_and_grad(z, targets);
    double inf = 0.0;
    for (double g : lg.grad) inf = std::max(inf, std::abs(g));
    rows.push_back({m, sigmoid_grad_factor(m), inf});
  }
  return rows;
}

std::string to_string(LossId id) {
  switch (id) {
    case LossId::kKl:
      return "kl";
    case LossId::kCe:
      return "ce";
    case LossId::kMse:
      return "mse";
    case LossId::kSigmoid:
    default:
      return "sigmoid";
  }
}

LossId parse_loss_id(const std::string& s) {
  if (s == "kl") return LossId::kKl;
  if (s == "ce") return LossId::kCe;
  if (s == "mse") return LossId::kMse;
  if (s == "sigmoid") return LossId::kSigmoid;
  throw ArgumentError("unknown loss id '" + s + "'");
}

double default_mse_target(std::span<const double> z) {
  return *std::max_element(z.begin(), z.end()) + 1.0;
}

GradCheckReport grad_check(LossId loss, std::span<const double> z, const TokenIds& targets,
                           const GradCheckParams& params) {
  GradCheckReport report;
  report.loss = loss;
  report.vocab_size = z.size();
  report.n_targets = targets.size();
  const SoftmaxFn sm = params.naive_softmax ? SoftmaxFn(naive_softmax) : SoftmaxFn(softmax);
  auto eval = [&](std::span<const double> x) -> LossAndGrad {
    switch (loss) {
      case LossId::kKl:
        return kl_impl(x, targets, sm);
      case LossId::kCe:
        return ce_impl(x, targets, sm);
      case LossId::kMse:
        return mse_target_loss_and_grad(x, targets, params.mse_target);
      case LossId::kSigmoid:
      default:
        return sigmoid_target_loss_and_grad(x, targets);
    }
  };
  try {
    const LossAndGrad base = eval(z);
    if (!std::isfinite(base.loss)) throw NumericError("loss is not finite");
    std::vector<double> x(z.begin(), z.end());
    double worst = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double orig = x[j];
      const double h = params.step * std::max(1.0, std::abs(orig));
      x[j] = orig + h;
      const double fp = eval(x).loss;
      x[j] = orig - h;
      const double fm = eval(x).loss;
      x[j] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = base.grad[j];
      if (!std::isfinite(fd) || !std::isfinite(an)) throw NumericError("non-finite gradient");
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-2});
      worst = std::max(worst, std::abs(fd - an) / denom);
    }
    report.max_rel_err = worst;
    report.pass = worst < params.tolerance;
  } catch (const NumericError& e) {
    report.numeric_error = true;
    report.pass = false;
    report.message = e.what();
  }
  return report;
}

}  // namespace steerlab::lossbench
