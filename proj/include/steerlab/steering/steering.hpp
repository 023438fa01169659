#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "steerlab/tinylmm/model.hpp"

namespace steerlab::steering {

using tinylmm::CapturePosition;
using tinylmm::ImageTokens;
using tinylmm::ModelParams;
using tinylmm::RowVector;
using tinylmm::TokenId;
using tinylmm::TokenSequence;

// Token ids tied to one protected attribute.
struct TargetTokenSet {
  std::string attribute;
  std::vector<TokenId> tokens;

  // Throws ArgumentError when empty, duplicated or outside [0, vocab_size).
  void validate(int vocab_size) const;
};

struct PromptImage {
  TokenSequence prompt;
  ImageTokens<float> image;
};

struct ContrastDataset {
  std::vector<PromptImage> bias;
  std::vector<PromptImage> standard;
};

enum class Method { kDataset, kGradient };

std::string to_string(Method m);
Method parse_method(const std::string& s);

struct SteeringDirection {
  std::vector<double> values;
  bool unit_norm = false;
  Method method = Method::kDataset;
  int source_layer = 0;
  CapturePosition position;
  std::optional<double> epsilon;  // gradient method only
  double epsilon_multiplier = 1.0;
  std::string attribute;

  double norm() const;
  tinylmm::Ablation to_ablation() const;
};

// mean_{D_bias} h^l - mean_{D_standard} h^l, read at `position`.
SteeringDirection diff_in_means_direction(const ModelParams& model, const ContrastDataset& data,
                                          int layer,
                                          CapturePosition position = CapturePosition::final_position());

// L = (1/|T|) sum_t (z_t - M_t)^2 with M_t = z_t + max(z) held constant, so
// L = max(z)^2 and dL/dz_t = -(2/|T|) max(z) on T, zero elsewhere.
template <typename T>
T bias_loss(const RowVector<T>& z, const TargetTokenSet& targets, RowVector<T>& grad) {
  targets.validate(static_cast<int>(z.size()));
  const T mx = z.maxCoeff();
  const T inv_n = T(1) / static_cast<T>(targets.tokens.size());
  grad = RowVector<T>::Zero(z.size());
  T loss = T(0);
  for (const TokenId t : targets.tokens) {
    const T target = z(t) + mx;  // frozen
    const T diff = z(t) - target;
    loss += diff * diff;
    grad(t) = T(2) * inv_n * diff;
  }
  return loss * inv_n;
}

template <typename T>
tinylmm::LogitLoss<T> bias_loss_fn(const TargetTokenSet& targets) {
  return [targets](const RowVector<T>& z, RowVector<T>& grad) { return bias_loss(z, targets, grad); };
}

// Population std of |u| over all entries, halved; 1e-3 when that is < 1e-6.
template <typename T>
double epsilon_from_tokens(const ImageTokens<T>& u) {
  const double n = static_cast<double>(u.size());
  double mean = 0.0;
  for (Eigen::Index i = 0; i < u.size(); ++i) mean += std::abs(static_cast<double>(u.data()[i]));
  mean /= n;
  double var = 0.0;
  for (Eigen::Index i = 0; i < u.size(); ++i) {
    const double dlt = std::abs(static_cast<double>(u.data()[i])) - mean;
    var += dlt * dlt;
  }
  const double eps = std::sqrt(var / n) / 2.0;
  return eps < 1e-6 ? 1e-3 : eps;
}

// kPaperPlus: u + eps*sign(grad). kDescent: u - eps*sign(grad).
enum class PerturbMode { kPaperPlus, kDescent };

// Chosen so the perturbation raises the mean target logit: the frozen-target
// loss is minimized by larger target logits, so the step descends it.
inline constexpr PerturbMode kDefaultPerturbMode = PerturbMode::kDescent;

std::string to_string(PerturbMode m);
PerturbMode parse_perturb_mode(const std::string& s);

template <typename T>
ImageTokens<T> fgsm_perturb(const ImageTokens<T>& u, const tinylmm::Matrix<T>& grad, double epsilon,
                            PerturbMode mode = kDefaultPerturbMode);

struct GradientOptions {
  double epsilon_multiplier = 1.0;
  std::optional<double> epsilon_override;  // replaces epsilon_from_tokens
  PerturbMode mode = kDefaultPerturbMode;
  CapturePosition position = CapturePosition::final_position();
};

// h^l(x, u') - h^l(x, u) where u' is one signed-gradient step on the bias loss.
SteeringDirection gradient_direction(const ModelParams& model, const ImageTokens<float>& image,
                                     const TokenSequence& probe_prompt,
                                     const TargetTokenSet& targets, int layer,
                                     const GradientOptions& options = {});

// Throws DegenerateDirectionError when ||a|| <= 1e-12.
SteeringDirection normalize(const SteeringDirection& a);

// r - a<a, r>; throws ArgumentError unless `a` is unit length.
std::vector<double> ablate_residual(std::span<const double> r, const SteeringDirection& a);

struct Candidate {
  SteeringDirection direction;
  std::optional<double> score;
};

struct CandidateSet {
  std::vector<Candidate> candidates;
  std::vector<PromptImage> held_out;
};

// Lower is better (e.g. attribute mentions over steered held-out generations).
using CandidateScorer = std::function<double(const SteeringDirection&, std::span<const PromptImage>)>;

struct Selection {
  std::size_t index = 0;
  SteeringDirection direction;
};

// Scores every candidate in index order and returns the minimum; ties go to
// the lowest index.
Selection select_direction(CandidateSet& candidates, const CandidateScorer& scorer);

// Grid entries describe how to estimate one candidate.
struct CandidateSpec {
  int layer = 0;
  CapturePosition position;
  double epsilon_multiplier = 1.0;
};

// Gradient method: up to 8 layers x multipliers {0.5, 1, 2, 4}; models with
// fewer layers repeat the grid at further capture positions (mean, final-1..).
std::vector<CandidateSpec> gradient_candidate_grid(int n_layers, std::size_t count = 32);

// Dataset method: layers x capture positions {final, mean, final-1, ...}.
std::vector<CandidateSpec> dataset_candidate_grid(int n_layers, std::size_t count = 32);

// Direction files.
nlohmann::json to_json(const SteeringDirection& a, const std::string& model_checksum);
SteeringDirection direction_from_json(const nlohmann::json& j);

void save_direction(const SteeringDirection& a, const std::string& model_checksum,
                    const std::filesystem::path& path, const nlohmann::json& extra = {});

// Refuses (ArgumentError) a direction estimated on a different model.
SteeringDirection load_direction(const std::filesystem::path& path,
                                 const std::string& expected_model_checksum);

}  // namespace steerlab::steering
