#include "steerlab/steering/steering.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "steerlab/error.hpp"
#include "steerlab/linalg.hpp"

namespace steerlab::steering {

namespace {

using json = nlohmann::json;

std::vector<double> capture(const ModelParams& model, const TokenSequence& prompt,
                            const ImageTokens<float>& image, int layer,
                            const CapturePosition& position) {
  tinylmm::ForwardOptions opts;
  opts.capture_layers = {layer};
  opts.position = position;
  const auto fr = tinylmm::forward(model, prompt, image, opts);
  const auto& h = fr.trace.hidden.front();
  return std::vector<double>(h.data(), h.data() + h.size());
}

void check_layer(const ModelParams& model, int layer) {
  if (layer < 0 || layer >= model.config.n_layers) {
    throw ArgumentError("layer " + std::to_string(layer) + " out of range [0, " +
                        std::to_string(model.config.n_layers) + ")");
  }
}

std::vector<double> mean_activation(const ModelParams& model, std::span<const PromptImage> pairs,
                                    int layer, const CapturePosition& position) {
  std::vector<double> sum(static_cast<std::size_t>(model.config.d_model), 0.0);
  for (const PromptImage& p : pairs) {
    const auto h = capture(model, p.prompt, p.image, layer, position);
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += h[i];
  }
  for (double& v : sum) v /= static_cast<double>(pairs.size());
  return sum;
}

std::vector<int> spread_layers(int n_layers, int max_count) {
  std::vector<int> out;
  if (n_layers <= max_count) {
    for (int l = 0; l < n_layers; ++l) out.push_back(l);
    return out;
  }
  for (int i = 0; i < max_count; ++i) {
    out.push_back(static_cast<int>(std::lround(static_cast<double>(i) * (n_layers - 1) / (max_count - 1))));
  }
  return out;
}

std::vector<CapturePosition> position_sequence(std::size_t n) {
  std::vector<CapturePosition> out{CapturePosition::final_position(), CapturePosition::mean()};
  for (int k = 1; out.size() < n; ++k) out.push_back(CapturePosition::from_end(k));
  out.resize(std::max<std::size_t>(n, 1));
  return out;
}

}  // namespace

void TargetTokenSet::validate(int vocab_size) const {
  if (tokens.empty()) throw ArgumentError("target token set '" + attribute + "' is empty");
  std::set<TokenId> seen;
  for (const TokenId t : tokens) {
    if (t < 0 || t >= vocab_size) {
      throw ArgumentError("target token " + std::to_string(t) + " outside vocabulary");
    }
    if (!seen.insert(t).second) throw ArgumentError("duplicate target token " + std::to_string(t));
  }
}

std::string to_string(Method m) { return m == Method::kDataset ? "dataset" : "gradient"; }

Method parse_method(const std::string& s) {
  if (s == "dataset") return Method::kDataset;
  if (s == "gradient") return Method::kGradient;
  throw ArgumentError("unknown steering method '" + s + "'");
}

std::string to_string(PerturbMode m) { return m == PerturbMode::kPaperPlus ? "paper_plus" : "descent"; }

PerturbMode parse_perturb_mode(const std::string& s) {
  if (s == "paper_plus") return PerturbMode::kPaperPlus;
  if (s == "descent") return PerturbMode::kDescent;
  throw ArgumentError("unknown perturbation mode '" + s + "'");
}

double SteeringDirection::norm() const {
  double s = 0.0;
  for (double v : values) s += v * v;
  return std::sqrt(s);
}

tinylmm::Ablation SteeringDirection::to_ablation() const {
  if (!unit_norm) throw ArgumentError("steering direction must be normalized before use");
  return tinylmm::Ablation{values, true};
}

SteeringDirection diff_in_means_direction(const ModelParams& model, const ContrastDataset& data,
                                          int layer, CapturePosition position) {
  if (data.bias.empty() || data.standard.empty()) {
    throw ArgumentError("difference in means needs non-empty bias and standard sets");
  }
  check_layer(model, layer);
  const auto mb = mean_activation(model, data.bias, layer, position);
  const auto ms = mean_activation(model, data.standard, layer, position);
  SteeringDirection a;
  a.values.resize(mb.size());
  for (std::size_t i = 0; i < mb.size(); ++i) a.values[i] = mb[i] - ms[i];
  a.method = Method::kDataset;
  a.source_layer = layer;
  a.position = position;
  return a;
}

template <typename T>
ImageTokens<T> fgsm_perturb(const ImageTokens<T>& u, const tinylmm::Matrix<T>& grad, double epsilon,
                            PerturbMode mode) {
  if (u.rows() != grad.rows() || u.cols() != grad.cols()) {
    throw ArgumentError("gradient shape does not match image tokens");
  }
  // Largest representable bound not above epsilon.
  T bound = static_cast<T>(epsilon);
  if (static_cast<double>(bound) > epsilon) bound = std::nextafter(bound, T(0));
  const T step = mode == PerturbMode::kPaperPlus ? bound : -bound;
  ImageTokens<T> out = u;
  for (Eigen::Index i = 0; i < u.size(); ++i) {
    const T g = grad.data()[i];
    const T s = g > T(0) ? T(1) : (g < T(0) ? T(-1) : T(0));
    const T x = u.data()[i];
    T y = x + step * s;
    // u + step can round past the bound; pull back until |u' - u| <= epsilon holds exactly.
    while (std::abs(y - x) > bound) y = std::nextafter(y, x);
    out.data()[i] = y;
  }
  return out;
}

template ImageTokens<float> fgsm_perturb(const ImageTokens<float>&, const tinylmm::Matrix<float>&,
                                         double, PerturbMode);
template ImageTokens<double> fgsm_perturb(const ImageTokens<double>&,
                                          const tinylmm::Matrix<double>&, double, PerturbMode);

SteeringDirection gradient_direction(const ModelParams& model, const ImageTokens<float>& image,
                                     const TokenSequence& probe_prompt,
                                     const TargetTokenSet& targets, int layer,
                                     const GradientOptions& options) {
  check_layer(model, layer);
  targets.validate(model.config.vocab_size);
  const auto h = capture(model, probe_prompt, image, layer, options.position);
  const auto ig =
      tinylmm::backward_wrt_image_tokens<float>(model, probe_prompt, image, bias_loss_fn<float>(targets));
  const double eps = options.epsilon_override
                         ? *options.epsilon_override
                         : epsilon_from_tokens(image) * options.epsilon_multiplier;
  const ImageTokens<float> perturbed = fgsm_perturb(image, ig.grad, eps, options.mode);
  const auto h2 = capture(model, probe_prompt, perturbed, layer, options.position);

  SteeringDirection a;
  a.values.resize(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) a.values[i] = h2[i] - h[i];
  a.method = Method::kGradient;
  a.source_layer = layer;
  a.position = options.position;
  a.epsilon = eps;
  a.epsilon_multiplier = options.epsilon_multiplier;
  a.attribute = targets.attribute;
  return a;
}

SteeringDirection normalize(const SteeringDirection& a) {
  const double n = a.norm();
  if (!(n > 1e-12)) {
    throw DegenerateDirectionError(
        "steering direction has near-zero norm; the contrast passes were indistinguishable");
  }
  SteeringDirection out = a;
  for (double& v : out.values) v /= n;
  out.unit_norm = true;
  return out;
}

std::vector<double> ablate_residual(std::span<const double> r, const SteeringDirection& a) {
  if (r.size() != a.values.size()) throw ArgumentError("residual and direction differ in length");
  if (std::abs(a.norm() - 1.0) > 1e-6) throw ArgumentError("ablation needs a unit-norm direction");
  std::vector<double> out(r.begin(), r.end());
  project_out(std::span<double>(out), std::span<const double>(a.values));
  return out;
}

Selection select_direction(CandidateSet& set, const CandidateScorer& scorer) {
  if (set.candidates.empty()) throw ArgumentError("no candidate directions to select from");
  if (set.held_out.empty()) throw ArgumentError("candidate selection needs held-out pairs");
  std::size_t best = 0;
  for (std::size_t i = 0; i < set.candidates.size(); ++i) {
    const double s = scorer(set.candidates[i].direction, set.held_out);
    set.candidates[i].score = s;
    if (s < *set.candidates[best].score) best = i;
  }
  return {best, set.candidates[best].direction};
}

std::vector<CandidateSpec> gradient_candidate_grid(int n_layers, std::size_t count) {
  const std::vector<int> layers = spread_layers(n_layers, 8);
  const std::vector<double> multipliers{0.5, 1.0, 2.0, 4.0};
  std::vector<CandidateSpec> out;
  const auto positions = position_sequence(count);
  for (const CapturePosition& pos : positions) {
    for (int l : layers) {
      for (double m : multipliers) {
        if (out.size() == count) return out;
        out.push_back({l, pos, m});
      }
    }
  }
  return out;
}

std::vector<CandidateSpec> dataset_candidate_grid(int n_layers, std::size_t count) {
  const std::vector<int> layers = spread_layers(n_layers, 8);
  std::vector<CandidateSpec> out;
  const auto positions = position_sequence(count);
  for (const CapturePosition& pos : positions) {
    for (int l : layers) {
      if (out.size() == count) return out;
      out.push_back({l, pos, 1.0});
    }
  }
  return out;
}

json to_json(const SteeringDirection& a, const std::string& model_checksum) {
  json j = {{"attribute", a.attribute},
            {"method", to_string(a.method)},
            {"layer", a.source_layer},
            {"position", a.position.to_string()},
            {"epsilon", a.epsilon ? json(*a.epsilon) : json(nullptr)},
            {"epsilon_multiplier", a.epsilon_multiplier},
            {"d", a.values.size()},
            {"unit_norm", a.unit_norm},
            {"values", a.values},
            {"model_checksum", model_checksum}};
  return j;
}

SteeringDirection direction_from_json(const json& j) {
  SteeringDirection a;
  try {
    a.attribute = j.value("attribute", "");
    a.method = parse_method(j.at("method").get<std::string>());
    a.source_layer = j.at("layer").get<int>();
    a.position = CapturePosition::parse(j.value("position", "final"));
    if (j.contains("epsilon") && !j.at("epsilon").is_null()) a.epsilon = j.at("epsilon").get<double>();
    a.epsilon_multiplier = j.value("epsilon_multiplier", 1.0);
    a.unit_norm = j.at("unit_norm").get<bool>();
    a.values = j.at("values").get<std::vector<double>>();
    if (a.values.size() != j.at("d").get<std::size_t>()) {
      throw FormatError("direction file: 'd' does not match number of values");
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed direction file: ") + e.what());
  }
  if (a.unit_norm && std::abs(a.norm() - 1.0) > 1e-6) {
    throw FormatError("direction file claims unit_norm but values are not unit length");
  }
  return a;
}

void save_direction(const SteeringDirection& a, const std::string& model_checksum,
                    const std::filesystem::path& path, const json& extra) {
  json j = to_json(a, model_checksum);
  if (extra.is_object()) {
    for (const auto& [k, v] : extra.items()) j[k] = v;
  }
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

SteeringDirection load_direction(const std::filesystem::path& path,
                                 const std::string& expected_model_checksum) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  const std::string file_checksum = j.value("model_checksum", "");
  if (file_checksum != expected_model_checksum) {
    throw ArgumentError(path.string() + ": direction was estimated on model " + file_checksum +
                        ", loaded model is " + expected_model_checksum);
  }
  return direction_from_json(j);
}

}  // namespace steerlab::steering
