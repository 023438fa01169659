#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "steerlab/evalkit/metrics.hpp"
#include "steerlab/evalkit/synth.hpp"
#include "steerlab/lossbench/lossbench.hpp"
#include "steerlab/steering/steering.hpp"
#include "steerlab/tinylmm/train.hpp"

// Library side of the steerlab command line: every subcommand is a function
// taking a plain options struct so it can be driven without argv.
namespace steerlab::cli {

namespace fs = std::filesystem;

// Everything a command reads from a corpus directory written by gen-data.
struct CorpusDir {
  std::vector<evalkit::CorpusRecord> records;
  tinylmm::ImageTable images;
  std::vector<evalkit::TargetLexicon> lexicons;
  evalkit::SentimentLexicon sentiment;
  std::array<std::string, evalkit::kNumPrompts> prompts;
  // file -> checksum for every file read
  std::map<std::string, std::string> checksums;

  const evalkit::TargetLexicon& lexicon(const std::string& attribute) const;
  // image_id -> group for every record
  std::map<std::string, std::string> image_groups() const;
};

// `prompts` overrides the prompt file inside the directory.
CorpusDir load_corpus_dir(const fs::path& dir, const std::optional<fs::path>& prompts = std::nullopt);

// First bytes of the attribute's target words; the token a response starts
// with decides whether it opens with an attribute word.
steering::TargetTokenSet target_tokens(const evalkit::TargetLexicon& lexicon);

// Writes `<path>.run.json` holding the command name, resolved options,
// input checksums and a timestamp line.
void write_run_record(const fs::path& path, const std::string& command, const nlohmann::json& config,
                      const std::map<std::string, std::string>& inputs);

struct InitModelCommand {
  tinylmm::ModelConfig config;
  fs::path out;

  nlohmann::json to_json() const;
};

// Returns the model checksum.
std::string cmd_init_model(const InitModelCommand& cmd);

struct GenDataCommand {
  evalkit::SynthSpec spec = evalkit::SynthSpec::defaults();
  fs::path out_dir;

  nlohmann::json to_json() const;
};

void cmd_gen_data(const GenDataCommand& cmd);

struct TrainCommand {
  fs::path corpus_dir;
  std::optional<fs::path> init_model;  // otherwise initialized from `config`
  tinylmm::ModelConfig config;
  int steps = 3000;
  double learning_rate = 0.1;
  int batch_size = 8;
  double clip_norm = 1.0;
  std::uint64_t seed = 1;
  fs::path out;
  fs::path loss_csv;  // defaults to <out>.loss.csv
  bool verbose = false;

  nlohmann::json to_json() const;
};

tinylmm::TrainResult cmd_train(const TrainCommand& cmd);

struct DirectionCommand {
  steering::Method method = steering::Method::kDataset;
  std::string attribute = "age";
  fs::path model;
  fs::path corpus_dir;
  std::optional<fs::path> prompts;
  fs::path out;  // candidate scores go to <out>.candidates.json
  std::size_t candidates = 32;
  // Fixing the layer (and optionally position / multiplier) skips the grid.
  std::optional<int> layer;
  std::optional<std::string> position;
  double epsilon_multiplier = 1.0;
  std::optional<double> epsilon_override;
  steering::PerturbMode perturb_mode = steering::kDefaultPerturbMode;
  int selection_seeds = 3;
  double temperature = 1.0;
  int max_new_tokens = 40;
  // Candidates raising held-out attribute-free perplexity by more than this
  // fraction are disqualified; <= 0 disables the guard.
  double max_perplexity_increase = 0.2;
  // Candidates whose held-out responses name the image's occupation this
  // fraction less often than unsteered ones are disqualified; <= 0 disables.
  double max_occupation_drop = 0.15;
  std::uint64_t seed = 1;
  bool verbose = false;

  nlohmann::json to_json() const;
};

struct CandidateScore {
  steering::CandidateSpec spec;
  std::optional<double> mentions_per_generation;
  std::optional<double> perplexity_increase;
  std::optional<double> occupation_change;  // relative to unsteered held-out generations
  bool degenerate = false;
  double score = 0.0;  // +inf when disqualified or degenerate
};

struct DirectionResult {
  steering::SteeringDirection direction;
  std::size_t selected = 0;
  std::vector<CandidateScore> scores;
};

DirectionResult cmd_direction(const DirectionCommand& cmd);

// Gradient-method direction files carry the capture settings; the actual
// direction is re-estimated for every image.
struct Steering {
  steering::SteeringDirection direction;
  bool per_image = false;
  steering::TargetTokenSet targets;
  steering::PerturbMode perturb_mode = steering::kDefaultPerturbMode;
  tinylmm::TokenSequence probe_prompt;

  // Ablation for `image`.
  tinylmm::Ablation ablation_for(const tinylmm::ModelParams& model,
                                 const tinylmm::ImageTokens<float>& image) const;
};

Steering load_steering(const fs::path& direction_file, const std::string& model_checksum,
                       const std::array<std::string, evalkit::kNumPrompts>& prompts);

// Attribute-free records of `split` as (prompt + response, image) examples.
std::vector<tinylmm::Example> attribute_free_examples(const CorpusDir& corpus, const std::string& split);

// Token-weighted perplexity; every example gets its own steering when the
// direction is per image. `steer` may be null.
double steered_perplexity(const tinylmm::ModelParams& model, std::span<const tinylmm::Example> examples,
                          const Steering* steer);

struct GenerateCommand {
  fs::path model;
  fs::path corpus_dir;
  std::optional<fs::path> prompts;
  std::optional<fs::path> direction;
  std::string split = "eval";
  bool include_attribute_free = false;  // also generate for "none" images
  int seeds = evalkit::kSeedsPerPrompt;
  double temperature = 1.0;  // <= 0 or greedy -> greedy decoding
  bool greedy = false;
  int max_new_tokens = 40;
  std::optional<std::size_t> max_images;
  int workers = 1;
  std::uint64_t seed = 1;
  fs::path out;

  nlohmann::json to_json() const;
};

// Records in canonical order.
std::vector<evalkit::GenerationRecord> cmd_generate(const GenerateCommand& cmd);

struct EvaluateCommand {
  std::vector<fs::path> generations;
  fs::path corpus_dir;
  fs::path out_dir;  // report.csv, report.md, report.json

  nlohmann::json to_json() const;
};

evalkit::EvalReport cmd_evaluate(const EvaluateCommand& cmd);

struct LossbenchCommand {
  std::vector<int> vocab_sizes{8, 64, 256};
  std::vector<int> target_counts{1, 2, 4};
  int trials = 5;
  double logit_scale = 3.0;
  double mse_offset = 1.0;  // MSE target = max(z) + offset
  bool naive_softmax = false;
  std::vector<double> saturation_magnitudes{0, 1, 2, 5, 10, 20, 30, 50};
  std::uint64_t seed = 1;
  fs::path out;             // loss,V,N,max_rel_err,pass
  fs::path saturation_out;  // defaults to <out>.saturation.csv

  nlohmann::json to_json() const;
};

struct LossbenchResult {
  std::vector<lossbench::GradCheckReport> checks;
  std::vector<lossbench::SaturationRow> saturation;
  bool all_pass = true;
};

LossbenchResult cmd_lossbench(const LossbenchCommand& cmd);

}  // namespace steerlab::cli
