#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "steerlab/evalkit/records.hpp"
#include "steerlab/evalkit/text.hpp"
#include "steerlab/tinylmm/io.hpp"

namespace steerlab::evalkit {

// The five open-ended evaluation prompts. Entries 0 and 1 are the two named
// prompts; 2..4 are placeholders.
const std::array<std::string, kNumPrompts>& default_prompts();
std::array<std::string, kNumPrompts> load_prompts(const std::filesystem::path& path);

// Prompt used to elicit attribute mentions (dataset contrast and gradient probe).
inline constexpr int kAttributePromptId = 1;

inline constexpr const char* kNoGroup = "none";

struct AttributeSpec {
  std::string name;
  std::vector<std::string> groups;  // also the words the texts use
  std::map<std::string, double> negative_probability;  // per group; missing -> neutral rate
};

struct SynthSpec {
  std::vector<AttributeSpec> attributes;
  std::vector<std::string> occupations;
  int train_sets = 160;
  int probe_sets = 10;
  int eval_sets = 40;
  int records_per_image = 3;
  int n_image_tokens = 4;
  int d_model = 64;
  double cluster_separation = 3.0;  // norm of each group-center row
  double occupation_scale = 3.0;    // norm of each occupation-center row
  double noise = 0.5;               // per-entry Gaussian std
  double mention_probability = 0.6;
  double attribute_prompt_mention_probability = 0.9;
  double positive_probability = 0.3;
  double neutral_negative_probability = 0.2;  // for attribute-free images
  // Group-conditioned negativity only in texts that name the group; other
  // texts use the neutral rate.
  bool sentiment_requires_mention = true;
  std::uint64_t seed = 7;

  static SynthSpec defaults();
  void validate() const;
};

nlohmann::json to_json(const SynthSpec& spec);
SynthSpec synth_spec_from_json(const nlohmann::json& j);

struct SynthCorpus {
  std::vector<CorpusRecord> records;
  tinylmm::ImageTable images;
  std::vector<TargetLexicon> lexicons;
  SentimentLexicon sentiment;
};

// Counterfactual sets: every set fixes an occupation and a noise draw and
// emits one image per group of one attribute plus an attribute-free image
// (group "none"). Image rows are group center + occupation center + noise.
// Texts share their random draws across the set, so paired records differ
// only in the group word (and in group-conditioned sentiment).
SynthCorpus synth_corpus(const SynthSpec& spec);

struct CorpusPaths {
  std::filesystem::path corpus;     // corpus.jsonl
  std::filesystem::path images;     // images.bin
  std::filesystem::path sentiment;  // sentiment.tsv
  std::filesystem::path prompts;    // prompts.txt

  // words / annotation files per attribute
  std::filesystem::path target_words(const std::string& attribute) const;
  std::filesystem::path annotations(const std::string& attribute) const;

  static CorpusPaths in(const std::filesystem::path& dir);
  std::filesystem::path dir;
};

void write_synth_corpus(const SynthCorpus& corpus, const SynthSpec& spec, const CorpusPaths& paths);

}  // namespace steerlab::evalkit
