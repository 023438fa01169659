#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace steerlab::evalkit {

inline constexpr int kNumPrompts = 5;
inline constexpr int kSeedsPerPrompt = 3;

// Training / probing corpus line.
struct CorpusRecord {
  std::string id;
  std::string text;  // response text
  std::string image_id;
  std::string group;  // "none" for attribute-free images
  std::string occupation;
  int prompt_id = 0;
  std::string split;  // train | probe | eval
};

// One generated response.
struct GenerationRecord {
  std::string image_id;
  int prompt_id = 0;
  int seed = 0;
  std::string group;
  std::string occupation;
  std::string method = "unsteered";  // unsteered | dataset | gradient
  std::string text;

  void validate() const;
};

nlohmann::json to_json(const CorpusRecord& r);
CorpusRecord corpus_record_from_json(const nlohmann::json& j);
nlohmann::json to_json(const GenerationRecord& r);
GenerationRecord generation_record_from_json(const nlohmann::json& j);

std::vector<CorpusRecord> read_corpus(const std::filesystem::path& path);
void write_corpus(const std::vector<CorpusRecord>& records, const std::filesystem::path& path);
std::vector<GenerationRecord> read_generations(const std::filesystem::path& path);
void write_generations(const std::vector<GenerationRecord>& records, const std::filesystem::path& path);

// Canonical order: image_id, prompt_id, seed, method.
void sort_generations(std::vector<GenerationRecord>& records);

}  // namespace steerlab::evalkit
