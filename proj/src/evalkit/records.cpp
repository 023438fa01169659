#include "steerlab/evalkit/records.hpp"

#include <algorithm>
#include <fstream>
#include <tuple>

#include "steerlab/error.hpp"

namespace steerlab::evalkit {

namespace {

using json = nlohmann::json;

template <typename Record, typename Parse>
std::vector<Record> read_jsonl(const std::filesystem::path& path, Parse parse) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot open " + path.string());
  std::vector<Record> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(parse(json::parse(line)));
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

template <typename Record>
void write_jsonl(const std::vector<Record>& records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ArgumentError("cannot write " + path.string());
  for (const auto& r : records) out << to_json(r).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
}

}  // namespace

void GenerationRecord::validate() const {
  if (prompt_id < 0 || prompt_id >= kNumPrompts) {
    throw FormatError("generation record prompt_id " + std::to_string(prompt_id) + " out of range");
  }
  if (method != "unsteered" && method != "dataset" && method != "gradient") {
    throw FormatError("generation record has unknown method '" + method + "'");
  }
}

json to_json(const CorpusRecord& r) {
  return {{"id", r.id},       {"text", r.text},
          {"image_id", r.image_id}, {"group", r.group},
          {"occupation", r.occupation}, {"prompt_id", r.prompt_id},
          {"split", r.split}};
}

CorpusRecord corpus_record_from_json(const json& j) {
  CorpusRecord r;
  r.id = j.at("id").get<std::string>();
  r.text = j.at("text").get<std::string>();
  r.image_id = j.at("image_id").get<std::string>();
  r.group = j.at("group").get<std::string>();
  r.occupation = j.at("occupation").get<std::string>();
  r.prompt_id = j.value("prompt_id", 0);
  r.split = j.value("split", "train");
  return r;
}

json to_json(const GenerationRecord& r) {
  return {{"image_id", r.image_id}, {"prompt_id", r.prompt_id}, {"seed", r.seed},
          {"group", r.group},       {"occupation", r.occupation}, {"method", r.method},
          {"text", r.text}};
}

GenerationRecord generation_record_from_json(const json& j) {
  GenerationRecord r;
  r.image_id = j.at("image_id").get<std::string>();
  r.prompt_id = j.at("prompt_id").get<int>();
  r.seed = j.at("seed").get<int>();
  r.group = j.at("group").get<std::string>();
  r.occupation = j.value("occupation", "");
  r.method = j.value("method", "unsteered");
  r.text = j.at("text").get<std::string>();
  r.validate();
  return r;
}

std::vector<CorpusRecord> read_corpus(const std::filesystem::path& path) {
  return read_jsonl<CorpusRecord>(path, corpus_record_from_json);
}

void write_corpus(const std::vector<CorpusRecord>& records, const std::filesystem::path& path) {
  write_jsonl(records, path);
}

std::vector<GenerationRecord> read_generations(const std::filesystem::path& path) {
  return read_jsonl<GenerationRecord>(path, generation_record_from_json);
}

void write_generations(const std::vector<GenerationRecord>& records, const std::filesystem::path& path) {
  write_jsonl(records, path);
}

void sort_generations(std::vector<GenerationRecord>& records) {
  std::stable_sort(records.begin(), records.end(), [](const auto& a, const auto& b) {
    return std::tie(a.image_id, a.prompt_id, a.seed, a.method) <
           std::tie(b.image_id, b.prompt_id, b.seed, b.method);
  });
}

}  // namespace steerlab::evalkit
