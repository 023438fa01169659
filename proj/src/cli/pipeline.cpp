#include "steerlab/cli/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iostream>
#include <limits>
#include <set>
#include <thread>

#include "steerlab/error.hpp"
#include "steerlab/rng.hpp"
#include "steerlab/tinylmm/io.hpp"
#include "steerlab/tinylmm/tokenizer.hpp"

namespace steerlab::cli {

namespace {

using json = nlohmann::json;
using evalkit::CorpusRecord;
using evalkit::GenerationRecord;
using tinylmm::Example;
using tinylmm::ImageTokens;
using tinylmm::ModelParams;
namespace tok = tinylmm::tokenizer;

constexpr double kInf = std::numeric_limits<double>::infinity();

std::string timestamp_utc() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

fs::path with_suffix(const fs::path& p, const std::string& suffix) { return fs::path(p.string() + suffix); }

void require_path(const fs::path& p, const std::string& what) {
  if (p.empty()) throw ArgumentError(what + " path is required");
}

void require_file(const fs::path& p, const std::string& what) {
  require_path(p, what);
  if (!fs::is_regular_file(p)) throw ArgumentError(what + " not found: " + p.string());
}

void require_dir(const fs::path& p, const std::string& what) {
  require_path(p, what);
  if (!fs::is_directory(p)) throw ArgumentError(what + " is not a directory: " + p.string());
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

json optional_json(const auto& v) { return v ? json(*v) : json(nullptr); }

std::string path_string(const std::optional<fs::path>& p) { return p ? p->string() : std::string(); }

void check_model_matches(const ModelParams& model, const CorpusDir& corpus) {
  if (corpus.images.empty()) return;
  const auto& [id, img] = *corpus.images.begin();
  if (img.rows() != model.config.n_image_tokens || img.cols() != model.config.d_model) {
    throw ConfigError("image '" + id + "' is " + std::to_string(img.rows()) + "x" +
                      std::to_string(img.cols()) + " but the model expects " +
                      std::to_string(model.config.n_image_tokens) + "x" +
                      std::to_string(model.config.d_model));
  }
}

// Unique image ids of one split whose group belongs to the lexicon (or is
// "none" when `attribute_free`), in id order.
std::vector<std::string> split_images(const CorpusDir& corpus, const std::string& split,
                                      const evalkit::TargetLexicon* lexicon, bool attribute_free) {
  std::set<std::string> ids;
  for (const CorpusRecord& r : corpus.records) {
    if (r.split != split) continue;
    const bool none = r.group == evalkit::kNoGroup;
    if (attribute_free ? none : (!none && (!lexicon || lexicon->words.count(r.group)))) ids.insert(r.image_id);
  }
  return {ids.begin(), ids.end()};
}

struct HeldOutCounts {
  long long bigrams = 0;
  std::size_t occupation_hits = 0;
  std::size_t generations = 0;

  double mentions_per_generation() const { return static_cast<double>(bigrams) / static_cast<double>(generations); }
  double occupation_rate() const {
    return static_cast<double>(occupation_hits) / static_cast<double>(generations);
  }
};

// Sampling seed for one (image, prompt, seed) triple; shared by every
// steering method so their generations are paired.
std::uint64_t decode_seed(std::uint64_t global_seed, std::string_view image_id, int prompt_id, int seed_index) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const unsigned char c : image_id) h = (h ^ c) * 0x100000001b3ull;
  const std::uint64_t slot = static_cast<std::uint64_t>(prompt_id) << 32 | static_cast<std::uint32_t>(seed_index);
  return splitmix64(global_seed ^ splitmix64(h ^ splitmix64(slot)));
}

}  // namespace

std::vector<Example> attribute_free_examples(const CorpusDir& corpus, const std::string& split) {
  std::vector<Example> out;
  for (const CorpusRecord& r : corpus.records) {
    if (r.split != split || r.group != evalkit::kNoGroup) continue;
    out.push_back({tok::training_tokens(corpus.prompts[static_cast<std::size_t>(r.prompt_id)], r.text),
                   corpus.images.at(r.image_id)});
  }
  return out;
}

double steered_perplexity(const ModelParams& model, std::span<const Example> examples,
                          const Steering* steer) {
  if (!steer || !steer->per_image) {
    tinylmm::Ablation ab;
    if (steer) ab = steer->direction.to_ablation();
    return tinylmm::perplexity(model, examples, steer ? &ab : nullptr);
  }
  double nll = 0.0;
  double count = 0.0;
  for (const Example& ex : examples) {
    if (ex.text.size() < 2) continue;
    const tinylmm::Ablation ab = steer->ablation_for(model, ex.image);
    const double n = static_cast<double>(ex.text.size() - 1);
    nll += std::log(tinylmm::perplexity(model, std::span<const Example>(&ex, 1), &ab)) * n;
    count += n;
  }
  if (count == 0) throw ArgumentError("perplexity corpus has no next-token predictions");
  return std::exp(nll / count);
}


const evalkit::TargetLexicon& CorpusDir::lexicon(const std::string& attribute) const {
  for (const auto& lex : lexicons) {
    if (lex.attribute == attribute) return lex;
  }
  throw ArgumentError("corpus has no target lexicon for attribute '" + attribute + "'");
}

std::map<std::string, std::string> CorpusDir::image_groups() const {
  std::map<std::string, std::string> out;
  for (const CorpusRecord& r : records) out[r.image_id] = r.group;
  return out;
}

CorpusDir load_corpus_dir(const fs::path& dir, const std::optional<fs::path>& prompts) {
  require_dir(dir, "corpus directory");
  const auto paths = evalkit::CorpusPaths::in(dir);
  CorpusDir out;
  auto track = [&](const fs::path& p) { out.checksums[p.string()] = tinylmm::file_checksum(p); };
  require_file(paths.corpus, "corpus file");
  out.records = evalkit::read_corpus(paths.corpus);
  track(paths.corpus);
  require_file(paths.images, "image file");
  out.images = tinylmm::load_images(paths.images);
  track(paths.images);
  require_file(paths.sentiment, "sentiment lexicon");
  out.sentiment = evalkit::load_sentiment_lexicon(paths.sentiment);
  track(paths.sentiment);
  const fs::path prompt_file = prompts ? *prompts : paths.prompts;
  if (fs::exists(prompt_file)) {
    out.prompts = evalkit::load_prompts(prompt_file);
    track(prompt_file);
  } else {
    out.prompts = evalkit::default_prompts();
  }
  std::vector<fs::path> word_files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.starts_with("targets.") && name.ends_with(".txt")) word_files.push_back(entry.path());
  }
  std::sort(word_files.begin(), word_files.end());
  for (const fs::path& words : word_files) {
    const std::string name = words.filename().string();
    const std::string attribute = name.substr(8, name.size() - 12);
    const fs::path ann = paths.annotations(attribute);
    out.lexicons.push_back(evalkit::load_target_lexicon(attribute, words, ann));
    track(words);
    if (fs::exists(ann)) track(ann);
  }
  if (out.lexicons.empty()) throw FormatError(dir.string() + ": no targets.<attribute>.txt lexicon files");
  for (const CorpusRecord& r : out.records) {
    if (!out.images.count(r.image_id)) {
      throw FormatError("corpus record '" + r.id + "' refers to unknown image '" + r.image_id + "'");
    }
    if (r.prompt_id < 0 || r.prompt_id >= evalkit::kNumPrompts) {
      throw FormatError("corpus record '" + r.id + "' has prompt_id outside [0, 5)");
    }
  }
  return out;
}

steering::TargetTokenSet target_tokens(const evalkit::TargetLexicon& lexicon) {
  steering::TargetTokenSet t;
  t.attribute = lexicon.attribute;
  std::set<tinylmm::TokenId> ids;
  for (const std::string& w : lexicon.words) {
    if (w.empty()) continue;
    ids.insert(static_cast<unsigned char>(w.front()));
  }
  t.tokens.assign(ids.begin(), ids.end());
  t.validate(tok::kVocabSize);
  return t;
}

void write_run_record(const fs::path& path, const std::string& command, const json& config,
                      const std::map<std::string, std::string>& inputs) {
  nlohmann::ordered_json j;
  j["generated_at"] = timestamp_utc();
  j["command"] = command;
  j["config"] = config;
  j["inputs"] = inputs;
  ensure_parent(path);
  std::ofstream out(with_suffix(path, ".run.json"));
  out << j.dump(2) << '\n';
}

// ---- init-model ----

json InitModelCommand::to_json() const { return {{"config", tinylmm::to_json(config)}, {"out", out.string()}}; }

std::string cmd_init_model(const InitModelCommand& cmd) {
  require_path(cmd.out, "output model");
  cmd.config.validate();
  const ModelParams params = tinylmm::init_params(cmd.config);
  ensure_parent(cmd.out);
  tinylmm::save_params(params, cmd.out);
  write_run_record(cmd.out, "init-model", cmd.to_json(), {});
  return tinylmm::checksum(params);
}

// ---- gen-data ----

json GenDataCommand::to_json() const { return {{"spec", evalkit::to_json(spec)}, {"out_dir", out_dir.string()}}; }

void cmd_gen_data(const GenDataCommand& cmd) {
  require_path(cmd.out_dir, "output directory");
  const evalkit::SynthCorpus corpus = evalkit::synth_corpus(cmd.spec);
  evalkit::write_synth_corpus(corpus, cmd.spec, evalkit::CorpusPaths::in(cmd.out_dir));
  write_run_record(cmd.out_dir / "corpus", "gen-data", cmd.to_json(), {});
}

// ---- train ----

json TrainCommand::to_json() const {
  return {{"corpus_dir", corpus_dir.string()},
          {"init_model", path_string(init_model)},
          {"config", tinylmm::to_json(config)},
          {"steps", steps},
          {"learning_rate", learning_rate},
          {"batch_size", batch_size},
          {"clip_norm", clip_norm},
          {"seed", seed},
          {"out", out.string()},
          {"loss_csv", loss_csv.string()}};
}

tinylmm::TrainResult cmd_train(const TrainCommand& cmd) {
  require_path(cmd.out, "output model");
  const CorpusDir corpus = load_corpus_dir(cmd.corpus_dir);
  std::map<std::string, std::string> inputs = corpus.checksums;
  ModelParams init;
  if (cmd.init_model) {
    require_file(*cmd.init_model, "initial model");
    init = tinylmm::load_params(*cmd.init_model);
    inputs[cmd.init_model->string()] = tinylmm::file_checksum(*cmd.init_model);
  } else {
    cmd.config.validate();
    init = tinylmm::init_params(cmd.config);
  }
  check_model_matches(init, corpus);
  std::vector<Example> examples;
  for (const CorpusRecord& r : corpus.records) {
    if (r.split != "train") continue;
    examples.push_back({tok::training_tokens(corpus.prompts[static_cast<std::size_t>(r.prompt_id)], r.text),
                        corpus.images.at(r.image_id)});
  }
  if (examples.empty()) throw ArgumentError("corpus has no train-split records");

  tinylmm::TrainOptions opts;
  opts.steps = cmd.steps;
  opts.learning_rate = cmd.learning_rate;
  opts.batch_size = cmd.batch_size;
  opts.clip_norm = cmd.clip_norm;
  opts.seed = cmd.seed;
  if (cmd.verbose) {
    opts.on_step = [&](int step, double loss) {
      if ((step + 1) % 100 == 0) std::cerr << "step " << step + 1 << " loss " << loss << '\n';
    };
  }
  tinylmm::TrainResult result = tinylmm::train_toy(init, examples, opts);

  ensure_parent(cmd.out);
  tinylmm::save_params(result.params, cmd.out);
  const fs::path csv = cmd.loss_csv.empty() ? with_suffix(cmd.out, ".loss.csv") : cmd.loss_csv;
  ensure_parent(csv);
  std::ofstream out(csv);
  out << "step,loss\n";
  out.precision(9);
  for (std::size_t i = 0; i < result.loss_curve.size(); ++i) out << i << ',' << result.loss_curve[i] << '\n';
  write_run_record(cmd.out, "train", cmd.to_json(), inputs);
  return result;
}

// ---- direction ----

json DirectionCommand::to_json() const {
  return {{"method", steering::to_string(method)},
          {"attribute", attribute},
          {"model", model.string()},
          {"corpus_dir", corpus_dir.string()},
          {"prompts", path_string(prompts)},
          {"out", out.string()},
          {"candidates", candidates},
          {"layer", optional_json(layer)},
          {"position", optional_json(position)},
          {"epsilon_multiplier", epsilon_multiplier},
          {"epsilon_override", optional_json(epsilon_override)},
          {"perturb_mode", steering::to_string(perturb_mode)},
          {"selection_seeds", selection_seeds},
          {"temperature", temperature},
          {"max_new_tokens", max_new_tokens},
          {"max_perplexity_increase", max_perplexity_increase},
          {"max_occupation_drop", max_occupation_drop},
          {"seed", seed}};
}

tinylmm::Ablation Steering::ablation_for(const ModelParams& model, const ImageTokens<float>& image) const {
  if (!per_image) return direction.to_ablation();
  steering::GradientOptions go;
  go.epsilon_multiplier = direction.epsilon_multiplier;
  go.mode = perturb_mode;
  go.position = direction.position;
  const steering::SteeringDirection raw =
      steering::gradient_direction(model, image, probe_prompt, targets, direction.source_layer, go);
  return steering::normalize(raw).to_ablation();
}

namespace {

json candidate_json(const CandidateScore& c) {
  return {{"layer", c.spec.layer},
          {"position", c.spec.position.to_string()},
          {"epsilon_multiplier", c.spec.epsilon_multiplier},
          {"mentions_per_generation", optional_json(c.mentions_per_generation)},
          {"perplexity_increase", optional_json(c.perplexity_increase)},
          {"occupation_change", optional_json(c.occupation_change)},
          {"degenerate", c.degenerate},
          {"score", std::isfinite(c.score) ? json(c.score) : json(nullptr)}};
}

}  // namespace

DirectionResult cmd_direction(const DirectionCommand& cmd) {
  require_path(cmd.out, "output direction");
  require_file(cmd.model, "model");
  const ModelParams model = tinylmm::load_params(cmd.model);
  const std::string model_sum = tinylmm::checksum(model);
  const CorpusDir corpus = load_corpus_dir(cmd.corpus_dir, cmd.prompts);
  check_model_matches(model, corpus);
  std::map<std::string, std::string> inputs = corpus.checksums;
  inputs[cmd.model.string()] = tinylmm::file_checksum(cmd.model);
  if (cmd.candidates < 1) throw ArgumentError("need at least one candidate");
  if (cmd.selection_seeds < 1) throw ArgumentError("selection_seeds must be >= 1");

  const evalkit::TargetLexicon& lexicon = corpus.lexicon(cmd.attribute);
  const steering::TargetTokenSet targets = target_tokens(lexicon);
  const tinylmm::TokenSequence probe_prompt =
      tok::prompt_tokens(corpus.prompts[evalkit::kAttributePromptId]);

  // Candidate grid.
  std::vector<steering::CandidateSpec> specs;
  if (cmd.layer) {
    steering::CandidateSpec s{*cmd.layer, steering::CapturePosition::final_position(), cmd.epsilon_multiplier};
    if (cmd.position) s.position = steering::CapturePosition::parse(*cmd.position);
    specs.push_back(s);
  } else {
    specs = cmd.method == steering::Method::kDataset
                ? steering::dataset_candidate_grid(model.config.n_layers, cmd.candidates)
                : steering::gradient_candidate_grid(model.config.n_layers, cmd.candidates);
    if (cmd.position) {
      const auto pos = steering::CapturePosition::parse(*cmd.position);
      for (auto& s : specs) s.position = pos;
    }
  }

  // Data.
  const auto held_out_ids = split_images(corpus, "probe", &lexicon, false);
  if (held_out_ids.empty()) throw ArgumentError("corpus has no probe-split images for the attribute");
  std::vector<steering::PromptImage> held_out;
  for (const auto& id : held_out_ids) held_out.push_back({probe_prompt, corpus.images.at(id)});
  std::map<std::string, std::string> occupations;
  for (const CorpusRecord& r : corpus.records) occupations.emplace(r.image_id, r.occupation);
  steering::ContrastDataset contrast;
  if (cmd.method == steering::Method::kDataset) {
    for (const auto& id : split_images(corpus, "train", &lexicon, false)) {
      contrast.bias.push_back({probe_prompt, corpus.images.at(id)});
    }
    for (const auto& id : split_images(corpus, "train", nullptr, true)) {
      contrast.standard.push_back({probe_prompt, corpus.images.at(id)});
    }
  }
  const std::vector<Example> ppl_examples = attribute_free_examples(corpus, "probe");
  const bool ppl_guard = cmd.max_perplexity_increase > 0 && !ppl_examples.empty();
  const double base_ppl = ppl_guard ? steered_perplexity(model, ppl_examples, nullptr) : 0.0;

  // Estimate every candidate.
  steering::CandidateSet set;
  set.held_out = held_out;
  std::vector<CandidateScore> scores;
  std::vector<std::optional<DegenerateDirectionError>> degenerate;
  for (const auto& spec : specs) {
    steering::SteeringDirection raw;
    if (cmd.method == steering::Method::kDataset) {
      raw = steering::diff_in_means_direction(model, contrast, spec.layer, spec.position);
    } else {
      steering::GradientOptions go;
      go.epsilon_multiplier = spec.epsilon_multiplier;
      go.epsilon_override = cmd.epsilon_override;
      go.mode = cmd.perturb_mode;
      go.position = spec.position;
      // The stored values are the estimate on the first held-out image.
      raw = steering::gradient_direction(model, held_out.front().image, probe_prompt, targets, spec.layer, go);
    }
    raw.attribute = cmd.attribute;
    CandidateScore cs;
    cs.spec = spec;
    try {
      set.candidates.push_back({steering::normalize(raw), std::nullopt});
      degenerate.emplace_back();
    } catch (const DegenerateDirectionError& e) {
      set.candidates.push_back({raw, std::nullopt});
      degenerate.emplace_back(e);
      cs.degenerate = true;
    }
    scores.push_back(cs);
  }
  if (std::all_of(degenerate.begin(), degenerate.end(), [](const auto& d) { return d.has_value(); })) {
    throw *degenerate.front();
  }

  // Sampled generations on the held-out pairs: attribute bigrams and how many
  // responses still name the image's occupation.
  std::vector<std::string> held_out_occupations;
  for (const auto& id : held_out_ids) held_out_occupations.push_back(occupations.at(id));
  const auto sample_held_out = [&](std::span<const steering::PromptImage> pairs, const auto& ablation_for) {
    HeldOutCounts c;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const auto& pair = pairs[i];
      std::optional<tinylmm::Ablation> ab = ablation_for(pair.image);
      for (int s = 0; s < cmd.selection_seeds; ++s) {
        tinylmm::DecodeOptions d = tinylmm::DecodeOptions::sampled(
            cmd.temperature, decode_seed(cmd.seed, std::to_string(i), evalkit::kAttributePromptId, s));
        d.stop_token = tok::kEos;
        const auto out = tinylmm::generate(model, pair.prompt, pair.image, ab ? &*ab : nullptr, d, cmd.max_new_tokens);
        const std::string text = tok::decode(out);
        c.bigrams += evalkit::count_attribute_bigrams(text, lexicon).count;
        c.occupation_hits += evalkit::mentions_occupation(text, held_out_occupations[i]) ? 1 : 0;
        ++c.generations;
      }
    }
    return c;
  };
  HeldOutCounts base_counts;
  if (cmd.max_occupation_drop > 0) {
    base_counts = sample_held_out(held_out, [](const auto&) { return std::optional<tinylmm::Ablation>(); });
  }
  // Nothing to preserve when unsteered responses never name the occupation.
  const bool occupation_guard = base_counts.occupation_hits > 0;

  std::size_t index = 0;
  const steering::CandidateScorer scorer = [&](const steering::SteeringDirection& dir,
                                               std::span<const steering::PromptImage> pairs) {
    CandidateScore& cs = scores[index];
    const std::size_t i = index++;
    if (degenerate[i]) {
      cs.score = kInf;
      return kInf;
    }
    Steering steer;
    steer.direction = dir;
    steer.per_image = cmd.method == steering::Method::kGradient;
    steer.targets = targets;
    steer.perturb_mode = cmd.perturb_mode;
    steer.probe_prompt = probe_prompt;
    if (steer.per_image && cmd.epsilon_override) {
      // a fixed epsilon cannot be re-derived per image; use the estimate as is
      steer.per_image = false;
    }
    const HeldOutCounts counts = sample_held_out(pairs, [&](const ImageTokens<float>& image) {
      return std::optional<tinylmm::Ablation>(steer.ablation_for(model, image));
    });
    cs.mentions_per_generation = counts.mentions_per_generation();
    if (occupation_guard) cs.occupation_change = counts.occupation_rate() / base_counts.occupation_rate() - 1.0;
    cs.score = *cs.mentions_per_generation;
    if (occupation_guard && *cs.occupation_change < -cmd.max_occupation_drop) cs.score = kInf;
    if (ppl_guard) {
      const double ppl = steered_perplexity(model, ppl_examples, &steer);
      cs.perplexity_increase = ppl / base_ppl - 1.0;
      if (*cs.perplexity_increase > cmd.max_perplexity_increase) cs.score = kInf;
    }
    if (cmd.verbose) {
      std::cerr << "candidate " << i << " layer " << cs.spec.layer << " " << cs.spec.position.to_string()
                << " x" << cs.spec.epsilon_multiplier << ": " << *cs.mentions_per_generation
                << (cs.occupation_change ? " occupation " + std::to_string(*cs.occupation_change) : "")
                << (cs.perplexity_increase ? " ppl " + std::to_string(*cs.perplexity_increase) : "") << '\n';
    }
    return cs.score;
  };
  const steering::Selection sel = steering::select_direction(set, scorer);
  if (degenerate[sel.index]) throw *degenerate[sel.index];

  DirectionResult result{sel.direction, sel.index, scores};
  json extra = {{"per_image", cmd.method == steering::Method::kGradient && !cmd.epsilon_override},
                {"perturb_mode", steering::to_string(cmd.perturb_mode)},
                {"target_tokens", targets.tokens},
                {"selected_candidate", sel.index}};
  ensure_parent(cmd.out);
  steering::save_direction(result.direction, model_sum, cmd.out, extra);

  json cands = json::array();
  for (const auto& c : scores) cands.push_back(candidate_json(c));
  std::ofstream side(with_suffix(cmd.out, ".candidates.json"));
  side << json{{"selected", sel.index},
               {"baseline_perplexity", ppl_guard ? json(base_ppl) : json(nullptr)},
               {"baseline_mentions_per_generation",
                occupation_guard ? json(base_counts.mentions_per_generation()) : json(nullptr)},
               {"baseline_occupation_rate", occupation_guard ? json(base_counts.occupation_rate()) : json(nullptr)},
               {"candidates", cands}}
              .dump(2)
       << '\n';
  write_run_record(cmd.out, "direction", cmd.to_json(), inputs);
  return result;
}

Steering load_steering(const fs::path& direction_file, const std::string& model_checksum,
                       const std::array<std::string, evalkit::kNumPrompts>& prompts) {
  require_file(direction_file, "direction file");
  Steering s;
  s.direction = steering::load_direction(direction_file, model_checksum);
  if (!s.direction.unit_norm) throw FormatError(direction_file.string() + ": direction is not normalized");
  std::ifstream in(direction_file);
  const json j = json::parse(in);
  s.per_image = j.value("per_image", false);
  s.perturb_mode = steering::parse_perturb_mode(j.value("perturb_mode", steering::to_string(steering::kDefaultPerturbMode)));
  s.targets.attribute = s.direction.attribute;
  s.targets.tokens = j.value("target_tokens", std::vector<tinylmm::TokenId>{});
  if (s.per_image) s.targets.validate(tok::kVocabSize);
  s.probe_prompt = tok::prompt_tokens(prompts[evalkit::kAttributePromptId]);
  return s;
}

// ---- generate ----

json GenerateCommand::to_json() const {
  return {{"model", model.string()},
          {"corpus_dir", corpus_dir.string()},
          {"prompts", path_string(prompts)},
          {"direction", path_string(direction)},
          {"split", split},
          {"include_attribute_free", include_attribute_free},
          {"seeds", seeds},
          {"temperature", temperature},
          {"greedy", greedy},
          {"max_new_tokens", max_new_tokens},
          {"max_images", optional_json(max_images)},
          {"workers", workers},
          {"seed", seed},
          {"out", out.string()}};
}

std::vector<GenerationRecord> cmd_generate(const GenerateCommand& cmd) {
  require_path(cmd.out, "output generations");
  require_file(cmd.model, "model");
  if (cmd.seeds < 1) throw ArgumentError("seeds must be >= 1");
  if (cmd.workers < 1) throw ArgumentError("workers must be >= 1");
  const ModelParams model = tinylmm::load_params(cmd.model);
  const CorpusDir corpus = load_corpus_dir(cmd.corpus_dir, cmd.prompts);
  check_model_matches(model, corpus);
  std::map<std::string, std::string> inputs = corpus.checksums;
  inputs[cmd.model.string()] = tinylmm::file_checksum(cmd.model);

  std::optional<Steering> steer;
  std::string method = "unsteered";
  if (cmd.direction) {
    steer = load_steering(*cmd.direction, tinylmm::checksum(model), corpus.prompts);
    method = steering::to_string(steer->direction.method);
    inputs[cmd.direction->string()] = tinylmm::file_checksum(*cmd.direction);
  }

  // One entry per image: its first corpus record supplies group and occupation.
  std::map<std::string, const CorpusRecord*> images;
  for (const CorpusRecord& r : corpus.records) {
    if (r.split != cmd.split) continue;
    if (r.group == evalkit::kNoGroup && !cmd.include_attribute_free) continue;
    images.emplace(r.image_id, &r);
  }
  if (images.empty()) throw ArgumentError("no images in split '" + cmd.split + "'");
  std::vector<const CorpusRecord*> work;
  for (const auto& [id, r] : images) {
    if (cmd.max_images && work.size() >= *cmd.max_images) break;
    work.push_back(r);
  }

  const bool greedy = cmd.greedy || cmd.temperature <= 0.0;
  const std::size_t per_image = static_cast<std::size_t>(evalkit::kNumPrompts * cmd.seeds);
  std::vector<GenerationRecord> records(work.size() * per_image);
  std::vector<tinylmm::TokenSequence> prompt_tokens;
  for (const auto& p : corpus.prompts) prompt_tokens.push_back(tok::prompt_tokens(p));

  auto run_image = [&](std::size_t w) {
    const CorpusRecord& src = *work[w];
    const ImageTokens<float>& image = corpus.images.at(src.image_id);
    std::optional<tinylmm::Ablation> ab;
    if (steer) ab = steer->ablation_for(model, image);
    for (int p = 0; p < evalkit::kNumPrompts; ++p) {
      for (int s = 0; s < cmd.seeds; ++s) {
        tinylmm::DecodeOptions d = greedy ? tinylmm::DecodeOptions::greedy()
                                          : tinylmm::DecodeOptions::sampled(cmd.temperature, decode_seed(cmd.seed, src.image_id, p, s));
        d.stop_token = tok::kEos;
        const auto out = tinylmm::generate(model, prompt_tokens[static_cast<std::size_t>(p)], image,
                                           ab ? &*ab : nullptr, d, cmd.max_new_tokens);
        GenerationRecord& g = records[w * per_image + static_cast<std::size_t>(p * cmd.seeds + s)];
        g.image_id = src.image_id;
        g.prompt_id = p;
        g.seed = s;
        g.group = src.group;
        g.occupation = src.occupation;
        g.method = method;
        g.text = tok::decode(out);
      }
    }
  };

  const std::size_t n_workers = std::min<std::size_t>(static_cast<std::size_t>(cmd.workers), work.size());
  if (n_workers <= 1) {
    for (std::size_t w = 0; w < work.size(); ++w) run_image(w);
  } else {
    std::vector<std::exception_ptr> errors(n_workers);
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < n_workers; ++t) {
      threads.emplace_back([&, t] {
        try {
          for (std::size_t w = t; w < work.size(); w += n_workers) run_image(w);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : threads) th.join();
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  evalkit::sort_generations(records);
  ensure_parent(cmd.out);
  evalkit::write_generations(records, cmd.out);
  json cfg = cmd.to_json();
  cfg.erase("workers");  // output does not depend on it
  write_run_record(cmd.out, "generate", cfg, inputs);
  return records;
}

// ---- evaluate ----

json EvaluateCommand::to_json() const {
  json gens = json::array();
  for (const auto& g : generations) gens.push_back(g.string());
  return {{"generations", gens}, {"corpus_dir", corpus_dir.string()}, {"out_dir", out_dir.string()}};
}

evalkit::EvalReport cmd_evaluate(const EvaluateCommand& cmd) {
  require_path(cmd.out_dir, "output directory");
  if (cmd.generations.empty()) throw ArgumentError("evaluate needs at least one generations file");
  const CorpusDir corpus = load_corpus_dir(cmd.corpus_dir);
  std::map<std::string, std::string> inputs = corpus.checksums;
  std::vector<GenerationRecord> records;
  for (const fs::path& p : cmd.generations) {
    require_file(p, "generations file");
    auto part = evalkit::read_generations(p);
    records.insert(records.end(), part.begin(), part.end());
    inputs[p.string()] = tinylmm::file_checksum(p);
  }
  evalkit::sort_generations(records);

  std::set<std::string> groups;
  for (const auto& lex : corpus.lexicons) groups.insert(lex.words.begin(), lex.words.end());
  const evalkit::EvalReport report =
      evalkit::build_report(records, corpus.lexicons, corpus.sentiment, {groups.begin(), groups.end()});

  fs::create_directories(cmd.out_dir);
  {
    std::ofstream out(cmd.out_dir / "report.csv");
    out << evalkit::report_csv(report);
  }
  {
    nlohmann::ordered_json header;
    header["config"] = cmd.to_json();
    header["inputs"] = inputs;
    std::ofstream out(cmd.out_dir / "report.md");
    out << "generated_at: " << timestamp_utc() << "\n\n";
    out << evalkit::report_markdown(report);
    out << "\n## Run configuration\n\n```json\n" << header.dump(2) << "\n```\n";
  }
  {
    json rows = json::array();
    for (const auto& r : report.rows) {
      rows.push_back({{"attribute", r.attribute},
                      {"method", r.method},
                      {"generations", r.generations},
                      {"mentions_per_1k", r.mentions_per_1k},
                      {"mention_fraction", r.mention_fraction},
                      {"occupation_rate", r.occupation_rate},
                      {"occupation_change", r.occupation_change},
                      {"negative_per_1k", r.negative_rates},
                      {"negative_variance", r.negative_variance},
                      {"negative_range", r.negative_range}});
    }
    nlohmann::ordered_json j;
    j["generated_at"] = timestamp_utc();
    j["config"] = cmd.to_json();
    j["inputs"] = inputs;
    j["warnings"] = report.warnings;
    j["rows"] = rows;
    std::ofstream out(cmd.out_dir / "report.json");
    out << j.dump(2) << '\n';
  }
  return report;
}

// ---- lossbench ----

json LossbenchCommand::to_json() const {
  return {{"vocab_sizes", vocab_sizes},
          {"target_counts", target_counts},
          {"trials", trials},
          {"logit_scale", logit_scale},
          {"mse_offset", mse_offset},
          {"naive_softmax", naive_softmax},
          {"saturation_magnitudes", saturation_magnitudes},
          {"seed", seed},
          {"out", out.string()},
          {"saturation_out", saturation_out.string()}};
}

LossbenchResult cmd_lossbench(const LossbenchCommand& cmd) {
  require_path(cmd.out, "output CSV");
  if (cmd.trials < 1) throw ArgumentError("trials must be >= 1");
  LossbenchResult result;
  CounterRng rng(cmd.seed, Stream::kProbe);
  const std::vector<lossbench::LossId> losses{lossbench::LossId::kKl, lossbench::LossId::kCe,
                                              lossbench::LossId::kMse, lossbench::LossId::kSigmoid};
  for (int v : cmd.vocab_sizes) {
    for (int n : cmd.target_counts) {
      if (v < 1 || n < 1 || n > v) {
        throw ArgumentError("need 1 <= targets <= vocab (got V=" + std::to_string(v) + ", N=" + std::to_string(n) + ")");
      }
      for (int trial = 0; trial < cmd.trials; ++trial) {
        std::vector<double> z(static_cast<std::size_t>(v));
        for (double& x : z) x = cmd.logit_scale * rng.normal();
        std::vector<int> ids(static_cast<std::size_t>(v));
        for (int i = 0; i < v; ++i) ids[static_cast<std::size_t>(i)] = i;
        for (int i = 0; i < n; ++i) {  // partial Fisher-Yates
          const auto j = static_cast<std::size_t>(i) + rng.below(static_cast<std::uint64_t>(v - i));
          std::swap(ids[static_cast<std::size_t>(i)], ids[j]);
        }
        const lossbench::TokenIds targets(ids.begin(), ids.begin() + n);
        lossbench::GradCheckParams params;
        params.mse_target = lossbench::default_mse_target(z) - 1.0 + cmd.mse_offset;
        params.naive_softmax = cmd.naive_softmax;
        for (lossbench::LossId id : losses) {
          auto report = lossbench::grad_check(id, z, targets, params);
          result.all_pass = result.all_pass && report.pass;
          result.checks.push_back(std::move(report));
        }
      }
    }
  }
  std::vector<int> sat_targets{0};
  result.saturation = lossbench::sigmoid_saturation_probe(cmd.saturation_magnitudes, sat_targets, 8);

  ensure_parent(cmd.out);
  {
    std::ofstream out(cmd.out);
    out << "loss,V,N,max_rel_err,pass\n";
    for (const auto& c : result.checks) {
      char err[32];
      std::snprintf(err, sizeof err, "%.3e", c.max_rel_err);
      out << lossbench::to_string(c.loss) << ',' << c.vocab_size << ',' << c.n_targets << ','
          << (c.numeric_error ? std::string("nan") : std::string(err)) << ',' << (c.pass ? "true" : "false") << '\n';
    }
  }
  {
    const fs::path sat = cmd.saturation_out.empty() ? with_suffix(cmd.out, ".saturation.csv") : cmd.saturation_out;
    std::ofstream out(sat);
    out << "magnitude,grad_factor,grad_inf_norm\n";
    for (const auto& r : result.saturation) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "%g,%.6e,%.6e", r.magnitude, r.grad_factor, r.grad_inf_norm);
      out << buf << '\n';
    }
  }
  write_run_record(cmd.out, "lossbench", cmd.to_json(), {});
  return result;
}

}  // namespace steerlab::cli
