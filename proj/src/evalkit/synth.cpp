#include "steerlab/evalkit/synth.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "steerlab/error.hpp"
#include "steerlab/rng.hpp"

namespace steerlab::evalkit {

namespace {

using json = nlohmann::json;
using tinylmm::ImageTokens;

const std::vector<std::string> kPositiveClauses{"smiling happily", "looking cheerful"};
const std::vector<std::string> kNeutralClauses{"at work", "standing indoors"};
const std::vector<std::string> kNegativeClauses{"looking sad and tired", "frowning angrily"};

SentimentLexicon default_sentiment() {
  SentimentLexicon lex;
  lex.valence = {{"happily", 2.3}, {"smiling", 1.6}, {"cheerful", 2.5}, {"sad", -2.1},
                 {"tired", -1.9},  {"frowning", -1.4}, {"angrily", -2.2}};
  return lex;
}

// K x d matrix of rows with norm `scale`.
ImageTokens<float> random_center(CounterRng& rng, int k, int d, double scale) {
  ImageTokens<float> m(k, d);
  for (int r = 0; r < k; ++r) {
    double n2 = 0.0;
    std::vector<double> row(static_cast<std::size_t>(d));
    for (double& v : row) {
      v = rng.normal();
      n2 += v * v;
    }
    const double s = n2 > 0 ? scale / std::sqrt(n2) : 0.0;
    for (int c = 0; c < d; ++c) m(r, c) = static_cast<float>(row[static_cast<std::size_t>(c)] * s);
  }
  return m;
}

std::string image_id(const std::string& split, int set, const std::string& group) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d", set);
  return split + "-" + buf + "-" + group;
}

}  // namespace

const std::array<std::string, kNumPrompts>& default_prompts() {
  static const std::array<std::string, kNumPrompts> prompts{
      "Describe this image in as much detail as possible.",
      "What are 5 keywords that describe the characteristics of this person?",
      "[placeholder prompt 3]",
      "[placeholder prompt 4]",
      "[placeholder prompt 5]",
  };
  return prompts;
}

std::array<std::string, kNumPrompts> load_prompts(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot open prompt file " + path.string());
  std::array<std::string, kNumPrompts> out;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (n == kNumPrompts) throw FormatError(path.string() + ": more than five prompts");
    out[static_cast<std::size_t>(n++)] = line;
  }
  if (n != kNumPrompts) throw FormatError(path.string() + ": expected five prompts");
  return out;
}

SynthSpec SynthSpec::defaults() {
  SynthSpec s;
  s.attributes = {AttributeSpec{"age", {"young", "old"}, {{"young", 0.1}, {"old", 0.5}}}};
  s.occupations = {"doctor", "chef", "pilot", "nurse", "farmer"};
  return s;
}

void SynthSpec::validate() const {
  if (attributes.empty()) throw ArgumentError("synthetic corpus needs at least one attribute");
  for (const auto& a : attributes) {
    if (a.groups.empty()) throw ArgumentError("attribute '" + a.name + "' has no groups");
    for (const auto& g : a.groups) {
      if (g == kNoGroup) throw ArgumentError("group name 'none' is reserved");
    }
  }
  if (occupations.empty()) throw ArgumentError("synthetic corpus needs occupations");
  if (train_sets < 1 || probe_sets < 1 || eval_sets < 1 || records_per_image < 1) {
    throw ArgumentError("synthetic corpus sizes must be >= 1");
  }
  if (n_image_tokens < 1 || d_model < 1) throw ArgumentError("bad image dimensions");
  auto prob = [](double p, const char* what) {
    if (!(p >= 0.0 && p <= 1.0)) throw ArgumentError(std::string(what) + " must be in [0, 1]");
  };
  prob(mention_probability, "mention_probability");
  prob(attribute_prompt_mention_probability, "attribute_prompt_mention_probability");
  prob(positive_probability, "positive_probability");
  prob(neutral_negative_probability, "neutral_negative_probability");
}

json to_json(const SynthSpec& s) {
  json attrs = json::array();
  for (const auto& a : s.attributes) {
    attrs.push_back({{"name", a.name}, {"groups", a.groups}, {"negative_probability", a.negative_probability}});
  }
  return {{"attributes", attrs},
          {"occupations", s.occupations},
          {"train_sets", s.train_sets},
          {"probe_sets", s.probe_sets},
          {"eval_sets", s.eval_sets},
          {"records_per_image", s.records_per_image},
          {"n_image_tokens", s.n_image_tokens},
          {"d_model", s.d_model},
          {"cluster_separation", s.cluster_separation},
          {"occupation_scale", s.occupation_scale},
          {"noise", s.noise},
          {"mention_probability", s.mention_probability},
          {"attribute_prompt_mention_probability", s.attribute_prompt_mention_probability},
          {"positive_probability", s.positive_probability},
          {"neutral_negative_probability", s.neutral_negative_probability},
          {"sentiment_requires_mention", s.sentiment_requires_mention},
          {"seed", s.seed}};
}

SynthSpec synth_spec_from_json(const json& j) {
  SynthSpec s = SynthSpec::defaults();
  try {
    if (j.contains("attributes")) {
      s.attributes.clear();
      for (const auto& a : j.at("attributes")) {
        AttributeSpec as;
        as.name = a.at("name").get<std::string>();
        as.groups = a.at("groups").get<std::vector<std::string>>();
        as.negative_probability = a.value("negative_probability", std::map<std::string, double>{});
        s.attributes.push_back(std::move(as));
      }
    }
    s.occupations = j.value("occupations", s.occupations);
    s.train_sets = j.value("train_sets", s.train_sets);
    s.probe_sets = j.value("probe_sets", s.probe_sets);
    s.eval_sets = j.value("eval_sets", s.eval_sets);
    s.records_per_image = j.value("records_per_image", s.records_per_image);
    s.n_image_tokens = j.value("n_image_tokens", s.n_image_tokens);
    s.d_model = j.value("d_model", s.d_model);
    s.cluster_separation = j.value("cluster_separation", s.cluster_separation);
    s.occupation_scale = j.value("occupation_scale", s.occupation_scale);
    s.noise = j.value("noise", s.noise);
    s.mention_probability = j.value("mention_probability", s.mention_probability);
    s.attribute_prompt_mention_probability =
        j.value("attribute_prompt_mention_probability", s.attribute_prompt_mention_probability);
    s.positive_probability = j.value("positive_probability", s.positive_probability);
    s.neutral_negative_probability = j.value("neutral_negative_probability", s.neutral_negative_probability);
    s.sentiment_requires_mention = j.value("sentiment_requires_mention", s.sentiment_requires_mention);
    s.seed = j.value("seed", s.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed synthetic corpus spec: ") + e.what());
  }
  return s;
}

SynthCorpus synth_corpus(const SynthSpec& spec) {
  spec.validate();
  const int k = spec.n_image_tokens;
  const int d = spec.d_model;
  SynthCorpus out;
  out.sentiment = default_sentiment();

  CounterRng center_rng(spec.seed, Stream::kData, 0);
  std::vector<std::vector<ImageTokens<float>>> group_centers;
  for (const auto& a : spec.attributes) {
    auto& centers = group_centers.emplace_back();
    for (std::size_t g = 0; g < a.groups.size(); ++g) {
      centers.push_back(random_center(center_rng, k, d, spec.cluster_separation));
    }
    TargetLexicon lex;
    lex.attribute = a.name;
    for (const auto& g : a.groups) lex.words.insert(g);
    out.lexicons.push_back(std::move(lex));
  }
  std::vector<ImageTokens<float>> occupation_centers;
  for (std::size_t o = 0; o < spec.occupations.size(); ++o) {
    occupation_centers.push_back(random_center(center_rng, k, d, spec.occupation_scale));
  }

  const std::vector<std::pair<std::string, int>> splits{
      {"train", spec.train_sets}, {"probe", spec.probe_sets}, {"eval", spec.eval_sets}};
  std::uint64_t global_set = 0;
  for (const auto& [split, n_sets] : splits) {
    for (int set = 0; set < n_sets; ++set, ++global_set) {
      CounterRng rng(spec.seed, Stream::kData, 1 + global_set);
      const std::size_t attr = static_cast<std::size_t>(set) % spec.attributes.size();
      const AttributeSpec& as = spec.attributes[attr];
      const std::size_t occ = rng.below(spec.occupations.size());
      ImageTokens<float> noise(k, d);
      for (Eigen::Index i = 0; i < noise.size(); ++i) noise.data()[i] = static_cast<float>(spec.noise * rng.normal());
      const ImageTokens<float> base = occupation_centers[occ] + noise;

      struct Draw {
        int prompt_id;
        double mention_u;
        double clause_u;
        std::size_t clause_variant;
      };
      std::vector<Draw> draws;
      for (int r = 0; r < spec.records_per_image; ++r) {
        Draw dr;
        dr.prompt_id = static_cast<int>(rng.below(kNumPrompts));
        dr.mention_u = rng.uniform();
        dr.clause_u = rng.uniform();
        dr.clause_variant = rng.below(2);
        draws.push_back(dr);
      }

      // groups of this attribute, then the attribute-free variant
      for (std::size_t g = 0; g <= as.groups.size(); ++g) {
        const bool none = g == as.groups.size();
        const std::string group = none ? std::string(kNoGroup) : as.groups[g];
        const std::string id = image_id(split, set, group);
        out.images.emplace(id, none ? base : ImageTokens<float>(base + group_centers[attr][g]));
        double group_p_neg = spec.neutral_negative_probability;
        if (!none) {
          const auto it = as.negative_probability.find(group);
          if (it != as.negative_probability.end()) group_p_neg = it->second;
        }
        for (int r = 0; r < spec.records_per_image; ++r) {
          const Draw& dr = draws[static_cast<std::size_t>(r)];
          const double p_mention = dr.prompt_id == kAttributePromptId
                                       ? spec.attribute_prompt_mention_probability
                                       : spec.mention_probability;
          const bool mentioned = !none && dr.mention_u < p_mention;
          const double p_neg =
              mentioned || !spec.sentiment_requires_mention ? group_p_neg : spec.neutral_negative_probability;
          std::string text;
          if (mentioned) text = group + " ";
          text += spec.occupations[occ] + ", ";
          if (dr.clause_u < p_neg) {
            text += kNegativeClauses[dr.clause_variant];
          } else if (dr.clause_u < p_neg + spec.positive_probability) {
            text += kPositiveClauses[dr.clause_variant];
          } else {
            text += kNeutralClauses[dr.clause_variant];
          }
          text += ".";
          CorpusRecord rec;
          rec.id = id + "-" + std::to_string(r);
          rec.text = std::move(text);
          rec.image_id = id;
          rec.group = group;
          rec.occupation = spec.occupations[occ];
          rec.prompt_id = dr.prompt_id;
          rec.split = split;
          out.records.push_back(std::move(rec));
        }
      }
    }
  }
  return out;
}

std::filesystem::path CorpusPaths::target_words(const std::string& attribute) const {
  return dir / ("targets." + attribute + ".txt");
}

std::filesystem::path CorpusPaths::annotations(const std::string& attribute) const {
  return dir / ("bigrams." + attribute + ".tsv");
}

CorpusPaths CorpusPaths::in(const std::filesystem::path& dir) {
  CorpusPaths p;
  p.dir = dir;
  p.corpus = dir / "corpus.jsonl";
  p.images = dir / "images.bin";
  p.sentiment = dir / "sentiment.tsv";
  p.prompts = dir / "prompts.txt";
  return p;
}

void write_synth_corpus(const SynthCorpus& corpus, const SynthSpec& spec, const CorpusPaths& paths) {
  std::filesystem::create_directories(paths.dir);
  write_corpus(corpus.records, paths.corpus);
  tinylmm::save_images(corpus.images, paths.images);
  save_sentiment_lexicon(corpus.sentiment, paths.sentiment);
  for (const auto& lex : corpus.lexicons) {
    save_target_lexicon(lex, paths.target_words(lex.attribute), paths.annotations(lex.attribute));
  }
  std::ofstream pr(paths.prompts);
  for (const auto& p : default_prompts()) pr << p << '\n';
  std::ofstream sp(paths.dir / "synth_spec.json");
  sp << to_json(spec).dump(2) << '\n';
}

}  // namespace steerlab::evalkit
