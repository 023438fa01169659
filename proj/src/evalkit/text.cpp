#include "steerlab/evalkit/text.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "steerlab/error.hpp"

namespace steerlab::evalkit {

namespace {

bool is_punct(char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; }

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    lines.push_back(line);
  }
  return lines;
}

}  // namespace

std::vector<std::string> normalize_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string tok;
  while (in >> tok) {
    std::size_t b = 0, e = tok.size();
    while (b < e && is_punct(tok[b])) ++b;
    while (e > b && is_punct(tok[e - 1])) --e;
    if (b < e) out.push_back(lower(std::string_view(tok).substr(b, e - b)));
  }
  return out;
}

void TargetLexicon::validate() const {
  if (words.empty()) throw ArgumentError("target lexicon '" + attribute + "' has no words");
  for (const auto& w : words) {
    if (w.empty() || w != lower(w)) throw ArgumentError("target word '" + w + "' must be lowercase");
  }
  for (const auto& [k, v] : annotations) {
    if (normalize_words(k).size() != 2) {
      throw ArgumentError("bigram annotation '" + k + "' is not two words");
    }
  }
}

BigramCount count_attribute_bigrams(std::string_view text, const TargetLexicon& lexicon) {
  const auto words = normalize_words(text);
  BigramCount out;
  for (std::size_t i = 0; i + 1 < words.size(); ++i) {
    if (!lexicon.words.contains(words[i])) continue;
    std::string bigram = words[i] + " " + words[i + 1];
    const auto it = lexicon.annotations.find(bigram);
    if (it != lexicon.annotations.end() && it->second == BigramLabel::kExclude) continue;
    ++out.count;
    out.spans.push_back(std::move(bigram));
  }
  return out;
}

double compound_sentiment(std::string_view text, const SentimentLexicon& lexicon) {
  double s = 0.0;
  bool matched = false;
  for (const auto& w : normalize_words(text)) {
    const auto it = lexicon.valence.find(w);
    if (it != lexicon.valence.end()) {
      s += it->second;
      matched = true;
    }
  }
  if (!matched) return 0.0;
  return s / std::sqrt(s * s + lexicon.alpha);
}

Sentiment classify_sentiment(double score) {
  if (score >= 0.05) return Sentiment::kPositive;
  if (score <= -0.05) return Sentiment::kNegative;
  return Sentiment::kNeutral;
}

std::string to_string(Sentiment s) {
  switch (s) {
    case Sentiment::kPositive:
      return "positive";
    case Sentiment::kNegative:
      return "negative";
    case Sentiment::kNeutral:
    default:
      return "neutral";
  }
}

bool mentions_occupation(std::string_view text, std::string_view occupation, bool word_boundary) {
  const std::string hay = lower(text);
  const std::string needle = lower(occupation);
  if (needle.empty()) return false;
  auto is_word = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
  for (std::size_t pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) {
    if (!word_boundary) return true;
    const bool left_ok = pos == 0 || !is_word(hay[pos - 1]);
    const std::size_t end = pos + needle.size();
    const bool right_ok = end == hay.size() || !is_word(hay[end]);
    if (left_ok && right_ok) return true;
  }
  return false;
}

TargetLexicon load_target_lexicon(const std::string& attribute, const std::filesystem::path& words,
                                  const std::filesystem::path& annotations) {
  TargetLexicon lex;
  lex.attribute = attribute;
  for (const auto& line : read_lines(words)) {
    const auto w = normalize_words(line);
    if (w.size() != 1) throw FormatError(words.string() + ": expected one word per line: " + line);
    lex.words.insert(w[0]);
  }
  if (!annotations.empty() && std::filesystem::exists(annotations)) {
    for (const auto& line : read_lines(annotations)) {
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw FormatError(annotations.string() + ": missing TAB: " + line);
      const auto ws = normalize_words(line.substr(0, tab));
      const std::string label = line.substr(tab + 1);
      if (ws.size() != 2) throw FormatError(annotations.string() + ": not a bigram: " + line);
      if (label != "include" && label != "exclude") {
        throw FormatError(annotations.string() + ": label must be include|exclude: " + line);
      }
      lex.annotations[ws[0] + " " + ws[1]] = label == "include" ? BigramLabel::kInclude : BigramLabel::kExclude;
    }
  }
  lex.validate();
  return lex;
}

void save_target_lexicon(const TargetLexicon& lexicon, const std::filesystem::path& words,
                         const std::filesystem::path& annotations) {
  std::ofstream w(words);
  for (const auto& word : lexicon.words) w << word << '\n';
  std::ofstream a(annotations);
  for (const auto& [k, v] : lexicon.annotations) {
    a << k << '\t' << (v == BigramLabel::kInclude ? "include" : "exclude") << '\n';
  }
  if (!w || !a) throw ArgumentError("failed writing target lexicon files");
}

SentimentLexicon load_sentiment_lexicon(const std::filesystem::path& path) {
  SentimentLexicon lex;
  for (const auto& line : read_lines(path)) {
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError(path.string() + ": missing TAB: " + line);
    double v = 0.0;
    try {
      v = std::stod(line.substr(tab + 1));
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": bad valence: " + line);
    }
    if (!std::isfinite(v)) throw FormatError(path.string() + ": non-finite valence: " + line);
    lex.valence[lower(line.substr(0, tab))] = v;
  }
  return lex;
}

void save_sentiment_lexicon(const SentimentLexicon& lexicon, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot write " + path.string());
  out << std::setprecision(17);
  for (const auto& [w, v] : lexicon.valence) out << w << '\t' << v << '\n';
}

}  // namespace steerlab::evalkit
