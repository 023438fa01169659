#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace steerlab::evalkit {

// Lowercase, split on whitespace, strip punctuation at both token edges;
// tokens that become empty are dropped.
std::vector<std::string> normalize_words(std::string_view text);

enum class BigramLabel { kInclude, kExclude };

struct TargetLexicon {
  std::string attribute;
  std::set<std::string> words;
  std::map<std::string, BigramLabel> annotations;  // key "w1 w2"

  void validate() const;
};

struct BigramCount {
  int count = 0;
  std::vector<std::string> spans;  // "w1 w2" per counted bigram, in text order
};

// Every adjacent (w1, w2) with w1 a target word counts unless annotated
// exclude.
BigramCount count_attribute_bigrams(std::string_view text, const TargetLexicon& lexicon);

struct SentimentLexicon {
  std::map<std::string, double> valence;
  double alpha = 15.0;
};

// s / sqrt(s^2 + alpha) for s the sum of matched valences; 0 without matches.
double compound_sentiment(std::string_view text, const SentimentLexicon& lexicon);

enum class Sentiment { kPositive, kNeutral, kNegative };

// >= 0.05 positive, <= -0.05 negative.
Sentiment classify_sentiment(double score);
std::string to_string(Sentiment s);

// Whole-word (default) or raw substring, case-insensitive.
bool mentions_occupation(std::string_view text, std::string_view occupation, bool word_boundary = true);

// File formats: target words one per line; annotations "w1 w2<TAB>include|exclude";
// sentiment "word<TAB>valence". Blank lines and lines starting with '#' are skipped.
TargetLexicon load_target_lexicon(const std::string& attribute, const std::filesystem::path& words,
                                  const std::filesystem::path& annotations);
void save_target_lexicon(const TargetLexicon& lexicon, const std::filesystem::path& words,
                         const std::filesystem::path& annotations);
SentimentLexicon load_sentiment_lexicon(const std::filesystem::path& path);
void save_sentiment_lexicon(const SentimentLexicon& lexicon, const std::filesystem::path& path);

}  // namespace steerlab::evalkit
