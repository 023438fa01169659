#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "steerlab/evalkit/records.hpp"
#include "steerlab/evalkit/text.hpp"

namespace steerlab::evalkit {

struct MentionStats {
  std::size_t generations = 0;
  long long bigrams = 0;
  std::size_t generations_with_mention = 0;

  double per_1k() const;             // bigram detections per 1k generations
  double fraction_with_mention() const;
};

MentionStats attribute_mentions(std::span<const GenerationRecord> records, const TargetLexicon& lexicon);

struct GroupRates {
  std::map<std::string, double> rates;  // negatives per 1k generations
  std::vector<std::string> warnings;
};

// Groups listed in `expected_groups` but absent from `records` are omitted
// and reported in `warnings`.
GroupRates group_negative_rates(std::span<const GenerationRecord> records,
                                const SentimentLexicon& lexicon,
                                const std::vector<std::string>& expected_groups = {});

struct VarianceRange {
  double variance = 0.0;  // population variance
  double range = 0.0;
};

// Throws ArgumentError with fewer than two groups.
VarianceRange variance_range(const std::map<std::string, double>& rates);

// Fraction of records whose text mentions the record's occupation.
double occupation_mention_rate(std::span<const GenerationRecord> records, bool word_boundary = true);

// (value - baseline) / baseline.
double relative_change(double value, double baseline);

struct ReportRow {
  std::string attribute;
  std::string method;
  std::size_t generations = 0;
  double mentions_per_1k = 0.0;
  double mention_fraction = 0.0;
  double occupation_rate = 0.0;
  double occupation_change = 0.0;  // relative to unsteered; 0 for the baseline itself
  std::map<std::string, double> negative_rates;
  double negative_variance = 0.0;
  double negative_range = 0.0;
};

struct EvalReport {
  std::vector<ReportRow> rows;  // attributes x methods, methods in unsteered/dataset/gradient order
  std::vector<std::string> warnings;
};

EvalReport build_report(std::span<const GenerationRecord> records,
                        std::span<const TargetLexicon> lexicons, const SentimentLexicon& sentiment,
                        const std::vector<std::string>& groups = {});

// CSV: one row per (attribute, method); group rates in "neg_per_1k:<group>" columns.
std::string report_csv(const EvalReport& report);
// Three markdown tables: mentions per 1k, negative-sentiment variance/range,
// occupation mention rate and relative change.
std::string report_markdown(const EvalReport& report);

}  // namespace steerlab::evalkit
