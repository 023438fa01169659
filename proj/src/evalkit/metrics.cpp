#include "steerlab/evalkit/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>

#include "steerlab/error.hpp"

namespace steerlab::evalkit {

namespace {

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

const std::vector<std::string>& method_order() {
  static const std::vector<std::string> order{"unsteered", "dataset", "gradient"};
  return order;
}

}  // namespace

double MentionStats::per_1k() const {
  return generations == 0 ? 0.0 : 1000.0 * static_cast<double>(bigrams) / static_cast<double>(generations);
}

double MentionStats::fraction_with_mention() const {
  return generations == 0 ? 0.0
                          : static_cast<double>(generations_with_mention) / static_cast<double>(generations);
}

MentionStats attribute_mentions(std::span<const GenerationRecord> records, const TargetLexicon& lexicon) {
  MentionStats s;
  for (const auto& r : records) {
    const int c = count_attribute_bigrams(r.text, lexicon).count;
    ++s.generations;
    s.bigrams += c;
    if (c > 0) ++s.generations_with_mention;
  }
  return s;
}

GroupRates group_negative_rates(std::span<const GenerationRecord> records,
                                const SentimentLexicon& lexicon,
                                const std::vector<std::string>& expected_groups) {
  std::map<std::string, std::pair<long long, long long>> counts;  // negatives, total
  for (const auto& r : records) {
    auto& c = counts[r.group];
    ++c.second;
    if (classify_sentiment(compound_sentiment(r.text, lexicon)) == Sentiment::kNegative) ++c.first;
  }
  GroupRates out;
  for (const auto& [g, c] : counts) {
    out.rates[g] = 1000.0 * static_cast<double>(c.first) / static_cast<double>(c.second);
  }
  for (const auto& g : expected_groups) {
    if (!counts.contains(g)) out.warnings.push_back("group '" + g + "' has no records; omitted");
  }
  return out;
}

VarianceRange variance_range(const std::map<std::string, double>& rates) {
  if (rates.size() < 2) throw ArgumentError("variance and range need at least two groups");
  double mean = 0.0;
  double lo = rates.begin()->second;
  double hi = lo;
  for (const auto& [g, v] : rates) {
    mean += v;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  mean /= static_cast<double>(rates.size());
  double var = 0.0;
  for (const auto& [g, v] : rates) var += (v - mean) * (v - mean);
  return {var / static_cast<double>(rates.size()), hi - lo};
}

double occupation_mention_rate(std::span<const GenerationRecord> records, bool word_boundary) {
  if (records.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& r : records) {
    if (mentions_occupation(r.text, r.occupation, word_boundary)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

double relative_change(double value, double baseline) {
  if (baseline == 0.0) throw ArgumentError("relative change against a zero baseline");
  return (value - baseline) / baseline;
}

EvalReport build_report(std::span<const GenerationRecord> records,
                        std::span<const TargetLexicon> lexicons, const SentimentLexicon& sentiment,
                        const std::vector<std::string>& groups) {
  if (records.empty()) throw ArgumentError("no generation records to evaluate");
  if (lexicons.empty()) throw ArgumentError("no target lexicons given");
  std::map<std::string, std::vector<GenerationRecord>> by_method;
  for (const auto& r : records) by_method[r.method].push_back(r);

  EvalReport report;
  std::set<std::string> seen_warnings;
  for (const auto& lex : lexicons) {
    double base_occ = -1.0;
    if (by_method.contains("unsteered")) base_occ = occupation_mention_rate(by_method["unsteered"]);
    for (const auto& method : method_order()) {
      const auto it = by_method.find(method);
      if (it == by_method.end()) continue;
      const auto& recs = it->second;
      ReportRow row;
      row.attribute = lex.attribute;
      row.method = method;
      row.generations = recs.size();
      const MentionStats ms = attribute_mentions(recs, lex);
      row.mentions_per_1k = ms.per_1k();
      row.mention_fraction = ms.fraction_with_mention();
      row.occupation_rate = occupation_mention_rate(recs);
      row.occupation_change = base_occ > 0.0 ? relative_change(row.occupation_rate, base_occ) : 0.0;
      GroupRates gr = group_negative_rates(recs, sentiment, groups);
      for (auto& w : gr.warnings) {
        if (seen_warnings.insert(method + ": " + w).second) report.warnings.push_back(method + ": " + w);
      }
      row.negative_rates = gr.rates;
      if (gr.rates.size() >= 2) {
        const VarianceRange vr = variance_range(gr.rates);
        row.negative_variance = vr.variance;
        row.negative_range = vr.range;
      }
      report.rows.push_back(std::move(row));
    }
  }
  return report;
}

std::string report_csv(const EvalReport& report) {
  std::set<std::string> groups;
  for (const auto& r : report.rows) {
    for (const auto& [g, v] : r.negative_rates) groups.insert(g);
  }
  std::ostringstream out;
  out << "attribute,method,generations,mentions_per_1k,mention_fraction,occupation_rate,"
         "occupation_change,neg_variance,neg_range";
  for (const auto& g : groups) out << ",neg_per_1k:" << g;
  out << '\n';
  for (const auto& r : report.rows) {
    out << r.attribute << ',' << r.method << ',' << r.generations << ',' << fmt(r.mentions_per_1k) << ','
        << fmt(r.mention_fraction) << ',' << fmt(r.occupation_rate) << ',' << fmt(r.occupation_change)
        << ',' << fmt(r.negative_variance) << ',' << fmt(r.negative_range);
    for (const auto& g : groups) {
      const auto it = r.negative_rates.find(g);
      out << ',' << (it == r.negative_rates.end() ? std::string() : fmt(it->second));
    }
    out << '\n';
  }
  return out.str();
}

std::string report_markdown(const EvalReport& report) {
  std::ostringstream out;
  out << "### Protected attribute mentions per 1k generations\n\n"
      << "| Attribute | Method | Generations | Bigram mentions / 1k | Generations with mention |\n"
      << "|---|---|---:|---:|---:|\n";
  for (const auto& r : report.rows) {
    out << "| " << r.attribute << " | " << r.method << " | " << r.generations << " | "
        << fmt(r.mentions_per_1k, 1) << " | " << fmt(100.0 * r.mention_fraction, 1) << "% |\n";
  }
  out << "\n### Negative sentiment per 1k generations across groups\n\n"
      << "| Attribute | Method | Variance | Range |\n|---|---|---:|---:|\n";
  for (const auto& r : report.rows) {
    out << "| " << r.attribute << " | " << r.method << " | " << fmt(r.negative_variance, 1) << " | "
        << fmt(r.negative_range, 1) << " |\n";
  }
  out << "\n### Occupation mentions\n\n"
      << "| Attribute | Method | Mention rate | Change vs. unsteered |\n|---|---|---:|---:|\n";
  for (const auto& r : report.rows) {
    out << "| " << r.attribute << " | " << r.method << " | " << fmt(100.0 * r.occupation_rate, 1) << "% | "
        << (r.method == "unsteered" ? std::string("-") : fmt(100.0 * r.occupation_change, 1) + "%")
        << " |\n";
  }
  return out.str();
}

}  // namespace steerlab::evalkit
