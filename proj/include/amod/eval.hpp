#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "amod/coagen.hpp"
#include "amod/corpus.hpp"
#include "json.hpp"

namespace amod {

struct CategoryCounts {
  Category category;
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  bool operator==(const CategoryCounts&) const = default;
};

// One-vs-rest counts in taxonomy order.
struct ConfusionCounts {
  std::vector<CategoryCounts> per_category;
  std::uint64_t total = 0;
  std::uint64_t abstained = 0;  // items with no usable prediction

  bool operator==(const ConfusionCounts&) const = default;
};

ConfusionCounts confusion(const std::vector<Category>& preds, const std::vector<Category>& golds,
                          const Taxonomy& taxonomy);

// As confusion(), but a missing prediction counts only as a false negative
// for the gold category.
ConfusionCounts confusion_with_abstentions(const std::vector<std::optional<Category>>& preds,
                                           const std::vector<Category>& golds,
                                           const Taxonomy& taxonomy);

struct CategoryScore {
  Category category;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::uint64_t support = 0;    // gold count
  std::uint64_t predicted = 0;  // predicted count
};

struct EvalReport {
  std::vector<CategoryScore> per_category;
  // Unweighted mean over categories with at least one gold or predicted item.
  double macro_f1 = 0.0;
  // Support-weighted mean over all categories.
  double weighted_f1 = 0.0;
  std::uint64_t n = 0;
  std::uint64_t abstained = 0;
};

EvalReport f1_report(const ConfusionCounts& counts);

struct CoaStats {
  std::size_t n_outputs = 0;
  std::size_t n_analogical = 0;
  double ratio = 0.0;  // percentage
};

// "similar case", "reference case", "analogous", "precedent", "example case"
std::vector<std::string> default_coa_lexicon();

// Lexicon entries are case-insensitive ECMAScript regular expressions.
class MarkerMatcher {
 public:
  explicit MarkerMatcher(const std::vector<std::string>& lexicon);
  bool matches(std::string_view text) const;
  std::size_t count(std::string_view text) const;

 private:
  struct Impl;
  std::shared_ptr<const Impl> impl_;
};

// Text searched for markers: the Analysis Process section, or the whole
// output when it does not parse into sections.
std::string analysis_text(std::string_view output, const ChainFormat& format = {});

CoaStats coa_ratio(const std::vector<std::string>& outputs, const std::vector<std::string>& lexicon,
                   const ChainFormat& format = {});

enum class F1Unit { Fraction, Points };

struct CostReport {
  double mean_extra_tokens = 0.0;
  double delta_f1_points = 0.0;
  // Absent when delta_f1_points <= 0.
  std::optional<double> tokens_per_f1_point;
};

CostReport token_cost(std::span<const std::uint64_t> tokens_variant,
                      std::span<const std::uint64_t> tokens_baseline, double f1_variant,
                      double f1_baseline, F1Unit unit);

nlohmann::ordered_json report_to_json(const EvalReport& report,
                                      const std::optional<CoaStats>& coa = std::nullopt);
nlohmann::ordered_json cost_to_json(const CostReport& cost);

// Per-category F1 columns in taxonomy order, then Macro and Weighted, in points.
std::string render_report_table(const EvalReport& report,
                                const std::optional<CoaStats>& coa = std::nullopt);

}  // namespace amod
