#include "amod/eval.hpp"

#include <cmath>
#include <iomanip>
#include <numeric>
#include <regex>
#include <sstream>

#include "amod/error.hpp"

namespace amod {

namespace {

ConfusionCounts empty_counts(const Taxonomy& taxonomy) {
  ConfusionCounts c;
  for (const auto& cat : taxonomy.categories()) c.per_category.push_back({cat});
  return c;
}

std::size_t label_index(const Taxonomy& taxonomy, const Category& label, std::size_t item) {
  const auto idx = taxonomy.index_of(label);
  if (!idx) {
    throw Error(ErrorCode::UnknownLabel,
                "item " + std::to_string(item) + " has label '" + label + "'");
  }
  return *idx;
}

void finish_tn(ConfusionCounts& c) {
  for (auto& row : c.per_category) row.tn = c.total - row.tp - row.fp - row.fn;
}

}  // namespace

ConfusionCounts confusion(const std::vector<Category>& preds, const std::vector<Category>& golds,
                          const Taxonomy& taxonomy) {
  std::vector<std::optional<Category>> wrapped(preds.begin(), preds.end());
  return confusion_with_abstentions(wrapped, golds, taxonomy);
}

ConfusionCounts confusion_with_abstentions(const std::vector<std::optional<Category>>& preds,
                                           const std::vector<Category>& golds,
                                           const Taxonomy& taxonomy) {
  if (preds.size() != golds.size()) {
    throw Error(ErrorCode::LengthMismatch, std::to_string(preds.size()) + " predictions vs " +
                                               std::to_string(golds.size()) + " gold labels");
  }
  auto c = empty_counts(taxonomy);
  c.total = golds.size();
  for (std::size_t i = 0; i < golds.size(); ++i) {
    const auto g = label_index(taxonomy, golds[i], i);
    if (!preds[i]) {
      ++c.per_category[g].fn;
      ++c.abstained;
      continue;
    }
    const auto p = label_index(taxonomy, *preds[i], i);
    if (p == g) {
      ++c.per_category[g].tp;
    } else {
      ++c.per_category[p].fp;
      ++c.per_category[g].fn;
    }
  }
  finish_tn(c);
  return c;
}

EvalReport f1_report(const ConfusionCounts& counts) {
  EvalReport r;
  r.n = counts.total;
  r.abstained = counts.abstained;
  double macro_sum = 0.0;
  std::size_t macro_n = 0;
  double weighted_sum = 0.0;
  std::uint64_t support_sum = 0;
  for (const auto& row : counts.per_category) {
    CategoryScore s;
    s.category = row.category;
    s.support = row.tp + row.fn;
    s.predicted = row.tp + row.fp;
    s.precision = s.predicted ? static_cast<double>(row.tp) / static_cast<double>(s.predicted) : 0.0;
    s.recall = s.support ? static_cast<double>(row.tp) / static_cast<double>(s.support) : 0.0;
    s.f1 = (s.precision + s.recall) > 0.0
               ? 2.0 * s.precision * s.recall / (s.precision + s.recall)
               : 0.0;
    if (s.support + s.predicted > 0) {
      macro_sum += s.f1;
      ++macro_n;
    }
    weighted_sum += s.f1 * static_cast<double>(s.support);
    support_sum += s.support;
    r.per_category.push_back(std::move(s));
  }
  r.macro_f1 = macro_n ? macro_sum / static_cast<double>(macro_n) : 0.0;
  r.weighted_f1 = support_sum ? weighted_sum / static_cast<double>(support_sum) : 0.0;
  return r;
}

std::vector<std::string> default_coa_lexicon() {
  return {"similar case", "reference case", "analogous", "precedent", "example case"};
}

struct MarkerMatcher::Impl {
  std::vector<std::regex> patterns;
};

MarkerMatcher::MarkerMatcher(const std::vector<std::string>& lexicon) {
  if (lexicon.empty()) throw Error(ErrorCode::InvalidArgument, "marker lexicon is empty");
  auto impl = std::make_shared<Impl>();
  for (const auto& p : lexicon) {
    try {
      impl->patterns.emplace_back(p, std::regex::ECMAScript | std::regex::icase);
    } catch (const std::regex_error& e) {
      throw Error(ErrorCode::ConfigInvalid, "bad marker pattern '" + p + "': " + e.what());
    }
  }
  impl_ = std::move(impl);
}

bool MarkerMatcher::matches(std::string_view text) const {
  for (const auto& re : impl_->patterns) {
    if (std::regex_search(text.begin(), text.end(), re)) return true;
  }
  return false;
}

std::size_t MarkerMatcher::count(std::string_view text) const {
  std::size_t n = 0;
  for (const auto& re : impl_->patterns) {
    using It = std::regex_iterator<std::string_view::const_iterator>;
    n += static_cast<std::size_t>(std::distance(It(text.begin(), text.end(), re), It()));
  }
  return n;
}

std::string analysis_text(std::string_view output, const ChainFormat& format) {
  try {
    return split_sections(output, format).analysis_process;
  } catch (const Error& e) {
    if (e.code() != ErrorCode::MalformedChain) throw;
    return std::string(output);
  }
}

CoaStats coa_ratio(const std::vector<std::string>& outputs, const std::vector<std::string>& lexicon,
                   const ChainFormat& format) {
  const MarkerMatcher matcher(lexicon);
  CoaStats s;
  s.n_outputs = outputs.size();
  for (const auto& o : outputs) {
    if (matcher.matches(analysis_text(o, format))) ++s.n_analogical;
  }
  s.ratio = s.n_outputs ? 100.0 * static_cast<double>(s.n_analogical) /
                              static_cast<double>(s.n_outputs)
                        : 0.0;
  return s;
}

CostReport token_cost(std::span<const std::uint64_t> tokens_variant,
                      std::span<const std::uint64_t> tokens_baseline, double f1_variant,
                      double f1_baseline, F1Unit unit) {
  if (tokens_variant.empty() || tokens_baseline.empty()) {
    throw Error(ErrorCode::EmptyInput, "token_cost needs non-empty token lists");
  }
  if (!std::isfinite(f1_variant) || !std::isfinite(f1_baseline)) {
    throw Error(ErrorCode::NonFiniteInput, "F1 inputs must be finite");
  }
  const auto mean = [](std::span<const std::uint64_t> v) {
    const double sum = std::accumulate(v.begin(), v.end(), 0.0,
                                       [](double acc, std::uint64_t x) {
                                         return acc + static_cast<double>(x);
                                       });
    return sum / static_cast<double>(v.size());
  };
  CostReport r;
  r.mean_extra_tokens = mean(tokens_variant) - mean(tokens_baseline);
  r.delta_f1_points =
      unit == F1Unit::Fraction ? 100.0 * (f1_variant - f1_baseline) : f1_variant - f1_baseline;
  if (r.delta_f1_points > 0.0) r.tokens_per_f1_point = r.mean_extra_tokens / r.delta_f1_points;
  return r;
}

nlohmann::ordered_json report_to_json(const EvalReport& report, const std::optional<CoaStats>& coa) {
  nlohmann::ordered_json j;
  j["n"] = report.n;
  j["abstained"] = report.abstained;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& s : report.per_category) {
    nlohmann::ordered_json row;
    row["category"] = s.category;
    row["precision"] = s.precision;
    row["recall"] = s.recall;
    row["f1"] = s.f1;
    row["support"] = s.support;
    row["predicted"] = s.predicted;
    rows.push_back(std::move(row));
  }
  j["per_category"] = std::move(rows);
  j["macro_f1"] = report.macro_f1;
  j["weighted_f1"] = report.weighted_f1;
  if (coa) {
    j["coa"] = {{"n_outputs", coa->n_outputs},
                {"n_analogical", coa->n_analogical},
                {"ratio", coa->ratio}};
  }
  return j;
}

nlohmann::ordered_json cost_to_json(const CostReport& cost) {
  nlohmann::ordered_json j;
  j["mean_extra_tokens"] = cost.mean_extra_tokens;
  j["delta_f1_points"] = cost.delta_f1_points;
  if (cost.tokens_per_f1_point) {
    j["tokens_per_f1_point"] = *cost.tokens_per_f1_point;
  } else {
    j["tokens_per_f1_point"] = nullptr;
    j["tokens_per_f1_point_undefined"] = true;
  }
  return j;
}

std::string render_report_table(const EvalReport& report, const std::optional<CoaStats>& coa) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(1);
  std::size_t width = 8;
  for (const auto& s : report.per_category) width = std::max(width, s.category.size());
  width += 2;
  out << std::left << std::setw(10) << "Metric";
  for (const auto& s : report.per_category) out << std::right << std::setw(static_cast<int>(width)) << s.category;
  out << std::setw(static_cast<int>(width)) << "Macro" << std::setw(static_cast<int>(width)) << "Weighted"
      << '\n';
  const auto row = [&](const char* name, auto value) {
    out << std::left << std::setw(10) << name;
    for (const auto& s : report.per_category) {
      out << std::right << std::setw(static_cast<int>(width)) << 100.0 * value(s);
    }
  };
  row("F1", [](const CategoryScore& s) { return s.f1; });
  out << std::setw(static_cast<int>(width)) << 100.0 * report.macro_f1
      << std::setw(static_cast<int>(width)) << 100.0 * report.weighted_f1 << '\n';
  row("Precision", [](const CategoryScore& s) { return s.precision; });
  out << '\n';
  row("Recall", [](const CategoryScore& s) { return s.recall; });
  out << '\n';
  out << "n=" << report.n;
  if (report.abstained) out << " abstained=" << report.abstained;
  if (coa) out << " coa_ratio=" << coa->ratio << "% (" << coa->n_analogical << "/" << coa->n_outputs << ")";
  out << '\n';
  return out.str();
}

}  // namespace amod
