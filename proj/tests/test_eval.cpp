#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <fstream>
#include <random>

#include "amod/eval.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace amod;
using amod::test::error_code_of;

namespace {

const Taxonomy kTax = Taxonomy::moderation_default();
const Taxonomy kAB({"A", "B"}, "B");

std::vector<std::string> fixture_outputs(const std::string& name) {
  std::ifstream in(amod::test::fixture_path(name));
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(nlohmann::json::parse(line).at("output").get<std::string>());
  }
  return out;
}

}  // namespace

TEST_CASE("confusion examples") {
  const auto c = confusion({"A", "B", "B", "B"}, {"A", "A", "B", "B"}, kAB);
  CHECK(c.per_category[0] == CategoryCounts{"A", 1, 0, 1, 2});
  CHECK(c.per_category[1] == CategoryCounts{"B", 2, 1, 0, 1});
  CHECK(c.total == 4);

  std::vector<Category> ten;
  for (int i = 0; i < 10; ++i) ten.push_back(kTax.categories()[i % 6]);
  for (const auto& row : confusion(ten, ten, kTax).per_category) {
    CHECK(row.fp == 0);
    CHECK(row.fn == 0);
  }
  const auto empty = confusion({}, {}, kTax);
  CHECK(empty.total == 0);
  for (const auto& row : empty.per_category) CHECK(row == CategoryCounts{row.category, 0, 0, 0, 0});

  CHECK(error_code_of([] { confusion({"A"}, {"A", "B"}, kAB); }) == ErrorCode::LengthMismatch);
  CHECK(error_code_of([] { confusion({"C"}, {"A"}, kAB); }) == ErrorCode::UnknownLabel);
}

TEST_CASE("f1_report hand case") {
  const auto r = f1_report(confusion({"A", "B", "B", "B"}, {"A", "A", "B", "B"}, kAB));
  CHECK(r.per_category[0].f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(r.per_category[1].f1 == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(std::abs(r.macro_f1 - 0.7333333333333333) <= 1e-9);
  CHECK(r.weighted_f1 == doctest::Approx(0.7333333333333333).epsilon(1e-12));

  std::vector<Category> g{"Bias", "Gambling", "Bias"};
  const auto perfect = f1_report(confusion(g, g, kTax));
  CHECK(perfect.macro_f1 == 1.0);
  for (const auto& row : perfect.per_category) {
    if (row.support) CHECK(row.f1 == 1.0);
  }
  // Four categories have neither gold nor predicted items and stay out of the macro mean.
  const auto sparse = f1_report(confusion({"Bias", "Bias"}, {"Bias", "Gambling"}, kTax));
  CHECK(sparse.macro_f1 == doctest::Approx((2.0 / 3.0 + 0.0) / 2.0).epsilon(1e-12));
}

TEST_CASE("f1_report matches the oracle on random label sets") {
  std::mt19937_64 rng(17);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = rng() % 501;
    std::vector<Category> preds, golds;
    // Skewed draws so some categories go missing.
    const std::size_t span = 1 + rng() % 6;
    for (std::size_t i = 0; i < n; ++i) {
      golds.push_back(kTax.categories()[rng() % span]);
      preds.push_back(kTax.categories()[rng() % 6]);
    }
    const auto got = f1_report(confusion(preds, golds, kTax));
    const auto want = oracle::f1(preds, golds, kTax.categories());
    CHECK(std::abs(got.macro_f1 - want.macro) <= 1e-9);
    CHECK(std::abs(got.weighted_f1 - want.weighted) <= 1e-9);
    CHECK(got.n == n);
    for (const auto& row : got.per_category) {
      const auto& w = want.rows.at(row.category);
      CHECK(std::abs(row.precision - w.precision) <= 1e-9);
      CHECK(std::abs(row.recall - w.recall) <= 1e-9);
      CHECK(std::abs(row.f1 - w.f1) <= 1e-9);
      CHECK(row.support == w.support);
      CHECK(row.predicted == w.predicted);
    }
    const auto counts = confusion(preds, golds, kTax);
    for (const auto& c : counts.per_category) {
      CHECK(c.tp + c.fn == want.rows.at(c.category).support);
      CHECK(c.tp + c.fp == want.rows.at(c.category).predicted);
      CHECK(c.tp + c.fp + c.fn + c.tn == n);
    }
  }
}

TEST_CASE("relabeling permutes rows and keeps the macro score") {
  std::mt19937_64 rng(4);
  const Taxonomy renamed({"P1", "P2", "P3", "P4", "P5", "P6"}, "P6");
  std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  for (int t = 0; t < 50; ++t) {
    std::vector<Category> p, g, pp, gg;
    for (int i = 0; i < 80; ++i) {
      const auto a = rng() % 6, b = rng() % 6;
      p.push_back(kTax.categories()[a]);
      g.push_back(kTax.categories()[b]);
      pp.push_back(renamed.categories()[perm[a]]);
      gg.push_back(renamed.categories()[perm[b]]);
    }
    const auto r1 = f1_report(confusion(p, g, kTax));
    const auto r2 = f1_report(confusion(pp, gg, renamed));
    CHECK(r1.macro_f1 == doctest::Approx(r2.macro_f1).epsilon(1e-12));
    for (std::size_t c = 0; c < 6; ++c) {
      CHECK(r1.per_category[c].f1 == doctest::Approx(r2.per_category[perm[c]].f1).epsilon(1e-12));
    }
  }
}

TEST_CASE("abstentions count only as misses") {
  const std::vector<std::optional<Category>> preds{"A", std::nullopt, "B"};
  const auto c = confusion_with_abstentions(preds, {"A", "A", "B"}, kAB);
  CHECK(c.abstained == 1);
  CHECK(c.per_category[0] == CategoryCounts{"A", 1, 0, 1, 1});
  CHECK(c.per_category[1] == CategoryCounts{"B", 1, 0, 0, 2});
  CHECK(f1_report(c).abstained == 1);
}

TEST_CASE("coa_ratio") {
  const auto lex = default_coa_lexicon();
  CHECK(lex.size() == 5);
  const std::vector<std::string> three{
      "Analysis Process: Like a similar case, this is bad.\nHarmful Content: x\nClassification "
      "Result: Bias",
      "Analysis Process: plain.\nHarmful Content: a similar case\nClassification Result: Bias",
      "No sections but a Similar Case appears."};
  const auto s = coa_ratio(three, lex);
  CHECK(s.n_outputs == 3);
  CHECK(s.n_analogical == 2);
  CHECK(s.ratio == doctest::Approx(66.6667).epsilon(1e-5));

  const auto none = fixture_outputs("no_markers_outputs.jsonl");
  REQUIRE(none.size() == 5);
  CHECK(coa_ratio(none, lex).ratio == 0.0);

  std::vector<std::string> all(4, "Analysis Process: per the reference case.\nHarmful Content: "
                                  "x\nClassification Result: Bias");
  CHECK(coa_ratio(all, lex).ratio == 100.0);
  CHECK(coa_ratio({}, lex).ratio == 0.0);
  CHECK(error_code_of([&] { coa_ratio(all, {}); }) == ErrorCode::InvalidArgument);

  // Monotone in added matching outputs.
  auto grow = none;
  std::size_t last = 0;
  for (int i = 0; i < 5; ++i) {
    grow.push_back(all[0]);
    const auto st = coa_ratio(grow, lex);
    CHECK(st.n_analogical >= last);
    last = st.n_analogical;
  }
  CHECK(MarkerMatcher({"analog(y|ous)"}).matches("AN ANALOGOUS event"));
  CHECK(MarkerMatcher({"precedent"}).count("precedent, precedent") == 2);
}

TEST_CASE("token_cost") {
  const std::vector<std::uint64_t> baseline(10, 100);
  std::vector<std::uint64_t> variant(9, 433);
  variant.push_back(432);
  const auto r = token_cost(variant, baseline, 89.2, 64.3, F1Unit::Points);
  CHECK(r.mean_extra_tokens == doctest::Approx(332.9).epsilon(1e-12));
  CHECK(r.delta_f1_points == doctest::Approx(24.9).epsilon(1e-12));
  REQUIRE(r.tokens_per_f1_point);
  CHECK(std::abs(*r.tokens_per_f1_point - 13.4) <= 0.05);
  CHECK(*r.tokens_per_f1_point == doctest::Approx(332.9 / 24.9).epsilon(1e-12));

  const auto frac = token_cost(variant, baseline, 0.892, 0.643, F1Unit::Fraction);
  CHECK(frac.delta_f1_points == doctest::Approx(24.9).epsilon(1e-12));

  CHECK(token_cost(variant, variant, 0.9, 0.8, F1Unit::Fraction).mean_extra_tokens == 0.0);
  const auto flat = token_cost(variant, baseline, 0.8, 0.8, F1Unit::Fraction);
  CHECK_FALSE(flat.tokens_per_f1_point.has_value());
  CHECK(cost_to_json(flat)["tokens_per_f1_point"].is_null());
  CHECK(error_code_of([&] { token_cost({}, baseline, 1, 0, F1Unit::Points); }) ==
        ErrorCode::EmptyInput);
}

TEST_CASE("report rendering") {
  const auto r = f1_report(confusion({"Bias", "Harmless"}, {"Bias", "Bias"}, kTax));
  const auto table = render_report_table(r, CoaStats{2, 1, 50.0});
  const auto pol = table.find("Politics");
  const auto harm = table.find("Harmless");
  const auto macro = table.find("Macro");
  CHECK(pol != std::string::npos);
  CHECK(pol < harm);
  CHECK(harm < macro);
  CHECK(table.find("Weighted") != std::string::npos);
  const auto j = report_to_json(r, CoaStats{2, 1, 50.0});
  CHECK(j["macro_f1"] == r.macro_f1);
  CHECK(j.contains("coa"));
}
