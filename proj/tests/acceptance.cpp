// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero when any of them fails.

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include "amod/cli.hpp"
#include "amod/coagen.hpp"
#include "amod/dpo_kernel.hpp"
#include "amod/eval.hpp"
#include "amod/exporter.hpp"
#include "amod/retrieval.hpp"
#include "amod/util.hpp"
#include "demo_fixture.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace amod;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool ok = true;
  std::string detail;

  void require(bool cond, const std::string& what) {
    if (!cond && ok) {
      ok = false;
      detail = what;
    }
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string fmt(double x, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << x;
  return os.str();
}

std::vector<TokenId> random_tokens(std::mt19937_64& rng, std::size_t vocab, std::size_t max_len) {
  std::vector<TokenId> t(1 + rng() % max_len);
  for (auto& x : t) x = static_cast<TokenId>(rng() % vocab);
  return t;
}

Outcome dpo_identity() {
  Outcome o;
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> lp(-200.0, 0.0);
  std::uniform_real_distribution<double> beta(0.01, 5.0);
  const double ln2 = std::log(2.0);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const double pos = lp(rng), neg = lp(rng), b = beta(rng);
    worst = std::max(worst, std::abs(dpo_loss(b, pos, pos, neg, neg).loss - ln2));
    const double other = std::abs(dpo_loss(0.0, pos, lp(rng), neg, lp(rng)).loss - ln2);
    o.require(other <= 1e-12, "beta = 0 gave loss off ln 2 by " + fmt(other));
  }
  o.require(worst <= 1e-12, "policy = reference off ln 2 by " + fmt(worst));
  if (o.ok) o.detail = "max |loss - ln 2| " + fmt(worst, 3);
  return o;
}

Outcome gradient_fidelity() {
  Outcome o;
  std::mt19937_64 rng(202);
  std::normal_distribution<double> nudge(0.0, 0.5);
  double worst = 0.0, worst_sft = 0.0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t V = 2 + rng() % 7;
    const auto base = ToyPolicy::random(V, rng(), 1.0);
    LogitTable pol = base.reference();
    for (auto& x : pol.values()) x += nudge(rng);
    const ToyPolicy policy(pol, base.reference());
    const PreferenceExample pair{static_cast<TokenId>(rng() % V), random_tokens(rng, V, 12),
                                 random_tokens(rng, V, 12)};
    worst = std::max(worst, gradcheck(policy, pair, 0.1 + 0.1 * double(t % 10), 1e-5).max_rel_error);
    std::vector<SequenceExample> batch;
    const std::size_t rows = 1 + rng() % 4;
    for (std::size_t k = 0; k < rows; ++k) {
      batch.push_back({static_cast<TokenId>(rng() % V), random_tokens(rng, V, 12)});
    }
    worst_sft = std::max(worst_sft, gradcheck_sft(policy, batch, 1e-5).max_rel_error);
  }
  o.require(worst <= 1e-4, "dpo max relative error " + fmt(worst));
  o.require(worst_sft <= 1e-4, "sft max relative error " + fmt(worst_sft));
  if (o.ok) o.detail = "max rel err dpo " + fmt(worst, 3) + ", sft " + fmt(worst_sft, 3);
  return o;
}

Outcome preference_learning() {
  Outcome o;
  const auto pairs = synthetic_pairs(500, 8, 12, 7);
  DpoConfig cfg;
  cfg.beta = 0.1;
  cfg.learning_rate = 0.1;
  cfg.epochs = 200;
  const auto [policy, trace] = train_toy_dpo(pairs, cfg, ToyPolicy::uniform(8));
  const auto final_state = dpo_objective(policy, pairs, cfg.beta);
  o.require(!trace.mean_loss.empty() && trace.mean_loss.front() == std::log(2.0),
            "epoch-1 loss is not exactly ln 2");
  o.require(final_state.preference_accuracy >= 0.95,
            "accuracy " + fmt(final_state.preference_accuracy));
  o.require(final_state.mean_margin > 0.0, "final margin " + fmt(final_state.mean_margin));
  if (o.ok) {
    o.detail = "accuracy " + fmt(final_state.preference_accuracy) + ", margin " +
               fmt(final_state.mean_margin) + ", loss " + fmt(final_state.mean_loss);
  }
  return o;
}

Outcome retrieval_exactness() {
  Outcome o;
  std::mt19937_64 rng(303);
  std::normal_distribution<double> normal;
  const Taxonomy tax({"A", "B"}, "B");
  const std::size_t n = 1000, dim = 32;
  SampleSet set(tax);
  EmbeddingMap emb;
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) {
    ids.push_back("v" + std::to_string((i * 7919) % 100003));
    std::vector<double> v(dim);
    for (auto& x : v) x = normal(rng);
    emb[ids.back()] = normalize(v).values;
    set.add({ids.back(), "text " + ids.back(), i % 2 ? "B" : "A", Split::Train, "", {}});
  }
  // Exact duplicates exercise the ascending-id tie rule.
  for (std::size_t i = 0; i + 1 < 40; i += 2) emb[ids[i + 1]] = emb[ids[i]];
  const auto index = build_index(set, emb);
  std::vector<oracle::Vec> stored;
  for (const auto& e : index.entries()) stored.push_back({e.id, e.vector});

  std::size_t compared = 0;
  for (int t = 0; t < 100; ++t) {
    std::vector<double> qv(dim);
    for (auto& x : qv) x = normal(rng);
    if (t % 4 == 0) qv = emb.at(ids[2 * (rng() % 20)]);
    const auto q = normalize(qv);
    for (std::size_t k : {1u, 4u, 16u, 32u}) {
      const auto got = query_topk(index, q, k);
      const auto want = oracle::topk(stored, q.values, k);
      o.require(got.size() == want.size(), "size mismatch at k=" + std::to_string(k));
      for (std::size_t i = 0; i < std::min(got.size(), want.size()); ++i) {
        o.require(got[i].sample_id == want[i].id && got[i].score == want[i].score,
                  "rank " + std::to_string(i) + " differs at k=" + std::to_string(k));
        ++compared;
      }
    }
  }
  if (o.ok) o.detail = std::to_string(compared) + " ranked hits identical";
  return o;
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), root).generic_string()] = slurp(e.path());
  }
  return files;
}

struct PipelineRun {
  fs::path out;
  demo::FixtureManifest fixture;
};

Outcome pipeline_determinism(const fs::path& dir, PipelineRun& keep) {
  Outcome o;
  keep.fixture = demo::write_demo_fixture(dir);
  keep.out = dir / "out";
  const auto config = (dir / "config.toml").string();
  std::map<std::string, std::string> first;
  for (int round = 0; round < 2; ++round) {
    fs::remove_all(keep.out);
    for (const std::string stage :
         {"ingest", "index", "generate", "refine", "export-sft", "pairs", "export-dpo"}) {
      std::ostringstream out, err;
      const int code = cli::run({"amod", "--config", config, stage}, out, err);
      o.require(code == 0, stage + " exited " + std::to_string(code) + ": " + err.str());
      if (!o.ok) return o;
    }
    if (round == 0) {
      first = snapshot(keep.out);
    } else {
      const auto second = snapshot(keep.out);
      o.require(first.size() == second.size(), "artifact sets differ");
      for (const auto& [name, bytes] : first) {
        const auto it = second.find(name);
        o.require(it != second.end() && it->second == bytes, name + " differs between runs");
      }
    }
  }

  std::map<std::string, AugmentStatus> status;
  std::ifstream in(keep.out / "augment" / "augmented.jsonl");
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto aug = augmented_from_json(nlohmann::json::parse(line));
    status[aug.sample.id] = aug.status;
  }
  std::size_t dropped = 0;
  for (const auto& id : keep.fixture.stubborn) {
    const auto it = status.find(id);
    dropped += it != status.end() && it->second == AugmentStatus::Dropped;
  }
  o.require(!keep.fixture.stubborn.empty(), "fixture scripts no stubborn samples");
  o.require(dropped == keep.fixture.stubborn.size(),
            std::to_string(dropped) + " of " + std::to_string(keep.fixture.stubborn.size()) +
                " stubborn samples dropped");
  if (o.ok) {
    o.detail = std::to_string(first.size()) + " artifacts identical, " + std::to_string(dropped) +
               "/" + std::to_string(dropped) + " stubborn dropped";
  }
  return o;
}

Outcome metric_oracle() {
  Outcome o;
  const Taxonomy tax = Taxonomy::moderation_default();
  std::mt19937_64 rng(404);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = rng() % 501;
    const std::size_t span = 1 + rng() % 6;
    std::vector<Category> preds, golds;
    for (std::size_t i = 0; i < n; ++i) {
      golds.push_back(tax.categories()[rng() % span]);
      preds.push_back(tax.categories()[rng() % 6]);
    }
    const auto got = f1_report(confusion(preds, golds, tax));
    const auto want = oracle::f1(preds, golds, tax.categories());
    worst = std::max({worst, std::abs(got.macro_f1 - want.macro),
                      std::abs(got.weighted_f1 - want.weighted)});
    for (const auto& row : got.per_category) {
      const auto& w = want.rows.at(row.category);
      worst = std::max({worst, std::abs(row.precision - w.precision),
                        std::abs(row.recall - w.recall), std::abs(row.f1 - w.f1)});
    }
  }
  o.require(worst <= 1e-9, "max deviation from recomputation " + fmt(worst));
  const Taxonomy ab({"A", "B"}, "B");
  const double hand = f1_report(confusion({"A", "B", "B", "B"}, {"A", "A", "B", "B"}, ab)).macro_f1;
  o.require(std::abs(hand - 0.7333333333333333) <= 1e-9, "hand case macro F1 " + fmt(hand, 12));
  if (o.ok) o.detail = "max deviation " + fmt(worst, 3) + ", hand case " + fmt(hand, 10);
  return o;
}

Outcome token_cost_arithmetic() {
  Outcome o;
  const std::vector<std::uint64_t> baseline(10, 100);
  std::vector<std::uint64_t> variant(9, 433);
  variant.push_back(432);
  const auto cost = token_cost(variant, baseline, 89.2, 64.3, F1Unit::Points);
  o.require(std::abs(cost.mean_extra_tokens - 332.9) <= 1e-9,
            "mean extra tokens " + fmt(cost.mean_extra_tokens));
  o.require(std::abs(cost.delta_f1_points - 24.9) <= 1e-9, "delta F1 " + fmt(cost.delta_f1_points));
  o.require(cost.tokens_per_f1_point && std::abs(*cost.tokens_per_f1_point - 13.4) <= 0.05,
            "tokens per F1 point outside 13.4 +/- 0.05");

  std::vector<std::string> outputs;
  std::ifstream in(amod::test::fixture_path("no_markers_outputs.jsonl"));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) outputs.push_back(nlohmann::json::parse(line).at("output").get<std::string>());
  }
  o.require(!outputs.empty(), "no-marker fixture is empty");
  const auto coa = coa_ratio(outputs, default_coa_lexicon());
  o.require(coa.ratio == 0.0, "CoA ratio on the no-marker fixture " + fmt(coa.ratio));
  if (o.ok) {
    o.detail = "tokens per F1 point " + fmt(*cost.tokens_per_f1_point, 4) + ", CoA ratio " +
               fmt(coa.ratio);
  }
  return o;
}

std::string golden(const std::string& name) {
  auto s = slurp(amod::test::fixture_path(name));
  if (!s.empty() && s.back() == '\n') s.pop_back();
  return s;
}

std::string fill(std::string tpl, const std::string& slot, const std::string& value) {
  const auto pos = tpl.find(slot);
  if (pos != std::string::npos) tpl.replace(pos, slot.size(), value);
  return tpl;
}

Outcome prompt_fidelity() {
  Outcome o;
  const Taxonomy tax({"Political Harmful", "Pornography", "Violence", "Bias", "Gambling",
                      "Harmless"},
                     "Harmless");
  const ModerationSample x{"t", "Some text to check.", "Bias", Split::Train, "", {}};
  const std::vector<RetrievedCase> refs{{"r1", "Casino bonus, deposit now", "Gambling", 0.9},
                                        {"r2", "Nice weather today", "Harmless", 0.5}};
  const auto gen = golden("generation_prompt.golden.txt");
  const auto block = render_reference_block(refs);
  o.require(build_generation_prompt(x, refs, tax).text() ==
                fill(fill(gen, "{{EXAMPLE_CASES}}", block + "\n\n"), "{{CONTENT}}", x.text),
            "generation prompt with references differs from golden");
  o.require(build_generation_prompt(x, {}, tax).text() ==
                fill(fill(gen, "{{EXAMPLE_CASES}}", ""), "{{CONTENT}}", x.text),
            "plain generation prompt differs from golden");

  const auto prior = parse_chain(
      "Analysis Process: reasoning\nHarmful Content: bits\nClassification Result: Harmless", tax);
  o.require(build_reflection_prompt(x, refs, prior, tax).text() ==
                fill(fill(fill(golden("reflection_prompt.golden.txt"), "{{ORIGINAL_RESPONSE}}",
                               prior.raw_text),
                          "{{EXAMPLE_CASES}}", block + "\n\n"),
                     "{{CONTENT}}", x.text),
            "reflection prompt differs from golden");

  const Taxonomy six = Taxonomy::moderation_default();
  std::size_t scanned = 0;
  for (const auto& gold : six.categories()) {
    const ModerationSample s{"t", "An input sentence.", gold, Split::Train, "", {}};
    std::vector<RetrievedCase> others;
    for (const auto& c : six.categories()) {
      if (c != gold) others.push_back({"r-" + c, "reference text", c, 0.5});
    }
    for (const auto& wrong : six.categories()) {
      if (wrong == gold) continue;
      const auto chain = parse_chain(
          "Analysis Process: reasoning\nHarmful Content: bits\nClassification Result: " + wrong, six);
      auto text = to_lower_ascii(build_reflection_prompt(s, others, chain, six).text());
      const auto list = to_lower_ascii(render_category_list(six));
      const auto at = text.find(list);
      o.require(at != std::string::npos, "category enumeration missing");
      if (at != std::string::npos) text.erase(at, list.size());
      o.require(text.find(to_lower_ascii(gold)) == std::string::npos,
                "gold label '" + gold + "' leaks into a reflection prompt");
      ++scanned;
    }
  }
  if (o.ok) o.detail = "3 golden renders match, " + std::to_string(scanned) + " reflections leak-free";
  return o;
}

Outcome export_contract(const PipelineRun& run, const fs::path& scratch) {
  Outcome o;
  if (run.out.empty() || !fs::exists(run.out / "export" / "dpo.jsonl")) {
    o.require(false, "pipeline artifacts unavailable");
    return o;
  }
  const Taxonomy tax = Taxonomy::moderation_default();
  const auto train = load_dataset(run.out / "corpus" / "train.jsonl", tax);

  std::vector<AugmentedSample> accepted;
  std::ifstream in(run.out / "augment" / "augmented.jsonl");
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto aug = augmented_from_json(nlohmann::json::parse(line));
    if (aug.status != AugmentStatus::Dropped) accepted.push_back(std::move(aug));
  }
  const auto sft = load_sft(run.out / "export" / "sft.jsonl");
  o.require(sft.size() == accepted.size(), "SFT export size differs from accepted samples");
  for (std::size_t i = 0; i < std::min(sft.size(), accepted.size()); ++i) {
    const auto* gold = train.find(sft[i].sample_id);
    o.require(gold != nullptr, "SFT record for unknown sample " + sft[i].sample_id);
    if (!gold) continue;
    o.require(parse_chain(sft[i].completion, tax).parsed_label == gold->label,
              "SFT record " + sft[i].sample_id + " does not parse back to its gold label");
    o.require(sft[i] == make_sft_record(accepted[i], tax),
              "SFT record " + sft[i].sample_id + " differs from the in-memory record");
  }

  const auto dpo = load_dpo(run.out / "export" / "dpo.jsonl");
  o.require(!dpo.empty(), "DPO export is empty");
  for (const auto& p : dpo) {
    const auto* s = train.find(p.sample_id);
    o.require(s != nullptr && p.prompt == build_generation_prompt(*s, {}, tax).text(),
              "DPO prompt for " + p.sample_id + " is not the plain prompt");
  }

  export_sft(accepted, scratch / "sft.jsonl", tax);
  export_dpo(dpo, scratch / "dpo.jsonl");
  o.require(load_sft(scratch / "sft.jsonl") == sft, "SFT reload differs");
  o.require(load_dpo(scratch / "dpo.jsonl") == dpo, "DPO reload differs");
  o.require(slurp(scratch / "dpo.jsonl") == slurp(run.out / "export" / "dpo.jsonl"),
            "DPO re-export is not byte-identical");
  o.require(slurp(scratch / "sft.jsonl") == slurp(run.out / "export" / "sft.jsonl"),
            "SFT re-export is not byte-identical");
  if (o.ok) {
    o.detail = std::to_string(sft.size()) + " SFT and " + std::to_string(dpo.size()) +
               " DPO records round-trip";
  }
  return o;
}

}  // namespace

int main() {
  amod::test::TempDir work("amod-acceptance");
  PipelineRun pipeline;

  struct Criterion {
    std::string name;
    double limit_seconds;  // 0: no runtime bound
    std::function<Outcome()> check;
  };
  const std::vector<Criterion> criteria{
      {"1 dpo identity", 1.0, dpo_identity},
      {"2 gradient fidelity", 30.0, gradient_fidelity},
      {"3 preference learning", 60.0, preference_learning},
      {"4 retrieval exactness", 10.0, retrieval_exactness},
      {"5 pipeline determinism", 30.0, [&] { return pipeline_determinism(work / "pipeline", pipeline); }},
      {"6 metric oracle", 0.0, metric_oracle},
      {"7 cost arithmetic", 0.0, token_cost_arithmetic},
      {"8 prompt fidelity", 0.0, prompt_fidelity},
      {"9 export contract", 0.0,
       [&] {
         fs::create_directories(work / "reexport");
         return export_contract(pipeline, work / "reexport");
       }},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o.ok = false;
      o.detail = std::string("threw: ") + e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (o.ok && c.limit_seconds > 0 && secs >= c.limit_seconds) {
      o.ok = false;
      o.detail = "took " + fmt(secs, 3) + " s, limit " + fmt(c.limit_seconds) + " s";
    }
    failed += !o.ok;
    std::cout << (o.ok ? "PASS" : "FAIL") << "  " << std::left << std::setw(24) << c.name
              << std::right << std::fixed << std::setprecision(3) << std::setw(8) << secs
              << " s  " << o.detail << std::defaultfloat << "\n";
  }
  return failed ? 1 : 0;
}
