#include "amod/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "amod/coagen.hpp"
#include "amod/config.hpp"
#include "amod/corpus.hpp"
#include "amod/dpo_kernel.hpp"
#include "amod/error.hpp"
#include "amod/eval.hpp"
#include "amod/exporter.hpp"
#include "amod/gateway.hpp"
#include "amod/parallel.hpp"
#include "amod/retrieval.hpp"
#include "amod/util.hpp"
#include "json.hpp"

namespace amod::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool resume = false;
  bool fail_fast = false;
  std::vector<std::string> backend_overrides;

  // evaluate
  std::string predictions;
  std::string gold;
  std::string name = "report";
  bool with_references = false;
  // report
  std::string variant;
  std::string baseline;
  // train-toy
  std::string pairs;
  // gradcheck
  std::size_t trials = 100;
  double epsilon = 1e-5;
  double tolerance = 1e-4;
};

class Stage {
 public:
  Stage(const PipelineConfig& cfg, const Flags& flags, std::ostream& out)
      : cfg(cfg), flags(flags), out(out) {}

  const PipelineConfig& cfg;
  const Flags& flags;
  std::ostream& out;

  fs::path dir(std::string_view name) const {
    const auto d = cfg.output_dir / name;
    fs::create_directories(d);
    write_file_atomic(d / "config.echo.toml", cfg.echo_toml);
    return d;
  }

  std::string rel(const fs::path& p) const {
    const auto r = p.lexically_relative(cfg.output_dir);
    return r.empty() ? p.generic_string() : r.generic_string();
  }

  ojson file_ref(const fs::path& p) const {
    ojson j;
    j["path"] = rel(p);
    j["sha256"] = sha256_hex(read_file(p));
    return j;
  }

  Gateway make_gateway() const {
    GatewayOptions opts;
    opts.max_in_flight = cfg.max_in_flight;
    opts.retry = cfg.retry;
    opts.jitter_seed = cfg.seed;
    return Gateway(std::move(opts));
  }

  GenerationContext context(Gateway& gw, std::string_view role) const {
    return GenerationContext{gw, cfg.backend(role, true), cfg.sampling, cfg.taxonomy, cfg.format,
                             cfg.prompt};
  }

  fs::path corpus(std::string_view file) const { return cfg.output_dir / "corpus" / file; }

  SampleSet load_samples(const fs::path& p) const {
    require(p);
    return load_dataset(p, cfg.taxonomy);
  }

  static void require(const fs::path& p) {
    if (!fs::is_regular_file(p)) {
      throw Error(ErrorCode::IoError,
                  "missing input " + p.string() + " (run the stage that produces it first)");
    }
  }
};

void write_json(const fs::path& path, const ojson& j) { write_file_atomic(path, j.dump(2) + "\n"); }

ojson usage_to_json(const UsageTotals& u) {
  ojson j;
  j["chat_calls"] = u.chat_calls;
  j["embed_calls"] = u.embed_calls;
  j["attempts"] = u.attempts;
  j["prompt_tokens"] = u.prompt_tokens;
  j["completion_tokens"] = u.completion_tokens;
  j["estimated_calls"] = u.estimated_calls;
  return j;
}

template <typename Parse>
auto read_jsonl(const fs::path& path, Parse parse) {
  Stage::require(path);
  std::ifstream in(path, std::ios::binary);
  std::vector<decltype(parse(nlohmann::json{}))> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      out.push_back(parse(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::MalformedRecord,
                  path.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

template <typename T, typename Fn>
std::string to_jsonl(const std::vector<T>& items, Fn to_json) {
  std::string s;
  for (const auto& item : items) {
    s += to_json(item).dump();
    s += '\n';
  }
  return s;
}

EmbeddingMap embed_samples(Gateway& gw, const BackendSpec& embedder, const SampleSet& set) {
  std::vector<std::string> texts;
  texts.reserve(set.size());
  for (const auto& s : set) texts.push_back(s.text);
  const auto vecs = texts.empty() ? std::vector<Embedding>{} : gw.embed(embedder, texts);
  EmbeddingMap out;
  for (std::size_t i = 0; i < set.size(); ++i) {
    out.emplace(set.samples()[i].id, vecs[i].values);
  }
  return out;
}

ojson category_counts(const SampleSet& set) {
  ojson j;
  for (const auto& c : set.taxonomy().categories()) {
    j[c] = std::count_if(set.begin(), set.end(), [&](const auto& s) { return s.label == c; });
  }
  return j;
}

std::pair<SampleSet, SampleSet> make_split(const SampleSet& all, const PipelineConfig& cfg,
                                           std::size_t& unassigned) {
  unassigned = 0;
  if (cfg.split.mode == SplitMode::Balanced) {
    return split_balanced(all, cfg.split.train_per_category, cfg.split.test_per_category,
                          cfg.seed);
  }
  SampleSet train(all.taxonomy());
  SampleSet test(all.taxonomy());
  for (const auto& s : all) {
    if (s.split == Split::Train) {
      train.add(s);
    } else if (s.split == Split::Test) {
      test.add(s);
    } else {
      ++unassigned;
    }
  }
  return {std::move(train), std::move(test)};
}

// Writes samples/train/test and the corpus manifest; shared by ingest and dedup.
ojson write_corpus(const Stage& st, const SampleSet& all, const fs::path& dir) {
  std::size_t unassigned = 0;
  const auto [train, test] = make_split(all, st.cfg, unassigned);
  write_dataset(dir / "samples.jsonl", all);
  write_dataset(dir / "train.jsonl", train);
  write_dataset(dir / "test.jsonl", test);
  ojson counts;
  counts["samples"] = all.size();
  counts["train"] = train.size();
  counts["test"] = test.size();
  counts["unassigned"] = unassigned;
  counts["per_category"] = category_counts(all);
  ojson outputs;
  outputs["samples"] = st.file_ref(dir / "samples.jsonl");
  outputs["train"] = st.file_ref(dir / "train.jsonl");
  outputs["test"] = st.file_ref(dir / "test.jsonl");
  ojson m;
  m["counters"] = counts;
  m["outputs"] = outputs;
  m["split"] = {{"mode", st.cfg.split.mode == SplitMode::Balanced ? "balanced" : "preassigned"},
                {"train_per_category", st.cfg.split.train_per_category},
                {"test_per_category", st.cfg.split.test_per_category},
                {"seed", st.cfg.seed}};
  return m;
}

// ---------------------------------------------------------------------------

int cmd_ingest(const Stage& st) {
  if (!st.cfg.dataset) throw Error(ErrorCode::ConfigInvalid, "dataset: required for ingest");
  const auto all = load_dataset(*st.cfg.dataset, st.cfg.taxonomy);
  const auto dir = st.dir("corpus");
  ojson m;
  m["stage"] = "ingest";
  m["inputs"] = {{"dataset", st.file_ref(*st.cfg.dataset)}};
  m.update(write_corpus(st, all, dir));
  write_json(dir / "manifest.json", m);
  st.out << "ingest: " << all.size() << " samples (train " << m["counters"]["train"] << ", test "
         << m["counters"]["test"] << ") -> " << st.rel(dir) << "\n";
  return kExitOk;
}

int cmd_dedup(const Stage& st) {
  const auto input = st.corpus("samples.jsonl");
  const auto all = st.load_samples(input);
  const auto input_ref = st.file_ref(input);
  auto gw = st.make_gateway();
  const auto& embedder = st.cfg.backend("embedder", false);
  const auto embeddings = embed_samples(gw, embedder, all);
  const auto kept = dedup(all, embeddings, st.cfg.dedup_threshold);

  std::set<std::string_view> survivors;
  for (const auto& s : kept) survivors.insert(s.id);
  std::vector<std::string> removed;
  for (const auto& s : all) {
    if (!survivors.contains(s.id)) removed.push_back(s.id);
  }

  const auto dir = st.dir("corpus");
  ojson m;
  m["stage"] = "dedup";
  m["inputs"] = {{"samples", input_ref}};
  m.update(write_corpus(st, kept, dir));
  m["dedup"] = {{"threshold", st.cfg.dedup_threshold},
                {"before", all.size()},
                {"after", kept.size()},
                {"removed", removed},
                {"embedder", embedder.id}};
  m["usage"] = usage_to_json(gw.usage());
  write_json(dir / "dedup_manifest.json", m);
  st.out << "dedup: " << all.size() << " -> " << kept.size() << " samples (threshold "
         << st.cfg.dedup_threshold << ")\n";
  return kExitOk;
}

int cmd_index(const Stage& st) {
  const auto input = st.corpus("train.jsonl");
  const auto train = st.load_samples(input);
  auto gw = st.make_gateway();
  const auto& embedder = st.cfg.backend("embedder", false);
  const auto index = build_index(train, embed_samples(gw, embedder, train));
  const auto dir = st.dir("index");
  save_index(dir / "index.jsonl", index);
  ojson m;
  m["stage"] = "index";
  m["inputs"] = {{"train", st.file_ref(input)}};
  m["outputs"] = {{"index", st.file_ref(dir / "index.jsonl")}};
  m["counters"] = {{"entries", index.size()}, {"dim", index.dim()}};
  m["embedder"] = {{"id", embedder.id},
                   {"kind", to_string(embedder.kind)},
                   {"model", embedder.model},
                   {"dim", embedder.mock_dim},
                   {"seed", embedder.mock_seed}};
  m["usage"] = usage_to_json(gw.usage());
  write_json(dir / "manifest.json", m);
  st.out << "index: " << index.size() << " entries, dim " << index.dim() << " -> "
         << st.rel(dir / "index.jsonl") << "\n";
  return kExitOk;
}

RetrievalIndex load_stage_index(const Stage& st) {
  const auto p = st.cfg.output_dir / "index" / "index.jsonl";
  Stage::require(p);
  return load_index(p);
}

int cmd_generate(const Stage& st) {
  const auto train_path = st.corpus("train.jsonl");
  const auto train = st.load_samples(train_path);
  const auto index = load_stage_index(st);
  const auto embeddings = embeddings_from_index(index);
  const auto dir = st.dir("augment");
  const auto out_path = dir / "generated.jsonl";

  std::vector<GeneratedRecord> kept;
  if (st.flags.resume && fs::is_regular_file(out_path)) {
    for (auto& r : read_jsonl(out_path, generated_from_json)) {
      if (r.error.empty() && train.find(r.sample.id)) kept.push_back(std::move(r));
    }
  }
  std::vector<std::string> skip;
  for (const auto& r : kept) skip.push_back(r.sample.id);

  auto gw = st.make_gateway();
  auto ctx = st.context(gw, "generator");
  AugmentOptions opts{st.cfg.k, st.cfg.max_rounds, st.flags.fail_fast, st.cfg.concurrency};
  auto fresh = generate_stage(train, index, embeddings, ctx, opts, skip);

  std::vector<GeneratedRecord> all = std::move(kept);
  const std::size_t resumed = all.size();
  for (auto& r : fresh) all.push_back(std::move(r));
  std::sort(all.begin(), all.end(),
            [](const auto& a, const auto& b) { return a.sample.id < b.sample.id; });
  write_file_atomic(out_path, to_jsonl(all, generated_to_json));

  std::size_t accepted = 0, mislabeled = 0, unparsed = 0, errors = 0;
  ojson errs = ojson::array();
  for (const auto& r : all) {
    if (!r.error.empty()) {
      ++errors;
      errs.push_back({{"id", r.sample.id}, {"error", r.error}});
    } else if (r.accepted()) {
      ++accepted;
    } else if (r.chain.parsed()) {
      ++mislabeled;
    } else {
      ++unparsed;
    }
  }
  ojson m;
  m["stage"] = "generate";
  m["inputs"] = {{"train", st.file_ref(train_path)},
                 {"index", st.file_ref(st.cfg.output_dir / "index" / "index.jsonl")}};
  m["outputs"] = {{"generated", st.file_ref(out_path)}};
  m["counters"] = {{"samples", all.size()},   {"accepted_first_pass", accepted},
                   {"mislabeled", mislabeled}, {"unparsed", unparsed},
                   {"errors", errors},         {"resumed", resumed}};
  m["errors"] = errs;
  m["k"] = st.cfg.k;
  m["backend"] = ctx.backend.id;
  m["usage"] = usage_to_json(gw.usage());
  write_json(dir / "generate_manifest.json", m);
  st.out << "generate: " << all.size() << " samples, " << accepted << " correct, "
         << mislabeled + unparsed << " to refine, " << errors << " errors";
  if (resumed) st.out << " (" << resumed << " resumed)";
  st.out << "\n";
  return errors ? kExitRuntime : kExitOk;
}

int cmd_refine(const Stage& st) {
  const auto dir = st.dir("augment");
  const auto in_path = dir / "generated.jsonl";
  const auto records = read_jsonl(in_path, generated_from_json);
  auto gw = st.make_gateway();
  auto ctx = st.context(gw, "generator");
  AugmentOptions opts{st.cfg.k, st.cfg.max_rounds, st.flags.fail_fast, st.cfg.concurrency};
  const auto result = refine_stage(records, ctx, opts);
  const auto out_path = dir / "augmented.jsonl";
  write_file_atomic(out_path, to_jsonl(result.samples, augmented_to_json));

  ojson m;
  m["stage"] = "refine";
  m["inputs"] = {{"generated", st.file_ref(in_path)}};
  m["outputs"] = {{"augmented", st.file_ref(out_path)}};
  m["max_rounds"] = st.cfg.max_rounds;
  m.update(result.manifest.to_json());
  m["usage"] = usage_to_json(gw.usage());
  write_json(dir / "manifest.json", m);
  const auto& r = result.manifest;
  st.out << "refine: " << r.accepted_first_pass << " first pass, " << r.accepted_after_reflection
         << " after reflection, " << r.dropped << " dropped, " << r.errors << " errors\n";
  return r.errors ? kExitRuntime : kExitOk;
}

int cmd_export_sft(const Stage& st) {
  const auto in_path = st.cfg.output_dir / "augment" / "augmented.jsonl";
  const auto all = read_jsonl(in_path, augmented_from_json);
  std::vector<AugmentedSample> accepted;
  for (const auto& a : all) {
    if (a.accepted()) accepted.push_back(a);
  }
  const auto dir = st.dir("export");
  const auto manifest =
      export_sft(accepted, dir / "sft.jsonl", st.cfg.taxonomy, st.cfg.format, st.cfg.prompt);
  ojson m;
  m["stage"] = "export-sft";
  m["inputs"] = {{"augmented", st.file_ref(in_path)}};
  m["outputs"] = {{"sft", manifest.to_json()}};
  m["outputs"]["sft"]["path"] = st.rel(dir / "sft.jsonl");
  m["counters"] = {{"records", accepted.size()}, {"excluded_dropped", all.size() - accepted.size()}};
  m["trainer_hints"] = {{"learning_rate", st.cfg.sft.learning_rate},
                        {"epochs", st.cfg.sft.epochs},
                        {"effective_batch_size", st.cfg.sft.effective_batch_size}};
  write_json(dir / "sft_manifest.json", m);
  st.out << "export-sft: " << accepted.size() << " records -> " << st.rel(dir / "sft.jsonl")
         << "\n";
  return kExitOk;
}

int cmd_pairs(const Stage& st) {
  const auto train_path = st.corpus("train.jsonl");
  const auto train = st.load_samples(train_path);
  const auto index = load_stage_index(st);
  const auto embeddings = embeddings_from_index(index);
  const auto dir = st.dir("pairs");
  const auto out_path = dir / "pairs.jsonl";
  const auto manifest_path = dir / "manifest.json";

  std::vector<PreferencePair> pairs;
  std::vector<PairOutcome> outcomes;
  std::set<std::string> done;
  if (st.flags.resume && fs::is_regular_file(out_path) && fs::is_regular_file(manifest_path)) {
    pairs = load_dpo(out_path);
    const auto prev = nlohmann::json::parse(read_file(manifest_path));
    for (const auto& o : prev.at("samples")) {
      const auto id = o.at("id").get<std::string>();
      const auto status = o.at("status").get<std::string>();
      if (status == "error" || !train.find(id)) continue;
      outcomes.push_back({id, status, ""});
      done.insert(id);
    }
    std::erase_if(pairs, [&](const auto& p) { return !done.contains(p.sample_id); });
  }
  const std::size_t resumed = done.size();
  SampleSet todo(train.taxonomy());
  for (const auto& s : train) {
    if (!done.contains(s.id)) todo.add(s);
  }

  auto gw = st.make_gateway();
  auto ctx = st.context(gw, "sft_model");
  PairOptions opts;
  opts.k = st.cfg.k;
  opts.strict = st.cfg.pairs_strict;
  opts.samples_per_side = st.cfg.samples_per_side;
  opts.fail_fast = st.flags.fail_fast;
  opts.concurrency = st.cfg.concurrency;
  opts.marker_lexicon = st.cfg.marker_lexicon();
  auto result = build_preference_pairs(todo, index, embeddings, ctx, opts);

  for (auto& p : result.pairs) pairs.push_back(std::move(p));
  for (auto& o : result.manifest.outcomes) outcomes.push_back(std::move(o));
  std::sort(pairs.begin(), pairs.end(),
            [](const auto& a, const auto& b) { return a.sample_id < b.sample_id; });
  std::sort(outcomes.begin(), outcomes.end(),
            [](const auto& a, const auto& b) { return a.id < b.id; });
  PairsManifest merged;
  merged.outcomes = std::move(outcomes);
  for (const auto& o : merged.outcomes) {
    if (o.status == "kept") {
      ++merged.kept;
    } else if (o.status == "error") {
      ++merged.errors;
    } else {
      ++merged.skipped;
    }
  }
  write_file_atomic(out_path, serialize_dpo(pairs));

  ojson m;
  m["stage"] = "pairs";
  m["inputs"] = {{"train", st.file_ref(train_path)},
                 {"index", st.file_ref(st.cfg.output_dir / "index" / "index.jsonl")}};
  m["outputs"] = {{"pairs", st.file_ref(out_path)}};
  m["strict"] = st.cfg.pairs_strict;
  m["samples_per_side"] = st.cfg.samples_per_side;
  m["backend"] = ctx.backend.id;
  m["resumed"] = resumed;
  m.update(merged.to_json());
  m["usage"] = usage_to_json(gw.usage());
  write_json(manifest_path, m);
  st.out << "pairs: " << merged.kept << " kept, " << merged.skipped << " skipped, "
         << merged.errors << " errors";
  if (resumed) st.out << " (" << resumed << " resumed)";
  st.out << "\n";
  return merged.errors ? kExitRuntime : kExitOk;
}

int cmd_export_dpo(const Stage& st) {
  const auto train_path = st.corpus("train.jsonl");
  const auto train = st.load_samples(train_path);
  const auto in_path = st.cfg.output_dir / "pairs" / "pairs.jsonl";
  Stage::require(in_path);
  const auto pairs = load_dpo(in_path);
  for (const auto& p : pairs) {
    const auto* x = train.find(p.sample_id);
    if (!x) {
      throw Error(ErrorCode::InvariantViolation,
                  "pair for '" + p.sample_id + "' has no training sample");
    }
    if (p.prompt != build_generation_prompt(*x, {}, st.cfg.taxonomy, st.cfg.prompt).text()) {
      throw Error(ErrorCode::InvariantViolation,
                  "pair for '" + p.sample_id + "' does not carry the plain prompt");
    }
    const auto label = parse_chain(p.chosen, st.cfg.taxonomy, st.cfg.format).parsed_label;
    if (label != x->label) {
      throw Error(ErrorCode::InvariantViolation,
                  "chosen chain for '" + p.sample_id + "' parses to '" + label + "'");
    }
  }
  const auto dir = st.dir("export");
  const auto manifest = export_dpo(pairs, dir / "dpo.jsonl");
  ojson m;
  m["stage"] = "export-dpo";
  m["inputs"] = {{"pairs", st.file_ref(in_path)}, {"train", st.file_ref(train_path)}};
  m["outputs"] = {{"dpo", manifest.to_json()}};
  m["outputs"]["dpo"]["path"] = st.rel(dir / "dpo.jsonl");
  m["counters"] = {{"records", pairs.size()}};
  m["trainer_hints"] = {{"beta", st.cfg.dpo.beta},
                        {"learning_rate", st.cfg.dpo.learning_rate},
                        {"epochs", st.cfg.dpo.epochs}};
  write_json(dir / "dpo_manifest.json", m);
  st.out << "export-dpo: " << pairs.size() << " records -> " << st.rel(dir / "dpo.jsonl") << "\n";
  return kExitOk;
}

int cmd_train_toy(const Stage& st) {
  const auto& d = st.cfg.dpo;
  std::vector<PreferenceExample> pairs;
  if (!st.flags.pairs.empty()) {
    pairs = read_jsonl(st.flags.pairs, preference_example_from_json);
  } else {
    pairs = synthetic_pairs(d.toy_pairs, d.toy_vocab, d.toy_max_length, st.cfg.seed);
  }
  std::size_t vocab = d.toy_vocab;
  for (const auto& p : pairs) {
    vocab = std::max<std::size_t>(vocab, p.prompt_last + 1);
    for (auto t : p.chosen) vocab = std::max<std::size_t>(vocab, t + 1);
    for (auto t : p.rejected) vocab = std::max<std::size_t>(vocab, t + 1);
  }
  const auto init = d.toy_init_scale > 0.0 ? ToyPolicy::random(vocab, st.cfg.seed, d.toy_init_scale)
                                           : ToyPolicy::uniform(vocab);
  DpoConfig cfg{d.beta, d.learning_rate, d.epochs, st.cfg.seed, d.length_normalized};
  const auto [policy, trace] = train_toy_dpo(pairs, cfg, init);
  const auto final_state = dpo_objective(policy, pairs, d.beta, d.length_normalized);

  const auto dir = st.dir("toy");
  write_file_atomic(dir / "pairs.jsonl", to_jsonl(pairs, preference_example_to_json));
  write_file_atomic(dir / "trace.jsonl", serialize_trace(trace));
  write_json(dir / "policy.json", policy_to_json(policy));
  ojson m;
  m["stage"] = "train-toy";
  m["config"] = {{"beta", d.beta},
                 {"learning_rate", d.learning_rate},
                 {"epochs", d.epochs},
                 {"length_normalized", d.length_normalized},
                 {"init_scale", d.toy_init_scale},
                 {"vocab", vocab},
                 {"pairs", pairs.size()},
                 {"seed", st.cfg.seed}};
  m["outputs"] = {{"pairs", st.file_ref(dir / "pairs.jsonl")},
                  {"trace", st.file_ref(dir / "trace.jsonl")},
                  {"policy", st.file_ref(dir / "policy.json")}};
  m["final"] = {{"mean_loss", final_state.mean_loss},
                {"mean_margin", final_state.mean_margin},
                {"preference_accuracy", final_state.preference_accuracy}};
  write_json(dir / "manifest.json", m);
  st.out << std::setprecision(6) << "train-toy: " << pairs.size() << " pairs, " << d.epochs
         << " epochs, loss " << trace.mean_loss.front() << " -> " << final_state.mean_loss
         << ", margin " << final_state.mean_margin << ", accuracy "
         << final_state.preference_accuracy << "\n";
  return kExitOk;
}

int cmd_gradcheck(const Stage& st) {
  if (st.flags.trials == 0) throw Error(ErrorCode::InvalidArgument, "--trials must be positive");
  std::mt19937_64 rng(st.cfg.seed);
  double worst_dpo = 0.0;
  double worst_sft = 0.0;
  std::string first_table;
  for (std::size_t t = 0; t < st.flags.trials; ++t) {
    const auto vocab = 2 + uniform_below(rng, 7);
    const auto policy = ToyPolicy::random(vocab, rng(), 1.0);
    ToyPolicy moved = policy;
    for (auto& v : moved.logits().values()) v += 0.3 * (static_cast<double>(rng() >> 11) * 0x1.0p-53 - 0.5);
    const auto seq = [&] {
      std::vector<TokenId> s(1 + uniform_below(rng, 12));
      for (auto& x : s) x = static_cast<TokenId>(uniform_below(rng, vocab));
      return s;
    };
    PreferenceExample pair{static_cast<TokenId>(uniform_below(rng, vocab)), seq(), seq()};
    const auto dpo = gradcheck(moved, pair, st.cfg.dpo.beta, st.flags.epsilon);
    const auto sft = gradcheck_sft(moved, {{pair.prompt_last, pair.chosen}}, st.flags.epsilon);
    worst_dpo = std::max(worst_dpo, dpo.max_rel_error);
    worst_sft = std::max(worst_sft, sft.max_rel_error);
    if (t == 0) first_table = format_gradcheck_table(dpo);
  }
  const auto dir = st.dir("toy");
  std::ostringstream report;
  report << first_table << std::scientific << std::setprecision(3) << "trials " << st.flags.trials
         << " epsilon " << st.flags.epsilon << " max_rel_err dpo " << worst_dpo << " sft "
         << worst_sft << "\n";
  write_file_atomic(dir / "gradcheck.txt", report.str());
  const bool ok = worst_dpo <= st.flags.tolerance && worst_sft <= st.flags.tolerance;
  st.out << std::scientific << std::setprecision(3) << "gradcheck: " << st.flags.trials
         << " trials, max relative error dpo " << worst_dpo << ", sft " << worst_sft << " ("
         << (ok ? "within" : "EXCEEDS") << " " << st.flags.tolerance << ")\n";
  return ok ? kExitOk : kExitRuntime;
}

struct Prediction {
  std::string id;
  std::optional<std::string> output;
  std::optional<std::string> label;
  std::uint64_t completion_tokens = 0;
  std::string error;
};

ojson prediction_to_json(const Prediction& p) {
  ojson j;
  j["id"] = p.id;
  if (p.output) j["output"] = *p.output;
  if (p.label) j["label"] = *p.label;
  j["completion_tokens"] = p.completion_tokens;
  if (!p.error.empty()) j["error"] = p.error;
  return j;
}

Prediction prediction_from_json(const nlohmann::json& j) {
  Prediction p;
  p.id = j.at("id").get<std::string>();
  if (j.contains("output")) p.output = j.at("output").get<std::string>();
  if (j.contains("label")) p.label = j.at("label").get<std::string>();
  p.completion_tokens = j.value("completion_tokens", std::uint64_t{0});
  p.error = j.value("error", std::string{});
  if (!p.output && !p.label && p.error.empty()) {
    throw Error(ErrorCode::MalformedRecord, "prediction '" + p.id + "' has neither output nor label");
  }
  return p;
}

std::vector<Prediction> predict(const Stage& st, const SampleSet& gold) {
  std::optional<RetrievalIndex> index;
  EmbeddingMap embeddings;
  if (st.flags.with_references) {
    index = load_stage_index(st);
    auto gw_embed = st.make_gateway();
    embeddings = embed_samples(gw_embed, st.cfg.backend("embedder", false), gold);
  }
  auto gw = st.make_gateway();
  auto ctx = st.context(gw, "sft_model");
  std::vector<Prediction> preds(gold.size());
  parallel_for(gold.size(), st.cfg.concurrency, [&](std::size_t i) {
    const auto& x = gold.samples()[i];
    auto& p = preds[i];
    p.id = x.id;
    std::vector<RetrievedCase> refs;
    if (index) {
      refs = query_topk(*index, normalize(embeddings.at(x.id)), st.cfg.k, x.id);
    }
    try {
      const auto prompt = build_generation_prompt(x, refs, ctx.taxonomy, ctx.prompt);
      const auto r = gw.chat_complete(ctx.backend, prompt.messages(), ctx.params);
      p.output = r.text;
      p.completion_tokens = r.completion_tokens;
    } catch (const Error& e) {
      if (st.flags.fail_fast) throw;
      p.error = e.what();
    }
  });
  return preds;
}

int cmd_evaluate(const Stage& st) {
  const fs::path gold_path = st.flags.gold.empty() ? st.corpus("test.jsonl") : fs::path(st.flags.gold);
  const auto gold = st.load_samples(gold_path);
  const auto dir = st.dir("eval");

  std::vector<Prediction> preds;
  fs::path pred_path;
  if (st.flags.predictions.empty()) {
    preds = predict(st, gold);
    pred_path = dir / (st.flags.name + ".predictions.jsonl");
    write_file_atomic(pred_path, to_jsonl(preds, prediction_to_json));
  } else {
    pred_path = st.flags.predictions;
    preds = read_jsonl(pred_path, prediction_from_json);
  }
  std::map<std::string, const Prediction*, std::less<>> by_id;
  for (const auto& p : preds) {
    if (!by_id.emplace(p.id, &p).second) {
      throw Error(ErrorCode::DuplicateId, "duplicate prediction for '" + p.id + "'");
    }
  }

  std::vector<std::optional<Category>> labels;
  std::vector<Category> golds;
  std::vector<std::string> outputs;
  std::vector<std::uint64_t> tokens;
  std::size_t missing = 0;
  for (const auto& x : gold) {
    golds.push_back(x.label);
    const auto it = by_id.find(x.id);
    if (it == by_id.end()) {
      ++missing;
      labels.emplace_back();
      continue;
    }
    const auto& p = *it->second;
    tokens.push_back(p.completion_tokens);
    if (p.output) {
      outputs.push_back(*p.output);
      try {
        labels.emplace_back(parse_chain(*p.output, st.cfg.taxonomy, st.cfg.format).parsed_label);
      } catch (const Error&) {
        labels.emplace_back();
      }
    } else if (p.label) {
      labels.emplace_back(normalize_label(*p.label, st.cfg.taxonomy, st.cfg.format));
    } else {
      labels.emplace_back();
    }
  }
  const auto report = f1_report(confusion_with_abstentions(labels, golds, st.cfg.taxonomy));
  std::optional<CoaStats> coa;
  if (!outputs.empty()) coa = coa_ratio(outputs, st.cfg.marker_lexicon(), st.cfg.format);

  auto j = report_to_json(report, coa);
  j["missing_predictions"] = missing;
  j["completion_tokens"] = tokens;
  j["inputs"] = {{"gold", st.file_ref(gold_path)}, {"predictions", st.file_ref(pred_path)}};
  write_json(dir / (st.flags.name + ".json"), j);
  const auto table = render_report_table(report, coa);
  write_file_atomic(dir / (st.flags.name + ".txt"), table);
  st.out << std::fixed << std::setprecision(1) << "evaluate: n=" << report.n << " macro F1 "
         << 100.0 * report.macro_f1 << ", weighted F1 " << 100.0 * report.weighted_f1;
  if (coa) st.out << ", CoA ratio " << coa->ratio << "%";
  st.out << " -> " << st.rel(dir / (st.flags.name + ".json")) << "\n";
  return kExitOk;
}

ojson read_json(const fs::path& p) {
  Stage::require(p);
  try {
    return ojson::parse(read_file(p));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, p.string() + ": " + e.what());
  }
}

int cmd_report(const Stage& st) {
  const auto dir = st.dir("report");
  ojson summary;
  const std::vector<std::pair<std::string, fs::path>> manifests{
      {"ingest", st.cfg.output_dir / "corpus" / "manifest.json"},
      {"dedup", st.cfg.output_dir / "corpus" / "dedup_manifest.json"},
      {"index", st.cfg.output_dir / "index" / "manifest.json"},
      {"generate", st.cfg.output_dir / "augment" / "generate_manifest.json"},
      {"refine", st.cfg.output_dir / "augment" / "manifest.json"},
      {"export-sft", st.cfg.output_dir / "export" / "sft_manifest.json"},
      {"pairs", st.cfg.output_dir / "pairs" / "manifest.json"},
      {"export-dpo", st.cfg.output_dir / "export" / "dpo_manifest.json"},
      {"train-toy", st.cfg.output_dir / "toy" / "manifest.json"},
  };
  for (const auto& [name, path] : manifests) {
    if (!fs::is_regular_file(path)) continue;
    const auto m = read_json(path);
    if (m.contains("counters")) {
      summary[name] = m["counters"];
      st.out << std::left << std::setw(12) << name << m["counters"].dump() << "\n";
    } else if (m.contains("final")) {
      summary[name] = m["final"];
      st.out << std::left << std::setw(12) << name << m["final"].dump() << "\n";
    }
  }

  if (!st.flags.variant.empty()) {
    if (st.flags.baseline.empty()) {
      throw Error(ErrorCode::InvalidArgument, "--variant requires --baseline");
    }
    const auto v = read_json(st.flags.variant);
    const auto b = read_json(st.flags.baseline);
    const auto vt = v.at("completion_tokens").get<std::vector<std::uint64_t>>();
    const auto bt = b.at("completion_tokens").get<std::vector<std::uint64_t>>();
    const auto cost = token_cost(vt, bt, v.at("macro_f1").get<double>(),
                                 b.at("macro_f1").get<double>(), F1Unit::Fraction);
    summary["cost"] = cost_to_json(cost);
    st.out << std::fixed << std::setprecision(1) << "cost: " << cost.mean_extra_tokens
           << " extra tokens, " << cost.delta_f1_points << " F1 points";
    if (cost.tokens_per_f1_point) {
      st.out << ", " << *cost.tokens_per_f1_point << " tokens per point";
    } else {
      st.out << ", tokens per point undefined";
    }
    st.out << "\n";
  }
  write_json(dir / "summary.json", summary);
  return kExitOk;
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument:
    case ErrorCode::ConfigInvalid:
    case ErrorCode::IoError:
    case ErrorCode::MalformedRecord:
    case ErrorCode::UnknownLabel:
    case ErrorCode::AmbiguousLabel:
    case ErrorCode::EmptyText:
    case ErrorCode::DuplicateId:
    case ErrorCode::InsufficientSamples:
    case ErrorCode::LengthMismatch:
      return kExitValidation;
    default:
      return kExitRuntime;
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Retrieval-grounded moderation reasoning pipeline", "amod"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  Flags flags;
  app.add_option("--config", flags.config, "Pipeline configuration (TOML)");
  app.add_option("--seed", flags.seed, "Override the configured seed");
  app.add_flag("--resume", flags.resume, "Keep finished samples from a previous run");
  app.add_flag("--fail-fast", flags.fail_fast, "Stop at the first per-sample failure");
  app.add_option("--backend-override", flags.backend_overrides,
                 "ROLE.FIELD=VALUE applied to [backends.ROLE]")
      ->allow_extra_args(false);

  using Handler = int (*)(const Stage&);
  const std::vector<std::tuple<std::string, std::string, Handler>> stages{
      {"ingest", "Load and split the labeled dataset", cmd_ingest},
      {"dedup", "Drop near-duplicate samples per category", cmd_dedup},
      {"index", "Embed the training split and build the retrieval index", cmd_index},
      {"generate", "Generate reasoning chains conditioned on retrieved cases", cmd_generate},
      {"refine", "Reflect on mislabeled chains and drop what stays wrong", cmd_refine},
      {"export-sft", "Write supervised fine-tuning records", cmd_export_sft},
      {"pairs", "Build preference pairs with and without retrieved cases", cmd_pairs},
      {"export-dpo", "Validate and write preference records", cmd_export_dpo},
      {"train-toy", "Train the bigram toy policy with the preference loss", cmd_train_toy},
      {"gradcheck", "Check analytic gradients against finite differences", cmd_gradcheck},
      {"evaluate", "Score predictions against gold labels", cmd_evaluate},
      {"report", "Summarize stage manifests and token cost", cmd_report},
  };
  std::map<CLI::App*, Handler> handlers;
  for (const auto& [name, help, handler] : stages) {
    auto* sub = app.add_subcommand(name, help);
    handlers[sub] = handler;
    if (name == "evaluate") {
      sub->add_option("--predictions", flags.predictions,
                      "JSONL with id and output or label; omitted runs the sft_model backend");
      sub->add_option("--gold", flags.gold, "Gold JSONL (default: corpus/test.jsonl)");
      sub->add_option("--name", flags.name, "Report file stem under eval/");
      sub->add_flag("--with-references", flags.with_references,
                    "Include retrieved cases in the prompts when predicting");
    } else if (name == "report") {
      sub->add_option("--variant", flags.variant, "Evaluation report of the variant");
      sub->add_option("--baseline", flags.baseline, "Evaluation report of the baseline");
    } else if (name == "train-toy") {
      sub->add_option("--pairs", flags.pairs, "JSONL of token-id preference pairs");
    } else if (name == "gradcheck") {
      sub->add_option("--trials", flags.trials, "Random policy and pair draws");
      sub->add_option("--epsilon", flags.epsilon, "Central difference step");
      sub->add_option("--tolerance", flags.tolerance, "Maximum relative error");
    }
  }

  std::vector<const char*> argv;
  argv.reserve(args.size());
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  }

  CLI::App* chosen = app.get_subcommands().front();
  const bool needs_config = chosen->get_name() != "train-toy" && chosen->get_name() != "gradcheck";
  try {
    if (needs_config && flags.config.empty()) {
      throw Error(ErrorCode::ConfigInvalid, "--config: required for " + chosen->get_name());
    }
    ConfigOverrides overrides{flags.backend_overrides, flags.seed};
    const auto cfg = flags.config.empty() ? parse_config("", fs::current_path(), overrides)
                                          : load_config(flags.config, overrides);
    Stage stage(cfg, flags, out);
    return handlers.at(chosen)(stage);
  } catch (const Error& e) {
    err << "error: " << chosen->get_name() << ": " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    err << "error: " << chosen->get_name() << ": " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace amod::cli
