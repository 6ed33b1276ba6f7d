#include "amod/exporter.hpp"

#include <algorithm>
#include <fstream>

#include "amod/error.hpp"
#include "amod/eval.hpp"
#include "amod/parallel.hpp"
#include "amod/util.hpp"

namespace amod {

nlohmann::ordered_json ExportManifest::to_json() const {
  nlohmann::ordered_json j;
  j["path"] = path;
  j["records"] = records;
  j["sha256"] = sha256;
  return j;
}

namespace {

template <typename T, typename Parse>
std::vector<T> load_jsonl(const std::filesystem::path& path, Parse parse) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::vector<T> out;
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

ExportManifest write_export(const std::filesystem::path& path, const std::string& content,
                            std::size_t records) {
  write_file_atomic(path, content);
  return {path.string(), records, sha256_hex(content)};
}

}  // namespace

// ---------------------------------------------------------------------------
// SFT
// ---------------------------------------------------------------------------

SftRecord make_sft_record(const AugmentedSample& aug, const Taxonomy& taxonomy,
                          const ChainFormat& format, const PromptOptions& prompt) {
  if (!aug.accepted()) {
    throw Error(ErrorCode::InvariantViolation,
                "sample '" + aug.sample.id + "' was dropped and cannot be exported");
  }
  SftRecord r;
  r.prompt = build_generation_prompt(aug.sample, {}, taxonomy, prompt).text();
  r.completion = render_chain(aug.chain, format);
  r.sample_id = aug.sample.id;
  r.category = aug.sample.label;
  r.refinement_rounds = aug.refinement_rounds;
  r.status = std::string(to_string(aug.status));

  Category back;
  try {
    back = parse_chain(r.completion, taxonomy, format).parsed_label;
  } catch (const Error& e) {
    throw Error(ErrorCode::InvariantViolation,
                "completion for '" + r.sample_id + "' does not parse back: " + e.what(),
                r.completion);
  }
  if (back != r.category) {
    throw Error(ErrorCode::InvariantViolation,
                "completion for '" + r.sample_id + "' parses to '" + back + "', gold is '" +
                    r.category + "'",
                r.completion);
  }
  return r;
}

std::string serialize_sft(const std::vector<SftRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["prompt"] = r.prompt;
    j["completion"] = r.completion;
    j["meta"] = {{"sample_id", r.sample_id},
                 {"category", r.category},
                 {"status", r.status},
                 {"refinement_rounds", r.refinement_rounds}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

ExportManifest export_sft(const std::vector<AugmentedSample>& aug,
                          const std::filesystem::path& path, const Taxonomy& taxonomy,
                          const ChainFormat& format, const PromptOptions& prompt) {
  std::vector<SftRecord> records;
  records.reserve(aug.size());
  for (const auto& a : aug) records.push_back(make_sft_record(a, taxonomy, format, prompt));
  return write_export(path, serialize_sft(records), records.size());
}

std::vector<SftRecord> load_sft(const std::filesystem::path& path) {
  return load_jsonl<SftRecord>(path, [](const nlohmann::json& j) {
    SftRecord r;
    r.prompt = j.at("prompt").get<std::string>();
    r.completion = j.at("completion").get<std::string>();
    const auto& meta = j.at("meta");
    r.sample_id = meta.at("sample_id").get<std::string>();
    r.category = meta.at("category").get<std::string>();
    r.status = meta.at("status").get<std::string>();
    r.refinement_rounds = meta.at("refinement_rounds").get<std::size_t>();
    return r;
  });
}

// ---------------------------------------------------------------------------
// Preference pairs
// ---------------------------------------------------------------------------

nlohmann::ordered_json PairsManifest::to_json() const {
  nlohmann::ordered_json j;
  j["counters"] = {{"kept", kept}, {"skipped", skipped}, {"errors", errors}};
  auto arr = nlohmann::ordered_json::array();
  for (const auto& o : outcomes) {
    nlohmann::ordered_json e;
    e["id"] = o.id;
    e["status"] = o.status;
    if (!o.error.empty()) e["error"] = o.error;
    arr.push_back(std::move(e));
  }
  j["samples"] = std::move(arr);
  return j;
}

namespace {

struct Candidate {
  std::optional<ReasoningChain> chain;  // absent when unparseable
  std::string raw_text;
  std::uint64_t completion_tokens = 0;
  std::size_t markers = 0;
};

Candidate sample_candidate(const PromptBundle& prompt, GenerationContext& ctx,
                           const MarkerMatcher& matcher) {
  const auto result = ctx.gateway.chat_complete(ctx.backend, prompt.messages(), ctx.params);
  Candidate c;
  c.raw_text = result.text;
  c.completion_tokens = result.completion_tokens;
  try {
    c.chain = parse_chain(result.text, ctx.taxonomy, ctx.format);
    c.chain->completion_tokens = result.completion_tokens;
  } catch (const Error& e) {
    if (e.code() != ErrorCode::MalformedChain && e.code() != ErrorCode::UnknownLabel &&
        e.code() != ErrorCode::AmbiguousLabel) {
      throw;
    }
  }
  c.markers = matcher.count(analysis_text(result.text, ctx.format));
  return c;
}

}  // namespace

PairsResult build_preference_pairs(const SampleSet& samples, const RetrievalIndex& index,
                                   const EmbeddingMap& embeddings, GenerationContext& ctx,
                                   const PairOptions& options) {
  if (options.samples_per_side == 0) {
    throw Error(ErrorCode::InvalidArgument, "samples_per_side must be at least 1");
  }
  const MarkerMatcher matcher(options.marker_lexicon.empty() ? default_coa_lexicon()
                                                             : options.marker_lexicon);
  struct Slot {
    std::optional<PreferencePair> pair;
    PairOutcome outcome;
  };
  std::vector<Slot> slots(samples.size());

  parallel_for(samples.size(), options.concurrency, [&](std::size_t i) {
    const auto& x = samples.samples()[i];
    auto& slot = slots[i];
    slot.outcome.id = x.id;
    auto emb = embeddings.find(x.id);
    if (emb == embeddings.end()) {
      throw Error(ErrorCode::MissingEmbedding, "no embedding for sample '" + x.id + "'");
    }
    const auto refs = query_topk(index, normalize(emb->second), options.k, x.id);
    try {
      const auto with_refs = build_generation_prompt(x, refs, ctx.taxonomy, ctx.prompt);
      const auto plain = build_generation_prompt(x, {}, ctx.taxonomy, ctx.prompt);

      std::optional<Candidate> best;
      bool any_parsed = false;
      for (std::size_t n = 0; n < options.samples_per_side; ++n) {
        auto c = sample_candidate(with_refs, ctx, matcher);
        if (!c.chain) continue;
        any_parsed = true;
        if (c.chain->parsed_label != x.label) continue;
        if (!best || c.markers > best->markers) best = std::move(c);
      }
      if (!best) {
        slot.outcome.status = any_parsed ? "skipped_chosen_wrong" : "skipped_chosen_malformed";
        return;
      }

      std::optional<Candidate> worst;
      const auto worse = [&](const Candidate& a, const Candidate& b) {
        const bool a_wrong = a.chain->parsed_label != x.label;
        const bool b_wrong = b.chain->parsed_label != x.label;
        if (a_wrong != b_wrong) return a_wrong;
        return a.markers < b.markers;
      };
      for (std::size_t n = 0; n < options.samples_per_side; ++n) {
        auto c = sample_candidate(plain, ctx, matcher);
        if (!c.chain) continue;
        if (!worst || worse(c, *worst)) worst = std::move(c);
      }
      if (!worst) {
        slot.outcome.status = "skipped_rejected_malformed";
        return;
      }
      if (options.strict && worst->chain->parsed_label == x.label) {
        slot.outcome.status = "skipped_rejected_correct";
        return;
      }

      PreferencePair p;
      p.sample_id = x.id;
      p.category = x.label;
      p.prompt = plain.text();
      p.chosen = best->raw_text;
      p.rejected = worst->raw_text;
      p.chosen_meta = {true, best->chain->parsed_label, best->completion_tokens};
      p.rejected_meta = {false, worst->chain->parsed_label, worst->completion_tokens};
      slot.pair = std::move(p);
      slot.outcome.status = "kept";
    } catch (const Error& e) {
      if (options.fail_fast) throw;
      slot.outcome.status = "error";
      slot.outcome.error = e.what();
    }
  });

  PairsResult result;
  for (auto& slot : slots) {
    if (slot.pair) {
      ++result.manifest.kept;
      result.pairs.push_back(std::move(*slot.pair));
    } else if (slot.outcome.status == "error") {
      ++result.manifest.errors;
    } else {
      ++result.manifest.skipped;
    }
    result.manifest.outcomes.push_back(std::move(slot.outcome));
  }
  std::sort(result.pairs.begin(), result.pairs.end(),
            [](const auto& a, const auto& b) { return a.sample_id < b.sample_id; });
  std::sort(result.manifest.outcomes.begin(), result.manifest.outcomes.end(),
            [](const auto& a, const auto& b) { return a.id < b.id; });
  return result;
}

namespace {

nlohmann::ordered_json meta_to_json(const ChainMeta& m) {
  nlohmann::ordered_json j;
  j["had_references"] = m.had_references;
  j["parsed_label"] = m.parsed_label;
  j["completion_tokens"] = m.completion_tokens;
  return j;
}

ChainMeta meta_from_json(const nlohmann::json& j) {
  return {j.at("had_references").get<bool>(), j.at("parsed_label").get<std::string>(),
          j.at("completion_tokens").get<std::uint64_t>()};
}

}  // namespace

nlohmann::ordered_json pair_to_json(const PreferencePair& p) {
  nlohmann::ordered_json j;
  j["prompt"] = p.prompt;
  j["chosen"] = p.chosen;
  j["rejected"] = p.rejected;
  nlohmann::ordered_json meta;
  meta["sample_id"] = p.sample_id;
  meta["category"] = p.category;
  meta["chosen"] = meta_to_json(p.chosen_meta);
  meta["rejected"] = meta_to_json(p.rejected_meta);
  j["meta"] = std::move(meta);
  return j;
}

PreferencePair pair_from_json(const nlohmann::json& j) {
  PreferencePair p;
  p.prompt = j.at("prompt").get<std::string>();
  p.chosen = j.at("chosen").get<std::string>();
  p.rejected = j.at("rejected").get<std::string>();
  const auto& meta = j.at("meta");
  p.sample_id = meta.at("sample_id").get<std::string>();
  p.category = meta.at("category").get<std::string>();
  p.chosen_meta = meta_from_json(meta.at("chosen"));
  p.rejected_meta = meta_from_json(meta.at("rejected"));
  return p;
}

std::string serialize_dpo(const std::vector<PreferencePair>& pairs) {
  std::string out;
  for (const auto& p : pairs) {
    out += pair_to_json(p).dump();
    out += '\n';
  }
  return out;
}

ExportManifest export_dpo(const std::vector<PreferencePair>& pairs,
                          const std::filesystem::path& path) {
  return write_export(path, serialize_dpo(pairs), pairs.size());
}

std::vector<PreferencePair> load_dpo(const std::filesystem::path& path) {
  return load_jsonl<PreferencePair>(path, pair_from_json);
}

}  // namespace amod
