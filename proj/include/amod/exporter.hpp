#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "amod/coagen.hpp"
#include "json.hpp"

namespace amod {

struct ExportManifest {
  std::string path;
  std::size_t records = 0;
  std::string sha256;

  nlohmann::ordered_json to_json() const;
};

struct SftRecord {
  std::string prompt;      // plain prompt, no reference block
  std::string completion;  // canonical three-part chain ending in the label line
  std::string sample_id;
  Category category;
  std::size_t refinement_rounds = 0;
  std::string status;

  bool operator==(const SftRecord&) const = default;
};

SftRecord make_sft_record(const AugmentedSample& aug, const Taxonomy& taxonomy,
                          const ChainFormat& format = {}, const PromptOptions& prompt = {});

// Every entry must be accepted and its rendered completion must parse back to
// the gold label, else InvariantViolation and nothing is written.
ExportManifest export_sft(const std::vector<AugmentedSample>& aug,
                          const std::filesystem::path& path, const Taxonomy& taxonomy,
                          const ChainFormat& format = {}, const PromptOptions& prompt = {});
std::string serialize_sft(const std::vector<SftRecord>& records);
std::vector<SftRecord> load_sft(const std::filesystem::path& path);

struct ChainMeta {
  bool had_references = false;
  Category parsed_label;
  std::uint64_t completion_tokens = 0;

  bool operator==(const ChainMeta&) const = default;
};

struct PreferencePair {
  std::string sample_id;
  Category category;
  std::string prompt;
  std::string chosen;
  std::string rejected;
  ChainMeta chosen_meta;
  ChainMeta rejected_meta;

  bool operator==(const PreferencePair&) const = default;
};

struct PairOptions {
  std::size_t k = 32;
  // Also require the rejected chain's label to be wrong.
  bool strict = false;
  // Generations per side; the best retrieval-conditioned and the worst plain
  // chain are paired.
  std::size_t samples_per_side = 1;
  bool fail_fast = false;
  std::size_t concurrency = 1;
  std::vector<std::string> marker_lexicon;  // empty selects the default CoA lexicon
};

struct PairOutcome {
  std::string id;
  std::string status;  // kept | skipped_chosen_wrong | skipped_chosen_malformed |
                       // skipped_rejected_malformed | skipped_rejected_correct | error
  std::string error;
};

struct PairsManifest {
  std::size_t kept = 0;
  std::size_t skipped = 0;
  std::size_t errors = 0;
  std::vector<PairOutcome> outcomes;  // sorted by id

  nlohmann::ordered_json to_json() const;
};

struct PairsResult {
  std::vector<PreferencePair> pairs;  // sorted by sample id
  PairsManifest manifest;
};

// Per sample: one generation conditioned on retrieved cases (self excluded)
// and one on the sample alone, both from the SFT-stage backend.
PairsResult build_preference_pairs(const SampleSet& samples, const RetrievalIndex& index,
                                   const EmbeddingMap& embeddings, GenerationContext& ctx,
                                   const PairOptions& options);

nlohmann::ordered_json pair_to_json(const PreferencePair& pair);
PreferencePair pair_from_json(const nlohmann::json& j);
std::string serialize_dpo(const std::vector<PreferencePair>& pairs);
ExportManifest export_dpo(const std::vector<PreferencePair>& pairs,
                          const std::filesystem::path& path);
std::vector<PreferencePair> load_dpo(const std::filesystem::path& path);

}  // namespace amod
