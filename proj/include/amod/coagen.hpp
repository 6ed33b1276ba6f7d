#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "amod/corpus.hpp"
#include "amod/gateway.hpp"
#include "amod/retrieval.hpp"
#include "json.hpp"

namespace amod {

// Section header lexicon and label alias table used by parse_chain.
struct ChainFormat {
  std::vector<std::string> analysis_headers{"Analysis Process", "分析过程"};
  std::vector<std::string> harmful_headers{"Harmful Content", "有害内容"};
  std::vector<std::string> classification_headers{"Classification Result", "分类结果"};
  // alias -> category; entries naming a category outside the taxonomy are ignored.
  std::map<std::string, Category> aliases{
      {"Political Harmful", "Politics"}, {"政治", "Politics"},  {"色情", "Pornography"},
      {"暴力", "Violence"},              {"偏见", "Bias"},      {"歧视", "Bias"},
      {"赌博", "Gambling"},              {"无害", "Harmless"},
  };
};

struct PromptOptions {
  // Print each example case's gold label in the reference block.
  bool show_reference_labels = true;
};

struct PromptBundle {
  std::string system_or_task_text;
  std::string target_text;
  std::string reference_block;  // empty for the plain variant
  std::optional<std::string> prior_response;

  // Task text, reference block (when present) and target in a fixed layout.
  std::string text() const;
  std::vector<ChatMessage> messages() const { return {{"user", text()}}; }
};

std::string render_category_list(const Taxonomy& taxonomy);
std::string render_reference_block(const std::vector<RetrievedCase>& refs,
                                   const PromptOptions& options = {});

PromptBundle build_generation_prompt(const ModerationSample& x,
                                     const std::vector<RetrievedCase>& refs,
                                     const Taxonomy& taxonomy, const PromptOptions& options = {});

struct ReasoningChain {
  std::string analysis_process;
  std::string harmful_content;
  std::string classification_result;
  Category parsed_label;  // empty when the text could not be parsed
  std::string raw_text;
  std::uint64_t completion_tokens = 0;
  std::uint64_t prompt_tokens = 0;

  bool parsed() const noexcept { return !parsed_label.empty(); }
  bool operator==(const ReasoningChain&) const = default;
};

// Requires prior.parsed_label != x.label; the gold label is never rendered
// outside the category enumeration.
PromptBundle build_reflection_prompt(const ModerationSample& x,
                                     const std::vector<RetrievedCase>& refs,
                                     const ReasoningChain& prior, const Taxonomy& taxonomy,
                                     const PromptOptions& options = {});

struct ChainSections {
  std::string analysis_process;
  std::string harmful_content;
  std::string classification_result;
};

// Locates the three sections; throws MalformedChain naming the first one missing.
ChainSections split_sections(std::string_view text, const ChainFormat& format = {});

// Longest case-insensitive category or alias match.
Category normalize_label(std::string_view classification, const Taxonomy& taxonomy,
                         const ChainFormat& format = {});

ReasoningChain parse_chain(std::string_view text, const Taxonomy& taxonomy,
                           const ChainFormat& format = {});

// Canonical three-part rendering; the last line carries the label.
std::string render_chain(const ReasoningChain& chain, const ChainFormat& format = {});

struct GenerationContext {
  Gateway& gateway;
  const BackendSpec& backend;
  SamplingParams params;
  const Taxonomy& taxonomy;
  ChainFormat format;
  PromptOptions prompt;
};

// Throws the parse error with the raw completion as attachment.
ReasoningChain generate_chain(const ModerationSample& x, const std::vector<RetrievedCase>& refs,
                              GenerationContext& ctx);

enum class AugmentStatus { AcceptedFirstPass, AcceptedAfterReflection, Dropped };

std::string_view to_string(AugmentStatus status);
std::optional<AugmentStatus> parse_augment_status(std::string_view text);

struct AugmentedSample {
  ModerationSample sample;
  ReasoningChain chain;
  std::size_t refinement_rounds = 0;
  AugmentStatus status = AugmentStatus::Dropped;

  bool accepted() const noexcept { return status != AugmentStatus::Dropped; }
  bool operator==(const AugmentedSample&) const = default;
};

ReasoningChain chain_from_json(const nlohmann::json& j);
nlohmann::ordered_json chain_to_json(const ReasoningChain& chain);
ModerationSample sample_from_json(const nlohmann::json& j);

// Runs up to max_rounds reflection calls with the original references.
AugmentedSample refine_chain(const ModerationSample& x, const std::vector<RetrievedCase>& refs,
                             const ReasoningChain& prior, GenerationContext& ctx,
                             std::size_t max_rounds = 1);

struct AugmentOptions {
  std::size_t k = 32;
  std::size_t max_rounds = 1;
  bool fail_fast = false;
  std::size_t concurrency = 1;
};

// First-pass outcome of one training sample, the hand-off between the
// generate and refine stages.
struct GeneratedRecord {
  ModerationSample sample;
  std::vector<RetrievedCase> refs;
  ReasoningChain chain;  // unparsed chains keep raw_text only
  std::string error;     // gateway failure; chain is empty
  bool accepted() const { return error.empty() && chain.parsed_label == sample.label; }
};

nlohmann::ordered_json generated_to_json(const GeneratedRecord& rec);
GeneratedRecord generated_from_json(const nlohmann::json& j);
nlohmann::ordered_json augmented_to_json(const AugmentedSample& aug);
AugmentedSample augmented_from_json(const nlohmann::json& j);

struct SampleOutcome {
  std::string id;
  std::string status;  // an AugmentStatus name, or "error"
  std::size_t refinement_rounds = 0;
  std::string error;
};

struct AugmentManifest {
  std::size_t accepted_first_pass = 0;
  std::size_t accepted_after_reflection = 0;
  std::size_t dropped = 0;
  std::size_t errors = 0;
  std::vector<SampleOutcome> outcomes;  // sorted by id

  nlohmann::ordered_json to_json() const;
};

struct AugmentResult {
  std::vector<AugmentedSample> samples;  // sorted by id; excludes errored samples
  AugmentManifest manifest;
};

// Retrieval (self excluded) plus first-pass generation; sorted by sample id.
// `skip_ids` are left out entirely (used by resume).
std::vector<GeneratedRecord> generate_stage(const SampleSet& train, const RetrievalIndex& index,
                                            const EmbeddingMap& embeddings,
                                            GenerationContext& ctx, const AugmentOptions& options,
                                            const std::vector<std::string>& skip_ids = {});

// Accepts matching first passes and reflects on the rest.
AugmentResult refine_stage(const std::vector<GeneratedRecord>& records, GenerationContext& ctx,
                           const AugmentOptions& options);

AugmentResult augment_dataset(const SampleSet& train, const RetrievalIndex& index,
                              const EmbeddingMap& embeddings, GenerationContext& ctx,
                              const AugmentOptions& options);

}  // namespace amod
