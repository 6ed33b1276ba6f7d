#include "amod/coagen.hpp"

#include <algorithm>
#include <mutex>
#include <set>

#include "amod/error.hpp"
#include "amod/parallel.hpp"
#include "amod/util.hpp"

namespace amod {

// ---------------------------------------------------------------------------
// Prompt templates
// ---------------------------------------------------------------------------

namespace {

constexpr std::string_view kTaskPrefix =
    "Task: Assume you are a professional content moderator. Assess the harmfulness of the "
    "following content and classify it into exactly one of these categories: ";

constexpr std::string_view kInstructions =
    "Instructions:\n"
    "1. Provide a detailed \"Analysis Process\" explaining the reasoning for classification "
    "using chain-of-thought\n"
    "2. Extract the \"Harmful Content\" from the sentence\n"
    "3. Provide the \"Classification Result\"";

constexpr std::string_view kGenerationFormat =
    "Format Requirements:\n"
    "- Response must follow this three-part format: 'Analysis Process', 'Harmful Content', "
    "'Classification Result'\n"
    "- You may reference \"Example Cases\" if available (note they may not always be accurate)\n"
    "- Any referenced examples should be reflected in your final response";

constexpr std::string_view kReflectionFormat =
    "Format Requirements:\n"
    "- Response must follow three-part format: 'Analysis Process', 'Harmful Content', "
    "'Classification Result'\n"
    "- You may reference \"Example Cases\" if available (note they may not always be accurate)\n"
    "- Any referenced examples should be reflected in your final response";

constexpr std::string_view kReflectionContextHead =
    "Additional Context:\n"
    "- Your original response was: ";

constexpr std::string_view kReflectionContextTail =
    "\n- Please reflect and provide a final answer\n"
    "- Do not explicitly mention reflection in your final output";

constexpr std::string_view kReferenceHeader = "Example Cases:";
constexpr std::string_view kTargetHeader = "Content to assess:\n";

std::string task_line(const Taxonomy& taxonomy) {
  std::string s(kTaskPrefix);
  s += render_category_list(taxonomy);
  s += '.';
  return s;
}

}  // namespace

std::string render_category_list(const Taxonomy& taxonomy) {
  std::string s = "[";
  for (std::size_t i = 0; i < taxonomy.size(); ++i) {
    if (i) s += ", ";
    s += taxonomy.categories()[i];
  }
  s += ']';
  return s;
}

std::string render_reference_block(const std::vector<RetrievedCase>& refs,
                                   const PromptOptions& options) {
  if (refs.empty()) return {};
  std::string s(kReferenceHeader);
  for (std::size_t i = 0; i < refs.size(); ++i) {
    s += "\nCase " + std::to_string(i + 1) + ":\nContent: " + refs[i].text;
    if (options.show_reference_labels) s += "\nLabel: " + refs[i].label;
    if (i + 1 < refs.size()) s += '\n';
  }
  return s;
}

std::string PromptBundle::text() const {
  std::string s = system_or_task_text;
  s += "\n\n";
  if (!reference_block.empty()) {
    s += reference_block;
    s += "\n\n";
  }
  s += kTargetHeader;
  s += target_text;
  return s;
}

PromptBundle build_generation_prompt(const ModerationSample& x,
                                     const std::vector<RetrievedCase>& refs,
                                     const Taxonomy& taxonomy, const PromptOptions& options) {
  PromptBundle p;
  p.system_or_task_text = task_line(taxonomy);
  p.system_or_task_text += "\n\n";
  p.system_or_task_text += kInstructions;
  p.system_or_task_text += "\n\n";
  p.system_or_task_text += kGenerationFormat;
  p.target_text = x.text;
  p.reference_block = render_reference_block(refs, options);
  return p;
}

PromptBundle build_reflection_prompt(const ModerationSample& x,
                                     const std::vector<RetrievedCase>& refs,
                                     const ReasoningChain& prior, const Taxonomy& taxonomy,
                                     const PromptOptions& options) {
  if (prior.parsed_label == x.label) {
    throw Error(ErrorCode::InvalidArgument,
                "reflection requested for sample '" + x.id + "' whose prior label is correct");
  }
  PromptBundle p;
  p.system_or_task_text = task_line(taxonomy);
  p.system_or_task_text += "\n\n";
  p.system_or_task_text += kInstructions;
  p.system_or_task_text += "\n\n";
  p.system_or_task_text += kReflectionContextHead;
  p.system_or_task_text += prior.raw_text;
  p.system_or_task_text += kReflectionContextTail;
  p.system_or_task_text += "\n\n";
  p.system_or_task_text += kReflectionFormat;
  p.target_text = x.text;
  p.reference_block = render_reference_block(refs, options);
  p.prior_response = prior.raw_text;
  return p;
}

// ---------------------------------------------------------------------------
// Chain parsing
// ---------------------------------------------------------------------------

namespace {

struct HeaderHit {
  std::size_t line_start;  // start of the line holding the header
  std::size_t begin;
  std::size_t end;  // first byte after header decoration
};

bool is_ascii_decoration(char c) {
  return c == ' ' || c == '\t' || c == '*' || c == '#' || c == '-' || c == '>' || c == '.' ||
         c == ')' || c == '(' || c == '\'' || c == '"' || c == '[' || c == '_' ||
         (c >= '0' && c <= '9');
}

constexpr std::string_view kWideDecorations[] = {"“", "”", "【", "】", "「", "」", "：", "‘", "’"};

std::size_t skip_wide(std::string_view s, std::size_t pos) {
  for (auto w : kWideDecorations) {
    if (s.substr(pos, w.size()) == w) return pos + w.size();
  }
  return pos;
}

// True when text[line_start, pos) holds only list or markup decoration.
bool only_decoration(std::string_view text, std::size_t line_start, std::size_t pos) {
  std::size_t i = line_start;
  while (i < pos) {
    if (is_ascii_decoration(text[i])) {
      ++i;
      continue;
    }
    const auto j = skip_wide(text, i);
    if (j == i) return false;
    i = j;
  }
  return true;
}

// Quotes and brackets only close the header before its colon; after the
// colon they belong to the body.
std::size_t skip_header_tail(std::string_view text, std::size_t pos) {
  bool after_colon = false;
  while (pos < text.size()) {
    const char c = text[pos];
    if (c == ' ' || c == '\t' || c == '*' || c == '#' || c == '_') {
      ++pos;
      continue;
    }
    if (!after_colon && (c == '\'' || c == '"' || c == ']' || c == ')')) {
      ++pos;
      continue;
    }
    if (!after_colon && c == ':') {
      after_colon = true;
      ++pos;
      continue;
    }
    if (!after_colon && text.substr(pos, 3) == "\uFF1A") {
      after_colon = true;
      pos += 3;
      continue;
    }
    if (after_colon) break;
    const auto j = skip_wide(text, pos);
    if (j == pos) break;
    pos = j;
  }
  return pos;
}

std::optional<HeaderHit> find_header(std::string_view text, const std::vector<std::string>& variants,
                                     std::size_t from) {
  std::optional<HeaderHit> anywhere;
  std::optional<HeaderHit> line_hit;
  for (const auto& v : variants) {
    for (std::size_t pos = find_icase(text, v, from); pos != std::string_view::npos;
         pos = find_icase(text, v, pos + 1)) {
      const auto nl = pos == 0 ? std::string_view::npos : text.rfind('\n', pos - 1);
      const std::size_t line_start = nl == std::string_view::npos ? 0 : nl + 1;
      const std::size_t effective_start = std::max(line_start, from);
      HeaderHit hit{effective_start, pos, skip_header_tail(text, pos + v.size())};
      if (!anywhere || hit.begin < anywhere->begin) anywhere = hit;
      if (only_decoration(text, effective_start, pos)) {
        if (!line_hit || hit.begin < line_hit->begin) line_hit = hit;
        break;
      }
    }
  }
  if (line_hit) return line_hit;
  if (anywhere) anywhere->line_start = anywhere->begin;
  return anywhere;
}

std::string body(std::string_view text, std::size_t begin, std::size_t end) {
  return std::string(trim(text.substr(begin, end - begin)));
}

}  // namespace

ChainSections split_sections(std::string_view text, const ChainFormat& format) {
  const auto analysis = find_header(text, format.analysis_headers, 0);
  if (!analysis) {
    throw Error(ErrorCode::MalformedChain, "missing section 'Analysis Process'", std::string(text));
  }
  const auto harmful = find_header(text, format.harmful_headers, analysis->end);
  if (!harmful) {
    throw Error(ErrorCode::MalformedChain, "missing section 'Harmful Content'", std::string(text));
  }
  const auto classification = find_header(text, format.classification_headers, harmful->end);
  if (!classification) {
    throw Error(ErrorCode::MalformedChain, "missing section 'Classification Result'",
                std::string(text));
  }
  ChainSections s;
  s.analysis_process = body(text, analysis->end, harmful->line_start);
  s.harmful_content = body(text, harmful->end, classification->line_start);
  s.classification_result = body(text, classification->end, text.size());
  return s;
}

namespace {

std::set<Category> best_matches(std::string_view text, const Taxonomy& taxonomy,
                                const ChainFormat& format) {
  std::size_t best_len = 0;
  std::set<Category> best;
  const auto consider = [&](std::string_view name, const Category& category) {
    if (name.empty() || find_icase(text, name) == std::string_view::npos) return;
    if (name.size() > best_len) {
      best_len = name.size();
      best = {category};
    } else if (name.size() == best_len) {
      best.insert(category);
    }
  };
  for (const auto& c : taxonomy.categories()) consider(c, c);
  for (const auto& [alias, category] : format.aliases) {
    if (taxonomy.contains(category)) consider(alias, category);
  }
  return best;
}

}  // namespace

Category normalize_label(std::string_view classification, const Taxonomy& taxonomy,
                         const ChainFormat& format) {
  // The first non-empty line is the verdict; later lines are often justification.
  std::string_view first_line = trim(classification);
  if (const auto nl = first_line.find('\n'); nl != std::string_view::npos) {
    first_line = trim(first_line.substr(0, nl));
  }
  auto best = best_matches(first_line, taxonomy, format);
  if (best.empty()) best = best_matches(classification, taxonomy, format);
  if (best.empty()) {
    throw Error(ErrorCode::UnknownLabel,
                "classification '" + std::string(first_line.substr(0, 80)) +
                    "' names no category");
  }
  if (best.size() > 1) {
    std::string names;
    for (const auto& b : best) names += (names.empty() ? "" : ", ") + b;
    throw Error(ErrorCode::AmbiguousLabel, "classification matches several categories: " + names);
  }
  return *best.begin();
}

ReasoningChain parse_chain(std::string_view text, const Taxonomy& taxonomy,
                           const ChainFormat& format) {
  const auto sections = split_sections(text, format);
  ReasoningChain chain;
  chain.analysis_process = sections.analysis_process;
  chain.harmful_content = sections.harmful_content;
  chain.classification_result = sections.classification_result;
  try {
    chain.parsed_label = normalize_label(sections.classification_result, taxonomy, format);
  } catch (const Error& e) {
    throw Error(e.code(), e.what(), std::string(text));
  }
  chain.raw_text = std::string(text);
  return chain;
}

std::string render_chain(const ReasoningChain& chain, const ChainFormat& format) {
  const auto line = [](const std::string& header, const std::string& body) {
    return body.empty() ? header + ":" : header + ": " + body;
  };
  return line(format.analysis_headers.at(0), chain.analysis_process) + "\n" +
         line(format.harmful_headers.at(0), chain.harmful_content) + "\n" +
         line(format.classification_headers.at(0), chain.parsed_label);
}

// ---------------------------------------------------------------------------
// Generation and reflection
// ---------------------------------------------------------------------------

ReasoningChain generate_chain(const ModerationSample& x, const std::vector<RetrievedCase>& refs,
                              GenerationContext& ctx) {
  const auto prompt = build_generation_prompt(x, refs, ctx.taxonomy, ctx.prompt);
  const auto result = ctx.gateway.chat_complete(ctx.backend, prompt.messages(), ctx.params);
  auto chain = parse_chain(result.text, ctx.taxonomy, ctx.format);
  chain.completion_tokens = result.completion_tokens;
  chain.prompt_tokens = result.prompt_tokens;
  return chain;
}

std::string_view to_string(AugmentStatus status) {
  switch (status) {
    case AugmentStatus::AcceptedFirstPass: return "accepted_first_pass";
    case AugmentStatus::AcceptedAfterReflection: return "accepted_after_reflection";
    case AugmentStatus::Dropped: return "dropped";
  }
  return "dropped";
}

std::optional<AugmentStatus> parse_augment_status(std::string_view text) {
  if (text == "accepted_first_pass") return AugmentStatus::AcceptedFirstPass;
  if (text == "accepted_after_reflection") return AugmentStatus::AcceptedAfterReflection;
  if (text == "dropped") return AugmentStatus::Dropped;
  return std::nullopt;
}

namespace {

// Chat call whose parse failure still yields the raw text for the next round.
ReasoningChain attempt_chain(const PromptBundle& prompt, GenerationContext& ctx) {
  const auto result = ctx.gateway.chat_complete(ctx.backend, prompt.messages(), ctx.params);
  ReasoningChain chain;
  try {
    chain = parse_chain(result.text, ctx.taxonomy, ctx.format);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::MalformedChain && e.code() != ErrorCode::UnknownLabel &&
        e.code() != ErrorCode::AmbiguousLabel) {
      throw;
    }
    chain.raw_text = result.text;
  }
  chain.completion_tokens = result.completion_tokens;
  chain.prompt_tokens = result.prompt_tokens;
  return chain;
}

}  // namespace

AugmentedSample refine_chain(const ModerationSample& x, const std::vector<RetrievedCase>& refs,
                             const ReasoningChain& prior, GenerationContext& ctx,
                             std::size_t max_rounds) {
  if (max_rounds == 0) throw Error(ErrorCode::InvalidArgument, "max_rounds must be at least 1");
  if (prior.parsed_label == x.label) {
    throw Error(ErrorCode::InvalidArgument,
                "refine_chain called for sample '" + x.id + "' whose prior label is correct");
  }
  AugmentedSample out{x, prior, 0, AugmentStatus::Dropped};
  ReasoningChain current = prior;
  for (std::size_t round = 1; round <= max_rounds; ++round) {
    const auto prompt = build_reflection_prompt(x, refs, current, ctx.taxonomy, ctx.prompt);
    current = attempt_chain(prompt, ctx);
    out.refinement_rounds = round;
    out.chain = current;
    if (current.parsed_label == x.label) {
      out.status = AugmentStatus::AcceptedAfterReflection;
      return out;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch stages
// ---------------------------------------------------------------------------

nlohmann::ordered_json chain_to_json(const ReasoningChain& c) {
  nlohmann::ordered_json j;
  j["analysis_process"] = c.analysis_process;
  j["harmful_content"] = c.harmful_content;
  j["classification_result"] = c.classification_result;
  j["parsed_label"] = c.parsed_label;
  j["raw_text"] = c.raw_text;
  j["prompt_tokens"] = c.prompt_tokens;
  j["completion_tokens"] = c.completion_tokens;
  return j;
}

ReasoningChain chain_from_json(const nlohmann::json& j) {
  ReasoningChain c;
  c.analysis_process = j.at("analysis_process").get<std::string>();
  c.harmful_content = j.at("harmful_content").get<std::string>();
  c.classification_result = j.at("classification_result").get<std::string>();
  c.parsed_label = j.at("parsed_label").get<std::string>();
  c.raw_text = j.at("raw_text").get<std::string>();
  c.prompt_tokens = j.value("prompt_tokens", std::uint64_t{0});
  c.completion_tokens = j.value("completion_tokens", std::uint64_t{0});
  return c;
}

ModerationSample sample_from_json(const nlohmann::json& j) {
  ModerationSample s;
  s.id = j.at("id").get<std::string>();
  s.text = j.at("text").get<std::string>();
  s.label = j.at("label").get<std::string>();
  const auto split = parse_split(j.value("split", std::string{}));
  if (!split) throw Error(ErrorCode::MalformedRecord, "unknown split for '" + s.id + "'");
  s.split = *split;
  s.source = j.value("source", std::string{});
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& key = it.key();
    if (key != "id" && key != "text" && key != "label" && key != "split" && key != "source") {
      s.extra[key] = it.value();
    }
  }
  return s;
}

namespace {

nlohmann::ordered_json refs_to_json(const std::vector<RetrievedCase>& refs) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : refs) {
    nlohmann::ordered_json j;
    j["sample_id"] = r.sample_id;
    j["label"] = r.label;
    j["score"] = r.score;
    j["text"] = r.text;
    arr.push_back(std::move(j));
  }
  return arr;
}

std::vector<RetrievedCase> refs_from_json(const nlohmann::json& arr) {
  std::vector<RetrievedCase> refs;
  for (const auto& j : arr) {
    refs.push_back({j.at("sample_id").get<std::string>(), j.at("text").get<std::string>(),
                    j.at("label").get<std::string>(), j.at("score").get<double>()});
  }
  return refs;
}

}  // namespace

nlohmann::ordered_json generated_to_json(const GeneratedRecord& rec) {
  nlohmann::ordered_json j;
  j["sample"] = sample_to_json(rec.sample);
  j["refs"] = refs_to_json(rec.refs);
  j["chain"] = chain_to_json(rec.chain);
  j["error"] = rec.error;
  return j;
}

GeneratedRecord generated_from_json(const nlohmann::json& j) {
  GeneratedRecord rec;
  rec.sample = sample_from_json(j.at("sample"));
  rec.refs = refs_from_json(j.at("refs"));
  rec.chain = chain_from_json(j.at("chain"));
  rec.error = j.value("error", std::string{});
  return rec;
}

nlohmann::ordered_json augmented_to_json(const AugmentedSample& aug) {
  nlohmann::ordered_json j;
  j["sample"] = sample_to_json(aug.sample);
  j["status"] = std::string(to_string(aug.status));
  j["refinement_rounds"] = aug.refinement_rounds;
  j["chain"] = chain_to_json(aug.chain);
  return j;
}

AugmentedSample augmented_from_json(const nlohmann::json& j) {
  AugmentedSample aug;
  aug.sample = sample_from_json(j.at("sample"));
  const auto status = parse_augment_status(j.at("status").get<std::string>());
  if (!status) throw Error(ErrorCode::MalformedRecord, "unknown augmentation status");
  aug.status = *status;
  aug.refinement_rounds = j.at("refinement_rounds").get<std::size_t>();
  aug.chain = chain_from_json(j.at("chain"));
  return aug;
}

nlohmann::ordered_json AugmentManifest::to_json() const {
  nlohmann::ordered_json j;
  j["counters"] = {{"accepted_first_pass", accepted_first_pass},
                   {"accepted_after_reflection", accepted_after_reflection},
                   {"dropped", dropped},
                   {"errors", errors}};
  auto arr = nlohmann::ordered_json::array();
  for (const auto& o : outcomes) {
    nlohmann::ordered_json e;
    e["id"] = o.id;
    e["status"] = o.status;
    e["refinement_rounds"] = o.refinement_rounds;
    if (!o.error.empty()) e["error"] = o.error;
    arr.push_back(std::move(e));
  }
  j["samples"] = std::move(arr);
  return j;
}

std::vector<GeneratedRecord> generate_stage(const SampleSet& train, const RetrievalIndex& index,
                                            const EmbeddingMap& embeddings,
                                            GenerationContext& ctx, const AugmentOptions& options,
                                            const std::vector<std::string>& skip_ids) {
  const std::set<std::string_view> skip(skip_ids.begin(), skip_ids.end());
  std::vector<const ModerationSample*> todo;
  for (const auto& s : train) {
    if (!skip.contains(s.id)) todo.push_back(&s);
  }

  std::vector<GeneratedRecord> records(todo.size());
  parallel_for(todo.size(), options.concurrency, [&](std::size_t i) {
    const auto& x = *todo[i];
    auto& rec = records[i];
    rec.sample = x;
    auto it = embeddings.find(x.id);
    if (it == embeddings.end()) {
      throw Error(ErrorCode::MissingEmbedding, "no embedding for sample '" + x.id + "'");
    }
    rec.refs = query_topk(index, normalize(it->second), options.k, x.id);
    try {
      const auto prompt = build_generation_prompt(x, rec.refs, ctx.taxonomy, ctx.prompt);
      rec.chain = attempt_chain(prompt, ctx);
    } catch (const Error& e) {
      if (options.fail_fast) throw;
      rec.error = e.what();
    }
  });
  std::sort(records.begin(), records.end(),
            [](const auto& a, const auto& b) { return a.sample.id < b.sample.id; });
  return records;
}

AugmentResult refine_stage(const std::vector<GeneratedRecord>& records, GenerationContext& ctx,
                           const AugmentOptions& options) {
  struct Slot {
    std::optional<AugmentedSample> aug;
    SampleOutcome outcome;
  };
  std::vector<Slot> slots(records.size());
  parallel_for(records.size(), options.concurrency, [&](std::size_t i) {
    const auto& rec = records[i];
    auto& slot = slots[i];
    slot.outcome.id = rec.sample.id;
    if (!rec.error.empty()) {
      slot.outcome.status = "error";
      slot.outcome.error = rec.error;
      return;
    }
    if (rec.accepted()) {
      slot.aug = AugmentedSample{rec.sample, rec.chain, 0, AugmentStatus::AcceptedFirstPass};
    } else {
      try {
        slot.aug = refine_chain(rec.sample, rec.refs, rec.chain, ctx, options.max_rounds);
      } catch (const Error& e) {
        if (options.fail_fast) throw;
        slot.outcome.status = "error";
        slot.outcome.error = e.what();
        return;
      }
    }
    slot.outcome.status = std::string(to_string(slot.aug->status));
    slot.outcome.refinement_rounds = slot.aug->refinement_rounds;
  });

  AugmentResult result;
  for (auto& slot : slots) {
    auto& m = result.manifest;
    if (slot.aug) {
      switch (slot.aug->status) {
        case AugmentStatus::AcceptedFirstPass: ++m.accepted_first_pass; break;
        case AugmentStatus::AcceptedAfterReflection: ++m.accepted_after_reflection; break;
        case AugmentStatus::Dropped: ++m.dropped; break;
      }
      result.samples.push_back(std::move(*slot.aug));
    } else {
      ++m.errors;
    }
    m.outcomes.push_back(std::move(slot.outcome));
  }
  std::sort(result.samples.begin(), result.samples.end(),
            [](const auto& a, const auto& b) { return a.sample.id < b.sample.id; });
  std::sort(result.manifest.outcomes.begin(), result.manifest.outcomes.end(),
            [](const auto& a, const auto& b) { return a.id < b.id; });
  return result;
}

AugmentResult augment_dataset(const SampleSet& train, const RetrievalIndex& index,
                              const EmbeddingMap& embeddings, GenerationContext& ctx,
                              const AugmentOptions& options) {
  return refine_stage(generate_stage(train, index, embeddings, ctx, options), ctx, options);
}

}  // namespace amod
