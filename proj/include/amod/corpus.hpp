#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

namespace amod {

using Category = std::string;

// Ordered category list. Order drives tie-breaking and report layout.
class Taxonomy {
 public:
  Taxonomy(std::vector<Category> categories, Category harmless_label);

  // Politics, Pornography, Violence, Bias, Gambling, Harmless.
  static Taxonomy moderation_default();

  const std::vector<Category>& categories() const noexcept { return categories_; }
  const Category& harmless_label() const noexcept { return harmless_; }
  std::size_t size() const noexcept { return categories_.size(); }
  bool contains(std::string_view name) const;
  std::optional<std::size_t> index_of(std::string_view name) const;

  bool operator==(const Taxonomy&) const = default;

 private:
  std::vector<Category> categories_;
  Category harmless_;
};

enum class Split { Train, Test, Unassigned };

std::string_view to_string(Split split);
std::optional<Split> parse_split(std::string_view text);

struct ModerationSample {
  std::string id;
  std::string text;
  Category label;
  Split split = Split::Unassigned;
  std::string source;
  // Keys outside {id, text, label, split, source}, kept for round-trips.
  nlohmann::json extra = nlohmann::json::object();

  bool operator==(const ModerationSample&) const = default;
};

class SampleSet {
 public:
  explicit SampleSet(Taxonomy taxonomy) : taxonomy_(std::move(taxonomy)) {}
  SampleSet(Taxonomy taxonomy, std::vector<ModerationSample> samples);

  // Validates label, text and id uniqueness before appending.
  void add(ModerationSample sample);

  const Taxonomy& taxonomy() const noexcept { return taxonomy_; }
  const std::vector<ModerationSample>& samples() const noexcept { return samples_; }
  std::size_t size() const noexcept { return samples_.size(); }
  bool empty() const noexcept { return samples_.empty(); }
  const ModerationSample* find(std::string_view id) const;

  auto begin() const { return samples_.begin(); }
  auto end() const { return samples_.end(); }

  bool operator==(const SampleSet& other) const {
    return taxonomy_ == other.taxonomy_ && samples_ == other.samples_;
  }

 private:
  Taxonomy taxonomy_;
  std::vector<ModerationSample> samples_;
  std::map<std::string, std::size_t, std::less<>> by_id_;
};

// JSON-lines ingestion. Blank lines are skipped; line numbers are 1-based.
SampleSet parse_dataset(std::istream& in, const Taxonomy& taxonomy);
SampleSet load_dataset(const std::filesystem::path& path, const Taxonomy& taxonomy);

nlohmann::ordered_json sample_to_json(const ModerationSample& sample);
std::string serialize_dataset(const SampleSet& set);
void write_dataset(const std::filesystem::path& path, const SampleSet& set);

// Deterministic id for records that carry none.
std::string derived_sample_id(std::size_t line_number, std::string_view text);

std::pair<SampleSet, SampleSet> split_balanced(const SampleSet& set, std::size_t train_per_cat,
                                               std::size_t test_per_cat, std::uint64_t seed);

using EmbeddingMap = std::map<std::string, std::vector<double>, std::less<>>;

// Per-category greedy seed clustering; each cluster is replaced by its
// medoid. Passes repeat until no two survivors of a category reach the
// threshold, which makes the result a fixed point.
SampleSet dedup(const SampleSet& set, const EmbeddingMap& embeddings, double threshold);

// One clustering pass; returns survivor ids in input order.
std::vector<std::string> dedup_single_pass(const SampleSet& set, const EmbeddingMap& embeddings,
                                           double threshold);

}  // namespace amod
