#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "amod/corpus.hpp"

namespace amod {

struct Embedding {
  std::vector<double> values;

  std::size_t dim() const noexcept { return values.size(); }
  bool operator==(const Embedding&) const = default;
};

// v / ||v||_2. Throws ZeroVector below 1e-12 and NonFiniteEntry on NaN/inf.
Embedding normalize(std::span<const double> v);

struct IndexEntry {
  std::string id;
  Category label;
  std::string text;
  // Unit vector rounded to float32; this is also the persisted form, so a
  // reloaded index answers queries bit-identically.
  std::vector<float> vector;

  bool operator==(const IndexEntry&) const = default;
};

struct RetrievedCase {
  std::string sample_id;
  std::string text;
  Category label;
  double score = 0.0;

  bool operator==(const RetrievedCase&) const = default;
};

// Exact cosine index. Immutable once built; queries are thread-safe.
class RetrievalIndex {
 public:
  RetrievalIndex() = default;
  RetrievalIndex(std::size_t dim, std::vector<IndexEntry> entries);

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  const std::vector<IndexEntry>& entries() const noexcept { return entries_; }
  const IndexEntry* find(std::string_view id) const;

  bool operator==(const RetrievalIndex&) const = default;

 private:
  std::size_t dim_ = 0;
  std::vector<IndexEntry> entries_;
};

RetrievalIndex build_index(const SampleSet& samples, const EmbeddingMap& embeddings);

// Dot product of a query with a stored entry, clamped to [-1, 1].
double entry_score(const IndexEntry& entry, std::span<const double> query);

// Exact top-k by score descending, ties broken by ascending id.
std::vector<RetrievedCase> query_topk(const RetrievalIndex& index, const Embedding& query,
                                      std::size_t k,
                                      std::optional<std::string_view> exclude_id = std::nullopt);

// The stored (float32) unit vector of every entry, widened to double.
EmbeddingMap embeddings_from_index(const RetrievalIndex& index);

// Header line {"format","version","dim","count"} followed by one JSON line
// per entry with the vector as base64 little-endian float32.
std::string serialize_index(const RetrievalIndex& index);
RetrievalIndex parse_index(std::string_view content);
void save_index(const std::filesystem::path& path, const RetrievalIndex& index);
RetrievalIndex load_index(const std::filesystem::path& path);

}  // namespace amod
