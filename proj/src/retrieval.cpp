#include "amod/retrieval.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <set>
#include <sstream>

#include "amod/error.hpp"
#include "amod/util.hpp"
#include "json.hpp"

namespace amod {

namespace {
constexpr int kIndexVersion = 1;
constexpr const char* kIndexFormat = "amod-retrieval-index";
}  // namespace

Embedding normalize(std::span<const double> v) {
  if (v.empty()) throw Error(ErrorCode::ZeroVector, "empty vector");
  double sq = 0.0;
  for (double x : v) {
    if (!std::isfinite(x)) throw Error(ErrorCode::NonFiniteEntry, "vector has a non-finite entry");
    sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (!(norm >= 1e-12)) throw Error(ErrorCode::ZeroVector, "vector norm below 1e-12");
  Embedding e;
  e.values.reserve(v.size());
  for (double x : v) e.values.push_back(x / norm);
  return e;
}

RetrievalIndex::RetrievalIndex(std::size_t dim, std::vector<IndexEntry> entries)
    : dim_(dim), entries_(std::move(entries)) {
  std::set<std::string_view> ids;
  for (const auto& e : entries_) {
    if (e.vector.size() != dim_) {
      throw Error(ErrorCode::DimensionMismatch,
                  "entry '" + e.id + "' has dimension " + std::to_string(e.vector.size()) +
                      ", index dimension is " + std::to_string(dim_));
    }
    if (!ids.insert(e.id).second) {
      throw Error(ErrorCode::DuplicateId, "duplicate index entry '" + e.id + "'");
    }
  }
}

const IndexEntry* RetrievalIndex::find(std::string_view id) const {
  for (const auto& e : entries_) {
    if (e.id == id) return &e;
  }
  return nullptr;
}

RetrievalIndex build_index(const SampleSet& samples, const EmbeddingMap& embeddings) {
  std::size_t dim = 0;
  std::vector<IndexEntry> entries;
  entries.reserve(samples.size());
  for (const auto& s : samples) {
    auto it = embeddings.find(s.id);
    if (it == embeddings.end()) {
      throw Error(ErrorCode::MissingEmbedding, "no embedding for sample '" + s.id + "'");
    }
    if (dim == 0) dim = it->second.size();
    if (it->second.size() != dim) {
      throw Error(ErrorCode::DimensionMismatch,
                  "embedding for '" + s.id + "' has dimension " +
                      std::to_string(it->second.size()) + ", expected " + std::to_string(dim));
    }
    const auto unit = normalize(it->second);
    IndexEntry entry{s.id, s.label, s.text, {}};
    entry.vector.reserve(dim);
    for (double x : unit.values) entry.vector.push_back(static_cast<float>(x));
    entries.push_back(std::move(entry));
  }
  return RetrievalIndex(dim, std::move(entries));
}

double entry_score(const IndexEntry& entry, std::span<const double> query) {
  double dot = 0.0;
  for (std::size_t i = 0; i < query.size(); ++i) dot += static_cast<double>(entry.vector[i]) * query[i];
  return std::clamp(dot, -1.0, 1.0);
}

std::vector<RetrievedCase> query_topk(const RetrievalIndex& index, const Embedding& query,
                                      std::size_t k, std::optional<std::string_view> exclude_id) {
  if (index.empty()) throw Error(ErrorCode::EmptyIndex, "query against an empty index");
  if (k == 0) throw Error(ErrorCode::InvalidArgument, "k must be at least 1");
  if (query.dim() != index.dim()) {
    throw Error(ErrorCode::DimensionMismatch, "query dimension " + std::to_string(query.dim()) +
                                                  " != index dimension " +
                                                  std::to_string(index.dim()));
  }

  struct Scored {
    double score;
    const IndexEntry* entry;
  };
  std::vector<Scored> scored;
  scored.reserve(index.size());
  for (const auto& e : index.entries()) {
    if (exclude_id && e.id == *exclude_id) continue;
    scored.push_back({entry_score(e, query.values), &e});
  }
  const auto better = [](const Scored& a, const Scored& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.entry->id < b.entry->id;
  };
  const std::size_t take = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take),
                    scored.end(), better);

  std::vector<RetrievedCase> out;
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) {
    const auto& e = *scored[i].entry;
    out.push_back({e.id, e.text, e.label, scored[i].score});
  }
  return out;
}

namespace {

std::string encode_vector(const std::vector<float>& v) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(v.size() * 4);
  for (float f : v) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    for (int shift = 0; shift < 32; shift += 8) {
      bytes.push_back(static_cast<std::uint8_t>((bits >> shift) & 0xFF));
    }
  }
  return base64_encode(bytes);
}

std::vector<float> decode_vector(std::string_view b64) {
  const auto bytes = base64_decode(b64);
  if (bytes.size() % 4 != 0) {
    throw Error(ErrorCode::MalformedRecord, "vector payload is not a whole number of floats");
  }
  std::vector<float> v;
  v.reserve(bytes.size() / 4);
  for (std::size_t i = 0; i < bytes.size(); i += 4) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[i + b]) << (8 * b);
    v.push_back(std::bit_cast<float>(bits));
  }
  return v;
}

}  // namespace

std::string serialize_index(const RetrievalIndex& index) {
  nlohmann::ordered_json header;
  header["format"] = kIndexFormat;
  header["version"] = kIndexVersion;
  header["dim"] = index.dim();
  header["count"] = index.size();
  std::string out = header.dump() + "\n";
  for (const auto& e : index.entries()) {
    nlohmann::ordered_json j;
    j["id"] = e.id;
    j["label"] = e.label;
    j["text"] = e.text;
    j["vector"] = encode_vector(e.vector);
    out += j.dump();
    out += '\n';
  }
  return out;
}

RetrievalIndex parse_index(std::string_view content) {
  std::istringstream in{std::string(content)};
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::MalformedRecord, "index file is empty");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, std::string("index header: ") + e.what());
  }
  if (!header.is_object() || header.value("format", "") != kIndexFormat) {
    throw Error(ErrorCode::MalformedRecord, "not a retrieval index file");
  }
  if (header.value("version", 0) != kIndexVersion) {
    throw Error(ErrorCode::MalformedRecord, "unsupported index version");
  }
  const auto dim = header.at("dim").get<std::size_t>();
  const auto count = header.at("count").get<std::size_t>();

  std::vector<IndexEntry> entries;
  entries.reserve(count);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      entries.push_back({j.at("id").get<std::string>(), j.at("label").get<std::string>(),
                         j.value("text", std::string{}),
                         decode_vector(j.at("vector").get<std::string>())});
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::MalformedRecord,
                  "index line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (entries.size() != count) {
    throw Error(ErrorCode::MalformedRecord, "index header declares " + std::to_string(count) +
                                                " entries, file has " +
                                                std::to_string(entries.size()));
  }
  return RetrievalIndex(dim, std::move(entries));
}

void save_index(const std::filesystem::path& path, const RetrievalIndex& index) {
  write_file_atomic(path, serialize_index(index));
}

RetrievalIndex load_index(const std::filesystem::path& path) { return parse_index(read_file(path)); }

EmbeddingMap embeddings_from_index(const RetrievalIndex& index) {
  EmbeddingMap out;
  for (const auto& e : index.entries()) {
    out.emplace(e.id, std::vector<double>(e.vector.begin(), e.vector.end()));
  }
  return out;
}

}  // namespace amod
