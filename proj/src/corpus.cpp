#include "amod/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <set>
#include <sstream>

#include "amod/error.hpp"
#include "amod/util.hpp"

namespace amod {

Taxonomy::Taxonomy(std::vector<Category> categories, Category harmless_label)
    : categories_(std::move(categories)), harmless_(std::move(harmless_label)) {
  if (categories_.empty()) throw Error(ErrorCode::InvalidArgument, "taxonomy has no categories");
  std::set<std::string_view> seen;
  for (const auto& c : categories_) {
    if (trim(c).empty()) throw Error(ErrorCode::InvalidArgument, "empty category name");
    if (!seen.insert(c).second) {
      throw Error(ErrorCode::InvalidArgument, "duplicate category '" + c + "'");
    }
  }
  if (!seen.contains(harmless_)) {
    throw Error(ErrorCode::InvalidArgument,
                "harmless label '" + harmless_ + "' is not a category");
  }
}

Taxonomy Taxonomy::moderation_default() {
  return Taxonomy({"Politics", "Pornography", "Violence", "Bias", "Gambling", "Harmless"},
                  "Harmless");
}

bool Taxonomy::contains(std::string_view name) const { return index_of(name).has_value(); }

std::optional<std::size_t> Taxonomy::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < categories_.size(); ++i) {
    if (categories_[i] == name) return i;
  }
  return std::nullopt;
}

std::string_view to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Test: return "test";
    case Split::Unassigned: return "unassigned";
  }
  return "unassigned";
}

std::optional<Split> parse_split(std::string_view text) {
  if (text == "train") return Split::Train;
  if (text == "test") return Split::Test;
  if (text == "unassigned" || text.empty()) return Split::Unassigned;
  return std::nullopt;
}

SampleSet::SampleSet(Taxonomy taxonomy, std::vector<ModerationSample> samples)
    : taxonomy_(std::move(taxonomy)) {
  samples_.reserve(samples.size());
  for (auto& s : samples) add(std::move(s));
}

void SampleSet::add(ModerationSample sample) {
  if (trim(sample.text).empty()) {
    throw Error(ErrorCode::EmptyText, "sample '" + sample.id + "' has empty text");
  }
  if (!taxonomy_.contains(sample.label)) {
    throw Error(ErrorCode::UnknownLabel,
                "sample '" + sample.id + "' has label '" + sample.label + "'");
  }
  if (by_id_.contains(sample.id)) {
    throw Error(ErrorCode::DuplicateId, "duplicate sample id '" + sample.id + "'");
  }
  by_id_.emplace(sample.id, samples_.size());
  samples_.push_back(std::move(sample));
}

const ModerationSample* SampleSet::find(std::string_view id) const {
  auto it = by_id_.find(id);
  return it == by_id_.end() ? nullptr : &samples_[it->second];
}

std::string derived_sample_id(std::size_t line_number, std::string_view text) {
  return "L" + std::to_string(line_number) + "-" + sha256_hex(text).substr(0, 12);
}

namespace {

std::string line_prefix(std::size_t line) { return "line " + std::to_string(line) + ": "; }

std::string required_string(const nlohmann::json& rec, const char* key, std::size_t line) {
  auto it = rec.find(key);
  if (it == rec.end()) {
    throw Error(ErrorCode::MalformedRecord, line_prefix(line) + "missing field '" + key + "'");
  }
  if (!it->is_string()) {
    throw Error(ErrorCode::MalformedRecord,
                line_prefix(line) + "field '" + key + "' is not a string");
  }
  return it->get<std::string>();
}

std::string optional_string(const nlohmann::json& rec, const char* key, std::size_t line) {
  auto it = rec.find(key);
  if (it == rec.end() || it->is_null()) return {};
  if (!it->is_string()) {
    throw Error(ErrorCode::MalformedRecord,
                line_prefix(line) + "field '" + key + "' is not a string");
  }
  return it->get<std::string>();
}

}  // namespace

SampleSet parse_dataset(std::istream& in, const Taxonomy& taxonomy) {
  SampleSet set(taxonomy);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorCode::MalformedRecord, line_prefix(line_no) + e.what());
    }
    if (!rec.is_object()) {
      throw Error(ErrorCode::MalformedRecord, line_prefix(line_no) + "record is not an object");
    }
    ModerationSample s;
    s.text = required_string(rec, "text", line_no);
    s.label = required_string(rec, "label", line_no);
    s.id = optional_string(rec, "id", line_no);
    if (s.id.empty()) s.id = derived_sample_id(line_no, s.text);
    const auto split_text = optional_string(rec, "split", line_no);
    const auto split = parse_split(split_text);
    if (!split) {
      throw Error(ErrorCode::MalformedRecord,
                  line_prefix(line_no) + "unknown split '" + split_text + "'");
    }
    s.split = *split;
    s.source = optional_string(rec, "source", line_no);
    for (auto it = rec.begin(); it != rec.end(); ++it) {
      const auto& key = it.key();
      if (key != "id" && key != "text" && key != "label" && key != "split" && key != "source") {
        s.extra[key] = it.value();
      }
    }
    // Re-tag validation failures with the offending line.
    if (trim(s.text).empty()) {
      throw Error(ErrorCode::EmptyText, line_prefix(line_no) + "text is empty");
    }
    if (!taxonomy.contains(s.label)) {
      throw Error(ErrorCode::UnknownLabel, line_prefix(line_no) + "label '" + s.label +
                                               "' is not in the taxonomy");
    }
    if (set.find(s.id)) {
      throw Error(ErrorCode::DuplicateId, line_prefix(line_no) + "duplicate id '" + s.id + "'");
    }
    set.add(std::move(s));
  }
  return set;
}

SampleSet load_dataset(const std::filesystem::path& path, const Taxonomy& taxonomy) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open dataset " + path.string());
  return parse_dataset(in, taxonomy);
}

nlohmann::ordered_json sample_to_json(const ModerationSample& sample) {
  nlohmann::ordered_json j;
  j["id"] = sample.id;
  j["text"] = sample.text;
  j["label"] = sample.label;
  j["split"] = std::string(to_string(sample.split));
  j["source"] = sample.source;
  for (auto it = sample.extra.begin(); it != sample.extra.end(); ++it) j[it.key()] = it.value();
  return j;
}

std::string serialize_dataset(const SampleSet& set) {
  std::string out;
  for (const auto& s : set) {
    out += sample_to_json(s).dump();
    out += '\n';
  }
  return out;
}

void write_dataset(const std::filesystem::path& path, const SampleSet& set) {
  write_file_atomic(path, serialize_dataset(set));
}

std::pair<SampleSet, SampleSet> split_balanced(const SampleSet& set, std::size_t train_per_cat,
                                               std::size_t test_per_cat, std::uint64_t seed) {
  const auto& taxonomy = set.taxonomy();
  std::vector<std::vector<std::size_t>> by_cat(taxonomy.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    by_cat[*taxonomy.index_of(set.samples()[i].label)].push_back(i);
  }

  std::mt19937_64 rng(seed);
  std::vector<Split> assignment(set.size(), Split::Unassigned);
  for (std::size_t c = 0; c < taxonomy.size(); ++c) {
    auto& members = by_cat[c];
    if (members.size() < train_per_cat + test_per_cat) {
      throw Error(ErrorCode::InsufficientSamples,
                  "category '" + taxonomy.categories()[c] + "' has " +
                      std::to_string(members.size()) + " samples, needs " +
                      std::to_string(train_per_cat + test_per_cat) + " (" +
                      std::to_string(train_per_cat) + " train + " +
                      std::to_string(test_per_cat) + " test)");
    }
    stable_shuffle(members, rng);
    for (std::size_t i = 0; i < train_per_cat; ++i) assignment[members[i]] = Split::Train;
    for (std::size_t i = 0; i < test_per_cat; ++i) {
      assignment[members[train_per_cat + i]] = Split::Test;
    }
  }

  SampleSet train(taxonomy);
  SampleSet test(taxonomy);
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (assignment[i] == Split::Unassigned) continue;
    auto s = set.samples()[i];
    s.split = assignment[i];
    (assignment[i] == Split::Train ? train : test).add(std::move(s));
  }
  return {std::move(train), std::move(test)};
}

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

const std::vector<double>& embedding_for(const EmbeddingMap& embeddings, const std::string& id,
                                         std::size_t& dim) {
  auto it = embeddings.find(id);
  if (it == embeddings.end()) {
    throw Error(ErrorCode::MissingEmbedding, "no embedding for sample '" + id + "'");
  }
  if (dim == 0) dim = it->second.size();
  if (it->second.size() != dim || dim == 0) {
    throw Error(ErrorCode::DimensionMismatch,
                "embedding for '" + id + "' has dimension " + std::to_string(it->second.size()) +
                    ", expected " + std::to_string(dim));
  }
  return it->second;
}

}  // namespace

std::vector<std::string> dedup_single_pass(const SampleSet& set, const EmbeddingMap& embeddings,
                                           double threshold) {
  const auto& taxonomy = set.taxonomy();
  std::size_t dim = 0;
  std::vector<const std::vector<double>*> vecs;
  vecs.reserve(set.size());
  for (const auto& s : set) vecs.push_back(&embedding_for(embeddings, s.id, dim));

  std::vector<bool> keep(set.size(), false);
  for (const auto& category : taxonomy.categories()) {
    std::vector<std::vector<std::size_t>> clusters;
    for (std::size_t i = 0; i < set.size(); ++i) {
      if (set.samples()[i].label != category) continue;
      bool joined = false;
      for (auto& cluster : clusters) {
        if (cosine(*vecs[cluster.front()], *vecs[i]) >= threshold) {
          cluster.push_back(i);
          joined = true;
          break;
        }
      }
      if (!joined) clusters.push_back({i});
    }
    for (const auto& cluster : clusters) {
      std::size_t best = cluster.front();
      double best_mean = -2.0;
      for (std::size_t a : cluster) {
        double sum = 0.0;
        for (std::size_t b : cluster) {
          if (a != b) sum += cosine(*vecs[a], *vecs[b]);
        }
        const double mean =
            cluster.size() > 1 ? sum / static_cast<double>(cluster.size() - 1) : 1.0;
        // Members are visited in input order, so strict > keeps the earliest on ties.
        if (mean > best_mean) {
          best_mean = mean;
          best = a;
        }
      }
      keep[best] = true;
    }
  }

  std::vector<std::string> ids;
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (keep[i]) ids.push_back(set.samples()[i].id);
  }
  return ids;
}

SampleSet dedup(const SampleSet& set, const EmbeddingMap& embeddings, double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "dedup threshold must lie in [0, 1]");
  }
  SampleSet current = set;
  while (true) {
    const auto survivors = dedup_single_pass(current, embeddings, threshold);
    if (survivors.size() == current.size()) return current;
    SampleSet next(current.taxonomy());
    for (const auto& id : survivors) next.add(*current.find(id));
    current = std::move(next);
  }
}

}  // namespace amod
