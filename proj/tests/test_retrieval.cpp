#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>
#include <thread>

#include "amod/retrieval.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace amod;
using amod::test::error_code_of;

namespace {

const Taxonomy kTax({"A", "B"}, "B");

SampleSet samples_for(const std::vector<std::string>& ids) {
  SampleSet set(kTax);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    set.add({ids[i], "text of " + ids[i], i % 2 ? "B" : "A", Split::Train, "", {}});
  }
  return set;
}

struct RandomIndex {
  RetrievalIndex index;
  std::vector<oracle::Vec> stored;
};

RandomIndex random_index(std::size_t n, std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  std::vector<std::string> ids;
  EmbeddingMap emb;
  for (std::size_t i = 0; i < n; ++i) {
    // Ids deliberately not in insertion order.
    ids.push_back("id" + std::to_string((i * 7919) % 100003));
    std::vector<double> v(dim);
    for (auto& x : v) x = normal(rng);
    emb[ids.back()] = v;
  }
  // A few exact duplicates so the tie rule matters.
  for (std::size_t i = 0; i + 1 < n && i < 20; i += 2) emb[ids[i + 1]] = emb[ids[i]];
  RandomIndex r{build_index(samples_for(ids), emb), {}};
  for (const auto& e : r.index.entries()) r.stored.push_back({e.id, e.vector});
  return r;
}

}  // namespace

TEST_CASE("normalize") {
  const double v1[] = {3, 4};
  CHECK(normalize(v1).values == std::vector<double>{0.6, 0.8});
  const double v2[] = {0, 0, 2};
  CHECK(normalize(v2).values == std::vector<double>{0, 0, 1});
  const double zero[] = {0, 0};
  CHECK(error_code_of([&] { normalize(zero); }) == ErrorCode::ZeroVector);
  const double bad[] = {1, std::nan("")};
  CHECK(error_code_of([&] { normalize(bad); }) == ErrorCode::NonFiniteEntry);
  const double inf[] = {1, INFINITY};
  CHECK(error_code_of([&] { normalize(inf); }) == ErrorCode::NonFiniteEntry);

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-100, 100);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> v(1 + t % 50);
    for (auto& x : v) x = u(rng);
    const auto n = normalize(v);
    double sq = 0;
    for (double x : n.values) sq += x * x;
    CHECK(std::abs(std::sqrt(sq) - 1.0) <= 1e-9);
  }
}

TEST_CASE("build_index") {
  const auto set = samples_for({"a", "b", "c"});
  const EmbeddingMap emb{{"a", {1, 0}}, {"b", {0, 2}}, {"c", {3, 4}}};
  const auto idx = build_index(set, emb);
  CHECK(idx.size() == 3);
  CHECK(idx.dim() == 2);
  CHECK(idx.entries()[1].id == "b");
  CHECK(idx.entries()[2].vector == std::vector<float>{0.6f, 0.8f});
  CHECK(serialize_index(build_index(set, emb)) == serialize_index(idx));

  try {
    build_index(set, {{"a", {1, 0}}, {"c", {0, 1}}});
    FAIL("expected MissingEmbedding");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MissingEmbedding);
    CHECK(std::string(e.what()).find("b") != std::string::npos);
  }
  CHECK(error_code_of([&] { build_index(set, {{"a", {1, 0}}, {"b", {0, 1}}, {"c", {1, 1, 1}}}); }) ==
        ErrorCode::DimensionMismatch);
}

TEST_CASE("query_topk examples") {
  const auto set = samples_for({"a", "b", "c"});
  const auto idx = build_index(set, {{"a", {1, 0}}, {"b", {0, 1}}, {"c", {0.6, 0.8}}});
  const double q[] = {1, 0};
  const auto hits = query_topk(idx, normalize(q), 2);
  REQUIRE(hits.size() == 2);
  CHECK(hits[0].sample_id == "a");
  CHECK(hits[0].score == 1.0);
  CHECK(hits[0].text == "text of a");
  CHECK(hits[1].sample_id == "c");
  CHECK(hits[1].score == doctest::Approx(0.6).epsilon(1e-7));

  const double qc[] = {0.6, 0.8};
  const auto self = query_topk(idx, normalize(qc), 1);
  CHECK(self[0].sample_id == "c");
  CHECK(self[0].score == doctest::Approx(1.0).epsilon(1e-7));

  const auto excluded = query_topk(idx, normalize(q), 3, "a");
  CHECK(excluded.size() == 2);
  CHECK(excluded[0].sample_id == "c");

  CHECK(error_code_of([&] { query_topk(idx, normalize(q), 0); }) == ErrorCode::InvalidArgument);
  const double q3[] = {1, 0, 0};
  CHECK(error_code_of([&] { query_topk(idx, normalize(q3), 1); }) ==
        ErrorCode::DimensionMismatch);
  CHECK(error_code_of([&] { query_topk(RetrievalIndex{}, normalize(q), 1); }) ==
        ErrorCode::EmptyIndex);
}

TEST_CASE("k larger than the index truncates") {
  std::vector<std::string> ids;
  EmbeddingMap emb;
  for (int i = 0; i < 10; ++i) {
    ids.push_back("s" + std::to_string(i));
    emb[ids.back()] = {std::cos(i * 0.3), std::sin(i * 0.3)};
  }
  const auto idx = build_index(samples_for(ids), emb);
  const double q[] = {1, 0};
  CHECK(query_topk(idx, normalize(q), 32).size() == 10);
  CHECK(query_topk(idx, normalize(q), 32, "s3").size() == 9);
  CHECK(query_topk(idx, normalize(q), 32, "missing").size() == 10);
}

TEST_CASE("ties resolve by ascending id") {
  const auto set = samples_for({"z", "m", "a"});
  const auto idx = build_index(set, {{"z", {1, 0}}, {"m", {1, 0}}, {"a", {1, 0}}});
  const double q[] = {0.5, 0.5};
  const auto hits = query_topk(idx, normalize(q), 3);
  CHECK(hits[0].sample_id == "a");
  CHECK(hits[1].sample_id == "m");
  CHECK(hits[2].sample_id == "z");
}

TEST_CASE("query_topk equals the brute-force oracle") {
  std::mt19937_64 rng(42);
  std::normal_distribution<double> normal;
  for (std::size_t n : {1u, 7u, 100u, 1000u}) {
    const auto r = random_index(n, 16, rng);
    for (int t = 0; t < 20; ++t) {
      std::vector<double> qv(16);
      for (auto& x : qv) x = normal(rng);
      // Some queries sit exactly on a duplicated stored vector.
      if (t % 5 == 0) {
        const auto& e = r.index.entries()[rng() % n];
        qv.assign(e.vector.begin(), e.vector.end());
      }
      const auto q = normalize(qv);
      const std::string exclude = t % 3 == 0 ? r.stored[rng() % n].id : std::string();
      for (std::size_t k = 1; k <= 32; ++k) {
        const auto got = exclude.empty() ? query_topk(r.index, q, k)
                                         : query_topk(r.index, q, k, exclude);
        const auto want = oracle::topk(r.stored, q.values, k, exclude);
        REQUIRE(got.size() == want.size());
        for (std::size_t i = 0; i < got.size(); ++i) {
          CHECK(got[i].sample_id == want[i].id);
          CHECK(got[i].score == want[i].score);
          CHECK(got[i].score <= 1.0 + 1e-9);
          CHECK(got[i].score >= -1.0 - 1e-9);
          if (i > 0) CHECK(got[i].score <= got[i - 1].score);
          CHECK(got[i].sample_id != exclude);
        }
      }
    }
  }
}

TEST_CASE("cosine symmetry") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> normal;
  for (int t = 0; t < 100; ++t) {
    std::vector<double> a(8), b(8);
    for (auto& x : a) x = normal(rng);
    for (auto& x : b) x = normal(rng);
    const auto ua = normalize(a), ub = normalize(b);
    double ab = 0, ba = 0;
    for (int i = 0; i < 8; ++i) ab += ua.values[i] * ub.values[i];
    for (int i = 7; i >= 0; --i) ba += ub.values[i] * ua.values[i];
    CHECK(std::abs(ab - ba) <= 1e-12);
  }
}

TEST_CASE("concurrent queries agree with serial ones") {
  std::mt19937_64 rng(5);
  const auto r = random_index(500, 8, rng);
  std::vector<Embedding> queries;
  std::normal_distribution<double> normal;
  for (int i = 0; i < 64; ++i) {
    std::vector<double> v(8);
    for (auto& x : v) x = normal(rng);
    queries.push_back(normalize(v));
  }
  std::vector<std::vector<RetrievedCase>> serial, parallel(queries.size());
  for (const auto& q : queries) serial.push_back(query_topk(r.index, q, 8));
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&, t] {
      for (std::size_t i = t; i < queries.size(); i += 4) parallel[i] = query_topk(r.index, queries[i], 8);
    });
  }
  for (auto& th : threads) th.join();
  CHECK(parallel == serial);
}

TEST_CASE("index persistence is bit-exact") {
  std::mt19937_64 rng(77);
  const auto r = random_index(200, 12, rng);
  amod::test::TempDir dir;
  save_index(dir / "index.jsonl", r.index);
  const auto loaded = load_index(dir / "index.jsonl");
  CHECK(loaded == r.index);
  CHECK(serialize_index(loaded) == serialize_index(r.index));
  std::normal_distribution<double> normal;
  std::vector<double> v(12);
  for (auto& x : v) x = normal(rng);
  CHECK(query_topk(loaded, normalize(v), 32) == query_topk(r.index, normalize(v), 32));

  const auto text = serialize_index(r.index);
  CHECK(error_code_of([&] { parse_index(text.substr(0, text.size() / 2)); }).has_value());
  CHECK(error_code_of([&] { parse_index("not json\n"); }).has_value());
  CHECK(error_code_of([&] { load_index(dir / "missing.jsonl"); }) == ErrorCode::IoError);
}
