#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace amod::demo {

struct FixtureOptions {
  std::uint64_t seed = 7;
  std::size_t k = 4;
  std::size_t train_per_category = 4;
  std::size_t test_per_category = 1;
  std::size_t embed_dim = 64;
  std::uint64_t embed_seed = 11;
  std::size_t concurrency = 4;
};

// Training ids grouped by the behavior scripted for the generator backend.
struct FixtureManifest {
  std::vector<std::string> train;
  std::vector<std::string> test;
  std::vector<std::string> first_pass;      // correct on the first pass
  std::vector<std::string> reflected;       // wrong, then corrected on reflection
  std::vector<std::string> malformed_first; // unparseable, then corrected on reflection
  std::vector<std::string> stubborn;        // wrong on every round
};

// Writes dataset.jsonl (30 samples), config.toml, mock/generator.jsonl,
// mock/sft_model.jsonl and fixture.json into `dir`. The mock replies are
// keyed by the hash of the exact prompts the pipeline will send, so the
// scripted outcome of every sample is independent of call order.
FixtureManifest write_demo_fixture(const std::filesystem::path& dir,
                                   const FixtureOptions& options = {});

}  // namespace amod::demo
