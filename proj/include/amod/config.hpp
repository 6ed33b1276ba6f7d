#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "amod/coagen.hpp"
#include "amod/corpus.hpp"
#include "amod/gateway.hpp"

namespace amod {

enum class SplitMode { Balanced, Preassigned };

struct SplitConfig {
  SplitMode mode = SplitMode::Balanced;
  std::size_t train_per_category = 1200;
  std::size_t test_per_category = 250;
};

struct DpoSettings {
  double beta = 0.1;
  double learning_rate = 1.0e-6;
  std::size_t epochs = 3;
  bool length_normalized = false;
  // Synthetic toy problem used by train-toy when no pair file is given.
  std::size_t toy_vocab = 8;
  std::size_t toy_pairs = 500;
  std::size_t toy_max_length = 12;
  // Standard deviation of the initial logits; 0 starts from the uniform policy.
  double toy_init_scale = 0.0;
};

// Recorded in the SFT export manifest; no trainer runs here.
struct SftHints {
  double learning_rate = 1.0e-5;
  std::size_t epochs = 3;
  std::size_t effective_batch_size = 48;
};

struct PipelineConfig {
  std::filesystem::path config_dir;
  std::optional<std::filesystem::path> dataset;
  std::filesystem::path output_dir = "amod-out";
  std::uint64_t seed = 0;

  Taxonomy taxonomy = Taxonomy::moderation_default();
  ChainFormat format;
  PromptOptions prompt;
  SplitConfig split;

  std::size_t k = 32;
  double dedup_threshold = 0.92;

  // Roles: generator, sft_model, embedder.
  std::map<std::string, BackendSpec> backends;
  SamplingParams sampling;
  std::size_t max_in_flight = 4;
  std::size_t concurrency = 4;
  RetryPolicy retry;

  std::size_t max_rounds = 1;
  bool pairs_strict = false;
  std::size_t samples_per_side = 1;

  DpoSettings dpo;
  SftHints sft;
  std::vector<std::string> coa_markers;  // appended to the default lexicon

  // The configuration as read (after overrides, before ${VAR} expansion)
  // with relative paths made absolute. Feeding it back reproduces the run.
  std::string echo_toml;

  // Throws ConfigInvalid when the role is absent or has the wrong kind.
  const BackendSpec& backend(std::string_view role, bool chat) const;
  std::vector<std::string> marker_lexicon() const;
};

using EnvLookup = std::function<std::optional<std::string>(std::string_view)>;

EnvLookup process_env();

struct ConfigOverrides {
  // ROLE.FIELD=VALUE assignments into [backends.ROLE]; VALUE is read as a
  // TOML value and falls back to a plain string.
  std::vector<std::string> backend;
  std::optional<std::uint64_t> seed;
};

// String values may reference ${NAME} environment variables. Relative paths
// resolve against `base_dir`.
PipelineConfig parse_config(std::string_view toml_text, const std::filesystem::path& base_dir,
                            const ConfigOverrides& overrides = {},
                            const EnvLookup& env = process_env());
PipelineConfig load_config(const std::filesystem::path& path,
                           const ConfigOverrides& overrides = {},
                           const EnvLookup& env = process_env());

// Replaces ${NAME}; `field` names the setting in error messages.
std::string expand_env(std::string_view value, std::string_view field, const EnvLookup& env);

}  // namespace amod
