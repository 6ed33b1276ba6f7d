#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "amod/retrieval.hpp"

namespace amod {

struct SamplingParams {
  double temperature = 0.8;
  double top_p = 0.95;
  std::optional<int> top_k;
  int max_tokens = 2048;
  std::optional<std::int64_t> seed;

  // Throws ConfigInvalid on out-of-range values.
  void validate() const;
  bool operator==(const SamplingParams&) const = default;
};

struct ChatMessage {
  std::string role;
  std::string content;
};

struct GenerationResult {
  std::string text;
  std::uint64_t prompt_tokens = 0;
  std::uint64_t completion_tokens = 0;
  std::string backend_id;
  int attempt_count = 0;
  // True when the backend reported no usage and counts were estimated.
  bool usage_estimated = false;
};

// Stable key of a chat request: SHA-256 over the canonical JSON of the
// messages array. Sampling parameters are deliberately not part of the key.
std::string request_hash(const std::vector<ChatMessage>& messages);

// One scripted reply of the mock chat backend. An entry is selected by, in
// order of precedence: exact request_hash; every `match` substring occurring
// in the request; sequence_index equal to the number of replies served so
// far. Entries are consumed once. A selected entry first fails `fail_times`
// times with a transient error.
struct MockChatEntry {
  std::optional<std::string> request_hash;
  std::optional<std::size_t> sequence_index;
  std::vector<std::string> match;
  std::string response_text;
  std::optional<std::uint64_t> prompt_tokens;
  std::optional<std::uint64_t> completion_tokens;
  int fail_times = 0;
};

MockChatEntry mock_entry_from_json(const std::string& json_line);
std::string mock_entry_to_json(const MockChatEntry& entry);

class MockChatScript {
 public:
  struct Reply {
    bool transient_failure = false;
    MockChatEntry entry;
  };

  explicit MockChatScript(std::vector<MockChatEntry> entries);
  static std::shared_ptr<MockChatScript> load(const std::filesystem::path& path);

  // Throws MockScriptExhausted when nothing matches.
  Reply next(const std::string& hash, const std::string& request_text);
  std::size_t remaining() const;

 private:
  struct Slot {
    MockChatEntry entry;
    int failures_left = 0;
    bool consumed = false;
  };
  mutable std::mutex mu_;
  std::vector<Slot> slots_;
  std::size_t served_ = 0;
};

enum class BackendKind { RemoteChat, RemoteEmbed, MockChat, MockEmbed };

std::string_view to_string(BackendKind kind);
std::optional<BackendKind> parse_backend_kind(std::string_view text);

struct BackendSpec {
  std::string id;
  BackendKind kind = BackendKind::MockChat;
  std::string endpoint;  // full URL for remote kinds
  std::string model;
  // "env:NAME" reads a bearer token from the environment; empty means none.
  std::string auth;
  std::shared_ptr<MockChatScript> script;  // mock_chat
  std::size_t mock_dim = 64;               // mock_embed
  std::uint64_t mock_seed = 0;             // mock_embed
  std::chrono::milliseconds timeout{60'000};
  std::size_t embed_batch_size = 64;
  double max_requests_per_second = 0.0;  // 0 disables the rate cap

  bool is_mock() const { return kind == BackendKind::MockChat || kind == BackendKind::MockEmbed; }
  bool is_chat() const { return kind == BackendKind::RemoteChat || kind == BackendKind::MockChat; }
};

// Deterministic hashed-feature embedding of `text` (character trigrams and
// lowercased words) into `dim` signed buckets.
std::vector<double> mock_embedding(std::string_view text, std::size_t dim, std::uint64_t seed);

struct HttpRequest {
  std::string url;
  std::vector<std::pair<std::string, std::string>> headers;
  std::string body;
  std::chrono::milliseconds timeout{60'000};
};

struct HttpResponse {
  int status = 0;
  std::string body;
};

class TransportFailure : public std::runtime_error {
 public:
  TransportFailure(const std::string& what, bool timed_out)
      : std::runtime_error(what), timed_out_(timed_out) {}
  bool timed_out() const noexcept { return timed_out_; }

 private:
  bool timed_out_;
};

class Transport {
 public:
  virtual ~Transport() = default;
  // Throws TransportFailure when no HTTP response was obtained.
  virtual HttpResponse post(const HttpRequest& request) = 0;
};

std::shared_ptr<Transport> make_http_transport();

struct RetryPolicy {
  int max_attempts = 5;
  double base_delay_seconds = 0.5;
  double factor = 2.0;
  double jitter_fraction = 0.25;
};

using Sleeper = std::function<void(std::chrono::duration<double>)>;

struct GatewayOptions {
  std::size_t max_in_flight = 4;
  RetryPolicy retry;
  std::shared_ptr<Transport> transport;  // null selects the HTTP transport
  Sleeper sleeper;                       // null selects this_thread::sleep_for
  std::uint64_t jitter_seed = 0;
};

struct UsageTotals {
  std::uint64_t chat_calls = 0;
  std::uint64_t embed_calls = 0;
  std::uint64_t prompt_tokens = 0;
  std::uint64_t completion_tokens = 0;
  std::uint64_t estimated_calls = 0;
  std::uint64_t attempts = 0;
};

class Gateway {
 public:
  explicit Gateway(GatewayOptions options = {});

  GenerationResult chat_complete(const BackendSpec& backend,
                                 const std::vector<ChatMessage>& messages,
                                 const SamplingParams& params);

  // One raw (unnormalized) vector per text, in input order.
  std::vector<Embedding> embed(const BackendSpec& backend, const std::vector<std::string>& texts);

  UsageTotals usage() const;
  std::size_t max_in_flight() const noexcept { return options_.max_in_flight; }
  std::size_t peak_in_flight() const;

 private:
  class Slot;
  HttpResponse post_with_retry(const BackendSpec& backend, const std::string& body, int& attempts);
  void throttle(const BackendSpec& backend);
  void sleep_for(std::chrono::duration<double> d);
  std::chrono::duration<double> backoff(int attempt);
  std::vector<std::pair<std::string, std::string>> headers_for(const BackendSpec& backend) const;

  GatewayOptions options_;
  std::shared_ptr<Transport> transport_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::size_t in_flight_ = 0;
  std::size_t peak_ = 0;
  UsageTotals usage_;
  std::mt19937_64 jitter_rng_;
  std::map<std::string, std::chrono::steady_clock::time_point> last_start_;
};

}  // namespace amod
