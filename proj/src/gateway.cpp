#include "amod/gateway.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <thread>

#include "amod/error.hpp"
#include "amod/util.hpp"
#include "json.hpp"

namespace amod {

using nlohmann::json;

void SamplingParams::validate() const {
  if (!(temperature >= 0.0) || !std::isfinite(temperature)) {
    throw Error(ErrorCode::ConfigInvalid, "sampling.temperature must be non-negative");
  }
  if (!(top_p > 0.0 && top_p <= 1.0)) {
    throw Error(ErrorCode::ConfigInvalid, "sampling.top_p must lie in (0, 1]");
  }
  if (top_k && *top_k <= 0) throw Error(ErrorCode::ConfigInvalid, "sampling.top_k must be positive");
  if (max_tokens <= 0) throw Error(ErrorCode::ConfigInvalid, "sampling.max_tokens must be positive");
}

std::string request_hash(const std::vector<ChatMessage>& messages) {
  json arr = json::array();
  for (const auto& m : messages) arr.push_back({{"content", m.content}, {"role", m.role}});
  return sha256_hex(arr.dump());
}

// ---------------------------------------------------------------------------
// Mock chat script
// ---------------------------------------------------------------------------

MockChatEntry mock_entry_from_json(const std::string& json_line) {
  const auto j = json::parse(json_line);
  if (!j.is_object()) throw Error(ErrorCode::MalformedRecord, "mock entry is not an object");
  MockChatEntry e;
  if (j.contains("request_hash")) e.request_hash = j["request_hash"].get<std::string>();
  if (j.contains("sequence_index")) e.sequence_index = j["sequence_index"].get<std::size_t>();
  if (j.contains("match")) {
    if (j["match"].is_string()) {
      e.match.push_back(j["match"].get<std::string>());
    } else {
      e.match = j["match"].get<std::vector<std::string>>();
    }
  }
  e.response_text = j.at("response_text").get<std::string>();
  if (j.contains("prompt_tokens")) e.prompt_tokens = j["prompt_tokens"].get<std::uint64_t>();
  if (j.contains("completion_tokens")) {
    e.completion_tokens = j["completion_tokens"].get<std::uint64_t>();
  }
  e.fail_times = j.value("fail_times", 0);
  return e;
}

std::string mock_entry_to_json(const MockChatEntry& e) {
  nlohmann::ordered_json j;
  if (e.request_hash) j["request_hash"] = *e.request_hash;
  if (e.sequence_index) j["sequence_index"] = *e.sequence_index;
  if (!e.match.empty()) j["match"] = e.match;
  j["response_text"] = e.response_text;
  if (e.prompt_tokens) j["prompt_tokens"] = *e.prompt_tokens;
  if (e.completion_tokens) j["completion_tokens"] = *e.completion_tokens;
  if (e.fail_times) j["fail_times"] = e.fail_times;
  return j.dump();
}

MockChatScript::MockChatScript(std::vector<MockChatEntry> entries) {
  slots_.reserve(entries.size());
  for (auto& e : entries) {
    const int fails = e.fail_times;
    slots_.push_back({std::move(e), fails, false});
  }
}

std::shared_ptr<MockChatScript> MockChatScript::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open mock script " + path.string());
  std::vector<MockChatEntry> entries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      entries.push_back(mock_entry_from_json(line));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::MalformedRecord, path.string() + " line " + std::to_string(line_no) +
                                                  ": " + e.what());
    }
  }
  return std::make_shared<MockChatScript>(std::move(entries));
}

MockChatScript::Reply MockChatScript::next(const std::string& hash,
                                           const std::string& request_text) {
  std::lock_guard lock(mu_);
  Slot* chosen = nullptr;
  for (auto& s : slots_) {
    if (!s.consumed && s.entry.request_hash && *s.entry.request_hash == hash) {
      chosen = &s;
      break;
    }
  }
  if (!chosen) {
    for (auto& s : slots_) {
      if (s.consumed || s.entry.match.empty()) continue;
      const bool all = std::all_of(s.entry.match.begin(), s.entry.match.end(),
                                   [&](const std::string& m) {
                                     return request_text.find(m) != std::string::npos;
                                   });
      if (all) {
        chosen = &s;
        break;
      }
    }
  }
  if (!chosen) {
    for (auto& s : slots_) {
      if (!s.consumed && s.entry.sequence_index && *s.entry.sequence_index == served_) {
        chosen = &s;
        break;
      }
    }
  }
  if (!chosen) {
    throw Error(ErrorCode::MockScriptExhausted,
                "no scripted reply for request " + hash.substr(0, 16) + " (served " +
                    std::to_string(served_) + ")");
  }
  if (chosen->failures_left > 0) {
    --chosen->failures_left;
    return {true, chosen->entry};
  }
  chosen->consumed = true;
  ++served_;
  return {false, chosen->entry};
}

std::size_t MockChatScript::remaining() const {
  std::lock_guard lock(mu_);
  return static_cast<std::size_t>(
      std::count_if(slots_.begin(), slots_.end(), [](const Slot& s) { return !s.consumed; }));
}

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

std::string_view to_string(BackendKind kind) {
  switch (kind) {
    case BackendKind::RemoteChat: return "remote_chat";
    case BackendKind::RemoteEmbed: return "remote_embed";
    case BackendKind::MockChat: return "mock_chat";
    case BackendKind::MockEmbed: return "mock_embed";
  }
  return "mock_chat";
}

std::optional<BackendKind> parse_backend_kind(std::string_view text) {
  if (text == "remote_chat") return BackendKind::RemoteChat;
  if (text == "remote_embed") return BackendKind::RemoteEmbed;
  if (text == "mock_chat") return BackendKind::MockChat;
  if (text == "mock_embed") return BackendKind::MockEmbed;
  return std::nullopt;
}

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Splits UTF-8 into code point byte sequences; invalid lead bytes stand alone.
std::vector<std::string_view> utf8_chars(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = 1;
    if (c >= 0xF0) len = 4;
    else if (c >= 0xE0) len = 3;
    else if (c >= 0xC0) len = 2;
    len = std::min(len, s.size() - i);
    out.push_back(s.substr(i, len));
    i += len;
  }
  return out;
}

bool is_word_char(std::string_view ch) {
  if (ch.size() > 1) return true;
  const char c = ch[0];
  return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '\'';
}

}  // namespace

std::vector<double> mock_embedding(std::string_view text, std::size_t dim, std::uint64_t seed) {
  if (dim == 0) throw Error(ErrorCode::InvalidArgument, "mock embedding dimension must be positive");
  std::vector<double> v(dim, 0.0);
  const auto add = [&](std::string_view feature, double weight) {
    const auto h = splitmix64(fnv1a(feature) ^ splitmix64(seed));
    const double sign = (h >> 63) ? -1.0 : 1.0;
    v[h % dim] += sign * weight;
  };
  add("\x01bias", 0.5);

  const auto lower = to_lower_ascii(text);
  const auto chars = utf8_chars(lower);

  std::string word;
  for (const auto ch : chars) {
    if (is_word_char(ch)) {
      word += ch;
    } else if (!word.empty()) {
      add("w:" + word, 1.0);
      word.clear();
    }
  }
  if (!word.empty()) add("w:" + word, 1.0);

  std::vector<std::string_view> padded;
  padded.reserve(chars.size() + 2);
  padded.push_back(" ");
  for (const auto ch : chars) padded.push_back(ch);
  padded.push_back(" ");
  for (std::size_t i = 0; i + 3 <= padded.size(); ++i) {
    std::string tri = "t:";
    tri += padded[i];
    tri += padded[i + 1];
    tri += padded[i + 2];
    add(tri, 0.5);
  }
  return v;
}

// ---------------------------------------------------------------------------
// Gateway
// ---------------------------------------------------------------------------

class Gateway::Slot {
 public:
  explicit Slot(Gateway& g) : g_(g) {
    std::unique_lock lock(g_.mu_);
    g_.cv_.wait(lock, [&] { return g_.in_flight_ < g_.options_.max_in_flight; });
    ++g_.in_flight_;
    g_.peak_ = std::max(g_.peak_, g_.in_flight_);
  }
  ~Slot() {
    {
      std::lock_guard lock(g_.mu_);
      --g_.in_flight_;
    }
    g_.cv_.notify_one();
  }
  Slot(const Slot&) = delete;
  Slot& operator=(const Slot&) = delete;

 private:
  Gateway& g_;
};

Gateway::Gateway(GatewayOptions options)
    : options_(std::move(options)), jitter_rng_(options_.jitter_seed) {
  if (options_.max_in_flight == 0) {
    throw Error(ErrorCode::ConfigInvalid, "gateway.max_in_flight must be at least 1");
  }
  if (options_.retry.max_attempts < 1) {
    throw Error(ErrorCode::ConfigInvalid, "gateway.retry.max_attempts must be at least 1");
  }
  transport_ = options_.transport ? options_.transport : make_http_transport();
}

UsageTotals Gateway::usage() const {
  std::lock_guard lock(mu_);
  return usage_;
}

std::size_t Gateway::peak_in_flight() const {
  std::lock_guard lock(mu_);
  return peak_;
}

void Gateway::sleep_for(std::chrono::duration<double> d) {
  if (d <= std::chrono::duration<double>::zero()) return;
  if (options_.sleeper) {
    options_.sleeper(d);
  } else {
    std::this_thread::sleep_for(d);
  }
}

std::chrono::duration<double> Gateway::backoff(int attempt) {
  const auto& r = options_.retry;
  double delay = r.base_delay_seconds * std::pow(r.factor, attempt - 1);
  double u = 0.0;
  {
    std::lock_guard lock(mu_);
    u = static_cast<double>(jitter_rng_() >> 11) * 0x1.0p-53;
  }
  delay *= 1.0 + r.jitter_fraction * (2.0 * u - 1.0);
  return std::chrono::duration<double>(delay);
}

void Gateway::throttle(const BackendSpec& backend) {
  if (backend.max_requests_per_second <= 0.0) return;
  const auto interval = std::chrono::duration_cast<std::chrono::steady_clock::duration>(
      std::chrono::duration<double>(1.0 / backend.max_requests_per_second));
  std::chrono::steady_clock::duration wait{};
  {
    std::lock_guard lock(mu_);
    const auto now = std::chrono::steady_clock::now();
    auto& last = last_start_[backend.id];
    const auto earliest = last + interval;
    const auto start = std::max(now, earliest);
    wait = start - now;
    last = start;
  }
  sleep_for(wait);
}

std::vector<std::pair<std::string, std::string>> Gateway::headers_for(
    const BackendSpec& backend) const {
  std::vector<std::pair<std::string, std::string>> headers;
  if (backend.auth.empty()) return headers;
  if (backend.auth.rfind("env:", 0) != 0) {
    throw Error(ErrorCode::ConfigInvalid,
                "backend '" + backend.id + "': auth must be of the form env:VARIABLE");
  }
  const auto var = backend.auth.substr(4);
  const char* token = std::getenv(var.c_str());
  if (!token || !*token) {
    throw Error(ErrorCode::ConfigInvalid,
                "backend '" + backend.id + "': environment variable " + var + " is not set");
  }
  headers.emplace_back("Authorization", std::string("Bearer ") + token);
  return headers;
}

HttpResponse Gateway::post_with_retry(const BackendSpec& backend, const std::string& body,
                                      int& attempts) {
  HttpRequest req{backend.endpoint, headers_for(backend), body, backend.timeout};
  const int max_attempts = options_.retry.max_attempts;
  for (attempts = 1;; ++attempts) {
    throttle(backend);
    {
      std::lock_guard lock(mu_);
      ++usage_.attempts;
    }
    bool retryable = false;
    ErrorCode fail_code = ErrorCode::Transport;
    std::string fail_msg;
    std::string excerpt;
    try {
      auto resp = transport_->post(req);
      if (resp.status >= 200 && resp.status < 300) return resp;
      excerpt = resp.body.substr(0, 512);
      fail_code = ErrorCode::BadStatus;
      fail_msg = "backend '" + backend.id + "' returned HTTP " + std::to_string(resp.status);
      retryable = resp.status == 429 || resp.status >= 500;
    } catch (const TransportFailure& f) {
      fail_code = f.timed_out() ? ErrorCode::Timeout : ErrorCode::Transport;
      fail_msg = "backend '" + backend.id + "': " + f.what();
      retryable = true;
    }
    if (!retryable) throw Error(fail_code, fail_msg, excerpt);
    if (attempts >= max_attempts) {
      throw Error(fail_code,
                  fail_msg + " (gave up after " + std::to_string(attempts) + " attempts)", excerpt);
    }
    sleep_for(backoff(attempts));
  }
}

GenerationResult Gateway::chat_complete(const BackendSpec& backend,
                                        const std::vector<ChatMessage>& messages,
                                        const SamplingParams& params) {
  if (messages.empty()) throw Error(ErrorCode::InvalidArgument, "chat request has no messages");
  if (!backend.is_chat()) {
    throw Error(ErrorCode::InvalidArgument, "backend '" + backend.id + "' is not a chat backend");
  }
  params.validate();

  std::string request_text;
  for (const auto& m : messages) {
    if (!request_text.empty()) request_text += '\n';
    request_text += m.content;
  }

  Slot slot(*this);
  GenerationResult result;
  result.backend_id = backend.id;

  if (backend.kind == BackendKind::MockChat) {
    if (!backend.script) {
      throw Error(ErrorCode::ConfigInvalid, "mock chat backend '" + backend.id + "' has no script");
    }
    const auto hash = request_hash(messages);
    for (int attempt = 1;; ++attempt) {
      {
        std::lock_guard lock(mu_);
        ++usage_.attempts;
      }
      auto reply = backend.script->next(hash, request_text);
      if (reply.transient_failure) {
        if (attempt >= options_.retry.max_attempts) {
          throw Error(ErrorCode::Transport, "mock backend '" + backend.id +
                                                "' failed after " + std::to_string(attempt) +
                                                " attempts");
        }
        continue;  // mock backends do not sleep between attempts
      }
      result.attempt_count = attempt;
      result.text = reply.entry.response_text;
      result.usage_estimated = !reply.entry.prompt_tokens || !reply.entry.completion_tokens;
      result.prompt_tokens = reply.entry.prompt_tokens.value_or(estimate_tokens(request_text));
      result.completion_tokens =
          reply.entry.completion_tokens.value_or(estimate_tokens(result.text));
      break;
    }
  } else {
    json body;
    body["model"] = backend.model;
    json msgs = json::array();
    for (const auto& m : messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
    body["messages"] = std::move(msgs);
    body["temperature"] = params.temperature;
    body["top_p"] = params.top_p;
    if (params.top_k) body["top_k"] = *params.top_k;
    body["max_tokens"] = params.max_tokens;
    if (params.seed) body["seed"] = *params.seed;
    body["stream"] = false;

    int attempts = 0;
    const auto resp = post_with_retry(backend, body.dump(), attempts);
    result.attempt_count = attempts;
    try {
      const auto j = json::parse(resp.body);
      const auto& content = j.at("choices").at(0).at("message").at("content");
      result.text = content.is_null() ? std::string{} : content.get<std::string>();
      const auto usage = j.find("usage");
      if (usage != j.end() && usage->is_object() && usage->contains("prompt_tokens") &&
          usage->contains("completion_tokens")) {
        result.prompt_tokens = usage->at("prompt_tokens").get<std::uint64_t>();
        result.completion_tokens = usage->at("completion_tokens").get<std::uint64_t>();
      } else {
        result.usage_estimated = true;
        result.prompt_tokens = estimate_tokens(request_text);
        result.completion_tokens = estimate_tokens(result.text);
      }
    } catch (const json::exception& e) {
      throw Error(ErrorCode::BadStatus,
                  "backend '" + backend.id + "' returned an unreadable completion: " + e.what(),
                  resp.body.substr(0, 512));
    }
  }

  std::lock_guard lock(mu_);
  ++usage_.chat_calls;
  usage_.prompt_tokens += result.prompt_tokens;
  usage_.completion_tokens += result.completion_tokens;
  if (result.usage_estimated) ++usage_.estimated_calls;
  return result;
}

std::vector<Embedding> Gateway::embed(const BackendSpec& backend,
                                      const std::vector<std::string>& texts) {
  if (texts.empty()) throw Error(ErrorCode::InvalidArgument, "embed request has no texts");
  if (backend.kind != BackendKind::RemoteEmbed && backend.kind != BackendKind::MockEmbed) {
    throw Error(ErrorCode::InvalidArgument,
                "backend '" + backend.id + "' is not an embedding backend");
  }

  std::vector<Embedding> out;
  out.reserve(texts.size());
  if (backend.kind == BackendKind::MockEmbed) {
    Slot slot(*this);
    for (const auto& t : texts) out.push_back({mock_embedding(t, backend.mock_dim, backend.mock_seed)});
    std::lock_guard lock(mu_);
    ++usage_.embed_calls;
    ++usage_.attempts;
    return out;
  }

  const std::size_t batch = std::max<std::size_t>(1, backend.embed_batch_size);
  for (std::size_t start = 0; start < texts.size(); start += batch) {
    const std::size_t end = std::min(texts.size(), start + batch);
    json body;
    body["model"] = backend.model;
    body["input"] = std::vector<std::string>(texts.begin() + static_cast<std::ptrdiff_t>(start),
                                             texts.begin() + static_cast<std::ptrdiff_t>(end));
    HttpResponse resp;
    {
      Slot slot(*this);
      int attempts = 0;
      resp = post_with_retry(backend, body.dump(), attempts);
    }
    std::vector<Embedding> chunk;
    try {
      const auto j = json::parse(resp.body);
      const auto& data = j.at("data");
      std::vector<std::pair<std::size_t, std::vector<double>>> rows;
      for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& item = data[i];
        rows.emplace_back(item.value("index", i), item.at("embedding").get<std::vector<double>>());
      }
      std::stable_sort(rows.begin(), rows.end(),
                       [](const auto& a, const auto& b) { return a.first < b.first; });
      for (auto& r : rows) chunk.push_back({std::move(r.second)});
    } catch (const json::exception& e) {
      throw Error(ErrorCode::BadStatus,
                  "backend '" + backend.id + "' returned unreadable embeddings: " + e.what(),
                  resp.body.substr(0, 512));
    }
    if (chunk.size() != end - start) {
      throw Error(ErrorCode::DimensionMismatch,
                  "backend '" + backend.id + "' returned " + std::to_string(chunk.size()) +
                      " vectors for " + std::to_string(end - start) + " texts");
    }
    for (auto& e : chunk) out.push_back(std::move(e));
    std::lock_guard lock(mu_);
    ++usage_.embed_calls;
  }

  const std::size_t dim = out.front().dim();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i].dim() != dim || dim == 0) {
      throw Error(ErrorCode::DimensionMismatch,
                  "backend '" + backend.id + "' returned ragged vectors (" +
                      std::to_string(out[i].dim()) + " vs " + std::to_string(dim) + ")");
    }
  }
  return out;
}

}  // namespace amod
