#include "amod/config.hpp"

#include <cstdlib>
#include <set>
#include <sstream>

#include "amod/error.hpp"
#include "amod/eval.hpp"
#include "amod/util.hpp"
#include "toml.hpp"

namespace amod {

namespace {

[[noreturn]] void invalid(std::string_view field, std::string_view reason) {
  throw Error(ErrorCode::ConfigInvalid, std::string(field) + ": " + std::string(reason));
}

std::string join_field(std::string_view prefix, std::string_view key) {
  return prefix.empty() ? std::string(key) : std::string(prefix) + "." + std::string(key);
}

// Typed access to one table with field names for error messages and a
// check that no unknown keys are present.
class Section {
 public:
  Section(const toml::table* table, std::string prefix, const EnvLookup& env)
      : table_(table), prefix_(std::move(prefix)), env_(env) {}

  void allow(std::initializer_list<std::string_view> keys) const {
    if (!table_) return;
    const std::set<std::string_view> allowed(keys);
    for (const auto& [key, node] : *table_) {
      (void)node;
      if (!allowed.count(key.str())) invalid(join_field(prefix_, key.str()), "unknown key");
    }
  }

  const toml::node* get(std::string_view key) const {
    return table_ ? table_->get(key) : nullptr;
  }

  std::string field(std::string_view key) const { return join_field(prefix_, key); }

  std::optional<std::string> string(std::string_view key) const {
    const auto* n = get(key);
    if (!n) return std::nullopt;
    const auto v = n->value<std::string>();
    if (!n->is_string() || !v) invalid(field(key), "expected a string");
    return expand_env(*v, field(key), env_);
  }

  std::optional<std::int64_t> integer(std::string_view key) const {
    const auto* n = get(key);
    if (!n) return std::nullopt;
    if (!n->is_integer()) invalid(field(key), "expected an integer");
    return n->value<std::int64_t>();
  }

  std::size_t count(std::string_view key, std::size_t fallback, std::size_t min = 0) const {
    const auto v = integer(key);
    if (!v) return fallback;
    if (*v < static_cast<std::int64_t>(min)) {
      invalid(field(key), "must be at least " + std::to_string(min));
    }
    return static_cast<std::size_t>(*v);
  }

  std::optional<double> number(std::string_view key) const {
    const auto* n = get(key);
    if (!n) return std::nullopt;
    if (!n->is_number()) invalid(field(key), "expected a number");
    return n->value<double>();
  }

  double number(std::string_view key, double fallback) const {
    return number(key).value_or(fallback);
  }

  bool boolean(std::string_view key, bool fallback) const {
    const auto* n = get(key);
    if (!n) return fallback;
    if (!n->is_boolean()) invalid(field(key), "expected a boolean");
    return *n->value<bool>();
  }

  std::optional<std::vector<std::string>> strings(std::string_view key) const {
    const auto* n = get(key);
    if (!n) return std::nullopt;
    const auto* arr = n->as_array();
    if (!arr) invalid(field(key), "expected an array of strings");
    std::vector<std::string> out;
    for (const auto& e : *arr) {
      const auto v = e.value<std::string>();
      if (!e.is_string() || !v) invalid(field(key), "expected an array of strings");
      out.push_back(expand_env(*v, field(key), env_));
    }
    return out;
  }

  Section sub(std::string_view key) const {
    const auto* n = get(key);
    if (n && !n->is_table()) invalid(field(key), "expected a table");
    return Section(n ? n->as_table() : nullptr, field(key), env_);
  }

  const toml::table* table() const { return table_; }

 private:
  const toml::table* table_;
  std::string prefix_;
  const EnvLookup& env_;
};

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() ? path : (base / path).lexically_normal();
}

void apply_override(toml::table& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq || dot == 0 ||
      dot + 1 == eq) {
    invalid("--backend-override", "expected ROLE.FIELD=VALUE, got '" + assignment + "'");
  }
  const std::string role = assignment.substr(0, dot);
  const std::string key = assignment.substr(dot + 1, eq - dot - 1);
  const std::string raw = assignment.substr(eq + 1);

  toml::node_view<toml::node> backends = root["backends"];
  if (!backends) root.insert("backends", toml::table{});
  auto* btable = root["backends"].as_table();
  if (!btable) invalid("backends", "expected a table");
  if (!btable->contains(role)) btable->insert(role, toml::table{});
  auto* rtable = (*btable)[role].as_table();
  if (!rtable) invalid("backends." + role, "expected a table");

  try {
    auto parsed = toml::parse("v = " + raw);
    rtable->insert_or_assign(key, *parsed.get("v"));
  } catch (const toml::parse_error&) {
    rtable->insert_or_assign(key, raw);
  }
}

BackendSpec parse_backend(const Section& s, const std::string& role,
                          const std::filesystem::path& base) {
  s.allow({"kind", "endpoint", "model", "auth", "script", "dim", "seed", "timeout_seconds",
           "embed_batch_size", "max_requests_per_second"});
  BackendSpec b;
  b.id = role;
  const auto kind_text = s.string("kind");
  if (!kind_text) invalid(s.field("kind"), "required");
  const auto kind = parse_backend_kind(*kind_text);
  if (!kind) {
    invalid(s.field("kind"),
            "unknown backend kind '" + *kind_text +
                "' (expected remote_chat, remote_embed, mock_chat or mock_embed)");
  }
  b.kind = *kind;
  b.endpoint = s.string("endpoint").value_or("");
  b.model = s.string("model").value_or("");
  b.auth = s.string("auth").value_or("");
  if (!b.auth.empty() && !b.auth.starts_with("env:")) {
    invalid(s.field("auth"), "must be of the form env:NAME so secrets stay out of files");
  }
  if (!b.is_mock()) {
    if (b.endpoint.empty()) invalid(s.field("endpoint"), "required for remote backends");
    if (!b.endpoint.starts_with("http://") && !b.endpoint.starts_with("https://")) {
      invalid(s.field("endpoint"), "must be an http:// or https:// URL");
    }
  }
  if (b.kind == BackendKind::MockChat) {
    const auto script = s.string("script");
    if (!script) invalid(s.field("script"), "required for mock_chat backends");
    const auto path = resolve(base, *script);
    if (!std::filesystem::is_regular_file(path)) {
      invalid(s.field("script"), "file not found: " + path.string());
    }
    try {
      b.script = MockChatScript::load(path);
    } catch (const Error& e) {
      invalid(s.field("script"), e.what());
    }
  }
  b.mock_dim = s.count("dim", b.mock_dim, 1);
  if (const auto seed = s.integer("seed")) b.mock_seed = static_cast<std::uint64_t>(*seed);
  const double timeout = s.number("timeout_seconds", 60.0);
  if (!(timeout > 0.0)) invalid(s.field("timeout_seconds"), "must be positive");
  b.timeout = std::chrono::milliseconds(static_cast<std::int64_t>(timeout * 1000.0));
  b.embed_batch_size = s.count("embed_batch_size", b.embed_batch_size, 1);
  b.max_requests_per_second = s.number("max_requests_per_second", 0.0);
  if (b.max_requests_per_second < 0.0) {
    invalid(s.field("max_requests_per_second"), "must be non-negative");
  }
  return b;
}

void absolutize(toml::table& root, const std::filesystem::path& base) {
  const auto fix = [&](toml::table& t, std::string_view key) {
    if (auto* n = t.get(key); n && n->is_string()) {
      const auto& v = n->as_string()->get();
      if (v.find("${") == std::string::npos) t.insert_or_assign(key, resolve(base, v).string());
    }
  };
  fix(root, "dataset");
  fix(root, "output_dir");
  if (auto* backends = root["backends"].as_table()) {
    for (auto& [role, node] : *backends) {
      (void)role;
      if (auto* t = node.as_table()) fix(*t, "script");
    }
  }
}

}  // namespace

EnvLookup process_env() {
  return [](std::string_view name) -> std::optional<std::string> {
    if (const char* v = std::getenv(std::string(name).c_str())) return std::string(v);
    return std::nullopt;
  };
}

std::string expand_env(std::string_view value, std::string_view field, const EnvLookup& env) {
  std::string out;
  std::size_t pos = 0;
  while (pos < value.size()) {
    const auto start = value.find("${", pos);
    if (start == std::string_view::npos) {
      out.append(value.substr(pos));
      break;
    }
    const auto end = value.find('}', start + 2);
    if (end == std::string_view::npos) invalid(field, "unterminated ${ in value");
    out.append(value.substr(pos, start - pos));
    const auto name = value.substr(start + 2, end - start - 2);
    if (name.empty()) invalid(field, "empty variable name in ${}");
    const auto v = env(name);
    if (!v) invalid(field, "environment variable " + std::string(name) + " is not set");
    out += *v;
    pos = end + 1;
  }
  return out;
}

const BackendSpec& PipelineConfig::backend(std::string_view role, bool chat) const {
  const auto it = backends.find(std::string(role));
  const std::string field = "backends." + std::string(role);
  if (it == backends.end()) invalid(field, "not configured");
  if (it->second.is_chat() != chat) {
    invalid(field + ".kind", chat ? "a chat backend is required for this role"
                                  : "an embedding backend is required for this role");
  }
  return it->second;
}

std::vector<std::string> PipelineConfig::marker_lexicon() const {
  auto lex = default_coa_lexicon();
  lex.insert(lex.end(), coa_markers.begin(), coa_markers.end());
  return lex;
}

PipelineConfig parse_config(std::string_view toml_text, const std::filesystem::path& base_dir,
                            const ConfigOverrides& overrides, const EnvLookup& env) {
  toml::table root;
  try {
    root = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << "line " << e.source().begin.line << ": " << e.description();
    invalid("config", msg.str());
  }
  for (const auto& o : overrides.backend) apply_override(root, o);
  if (overrides.seed) root.insert_or_assign("seed", static_cast<std::int64_t>(*overrides.seed));

  PipelineConfig cfg;
  cfg.config_dir = base_dir;
  const Section top(&root, "", env);
  top.allow({"seed", "dataset", "output_dir", "taxonomy", "prompt", "split", "retrieval",
             "sampling", "gateway", "refinement", "pairs", "dpo", "sft", "eval", "backends"});

  if (const auto seed = top.integer("seed")) {
    if (*seed < 0) invalid("seed", "must be non-negative");
    cfg.seed = static_cast<std::uint64_t>(*seed);
  }
  if (const auto ds = top.string("dataset")) {
    cfg.dataset = resolve(base_dir, *ds);
    if (!std::filesystem::is_regular_file(*cfg.dataset)) {
      invalid("dataset", "file not found: " + cfg.dataset->string());
    }
  }
  if (const auto out = top.string("output_dir")) {
    if (out->empty()) invalid("output_dir", "must not be empty");
    cfg.output_dir = resolve(base_dir, *out);
  } else {
    cfg.output_dir = resolve(base_dir, cfg.output_dir.string());
  }

  {
    const auto s = top.sub("taxonomy");
    s.allow({"categories", "harmless", "aliases"});
    const auto cats = s.strings("categories");
    const auto harmless = s.string("harmless");
    if (cats || harmless) {
      try {
        cfg.taxonomy = Taxonomy(cats.value_or(Taxonomy::moderation_default().categories()),
                                harmless.value_or("Harmless"));
      } catch (const Error& e) {
        invalid("taxonomy", e.what());
      }
    }
    const auto aliases = s.sub("aliases");
    if (const auto* t = aliases.table()) {
      for (const auto& [alias, node] : *t) {
        (void)node;
        const auto target = aliases.string(alias.str());
        if (!cfg.taxonomy.contains(*target)) {
          invalid(aliases.field(alias.str()), "'" + *target + "' is not a taxonomy category");
        }
        cfg.format.aliases[std::string(alias.str())] = *target;
      }
    }
  }
  {
    const auto s = top.sub("prompt");
    s.allow({"show_reference_labels"});
    cfg.prompt.show_reference_labels = s.boolean("show_reference_labels", true);
  }
  {
    const auto s = top.sub("split");
    s.allow({"mode", "train_per_category", "test_per_category"});
    const auto mode = s.string("mode").value_or("balanced");
    if (mode == "balanced") {
      cfg.split.mode = SplitMode::Balanced;
    } else if (mode == "preassigned") {
      cfg.split.mode = SplitMode::Preassigned;
    } else {
      invalid(s.field("mode"), "expected 'balanced' or 'preassigned'");
    }
    cfg.split.train_per_category = s.count("train_per_category", cfg.split.train_per_category);
    cfg.split.test_per_category = s.count("test_per_category", cfg.split.test_per_category);
  }
  {
    const auto s = top.sub("retrieval");
    s.allow({"k", "dedup_threshold"});
    cfg.k = s.count("k", cfg.k, 1);
    cfg.dedup_threshold = s.number("dedup_threshold", cfg.dedup_threshold);
    if (!(cfg.dedup_threshold >= 0.0 && cfg.dedup_threshold <= 1.0)) {
      invalid(s.field("dedup_threshold"), "must lie in [0, 1]");
    }
  }
  {
    const auto s = top.sub("sampling");
    s.allow({"temperature", "top_p", "top_k", "max_tokens", "seed"});
    cfg.sampling.temperature = s.number("temperature", cfg.sampling.temperature);
    cfg.sampling.top_p = s.number("top_p", cfg.sampling.top_p);
    if (const auto k = s.integer("top_k")) cfg.sampling.top_k = static_cast<int>(*k);
    if (const auto m = s.integer("max_tokens")) cfg.sampling.max_tokens = static_cast<int>(*m);
    if (const auto seed = s.integer("seed")) cfg.sampling.seed = *seed;
    try {
      cfg.sampling.validate();
    } catch (const Error& e) {
      invalid("sampling", e.what());
    }
  }
  {
    const auto s = top.sub("gateway");
    s.allow({"max_in_flight", "concurrency", "max_attempts", "base_delay_seconds",
             "backoff_factor", "jitter_fraction"});
    cfg.max_in_flight = s.count("max_in_flight", cfg.max_in_flight, 1);
    cfg.concurrency = s.count("concurrency", cfg.concurrency, 1);
    cfg.retry.max_attempts = static_cast<int>(s.count("max_attempts", 5, 1));
    cfg.retry.base_delay_seconds = s.number("base_delay_seconds", cfg.retry.base_delay_seconds);
    cfg.retry.factor = s.number("backoff_factor", cfg.retry.factor);
    cfg.retry.jitter_fraction = s.number("jitter_fraction", cfg.retry.jitter_fraction);
    if (cfg.retry.base_delay_seconds < 0.0) invalid(s.field("base_delay_seconds"), "negative");
    if (cfg.retry.factor < 1.0) invalid(s.field("backoff_factor"), "must be at least 1");
    if (!(cfg.retry.jitter_fraction >= 0.0 && cfg.retry.jitter_fraction <= 1.0)) {
      invalid(s.field("jitter_fraction"), "must lie in [0, 1]");
    }
  }
  {
    const auto s = top.sub("refinement");
    s.allow({"max_rounds"});
    cfg.max_rounds = s.count("max_rounds", cfg.max_rounds);
  }
  {
    const auto s = top.sub("pairs");
    s.allow({"strict", "samples_per_side"});
    cfg.pairs_strict = s.boolean("strict", false);
    cfg.samples_per_side = s.count("samples_per_side", 1, 1);
  }
  {
    const auto s = top.sub("dpo");
    s.allow({"beta", "learning_rate", "epochs", "length_normalized", "toy_vocab", "toy_pairs",
             "toy_max_length", "toy_init_scale"});
    cfg.dpo.beta = s.number("beta", cfg.dpo.beta);
    if (cfg.dpo.beta < 0.0) invalid(s.field("beta"), "must be non-negative");
    cfg.dpo.learning_rate = s.number("learning_rate", cfg.dpo.learning_rate);
    if (!(cfg.dpo.learning_rate > 0.0)) invalid(s.field("learning_rate"), "must be positive");
    cfg.dpo.epochs = s.count("epochs", cfg.dpo.epochs, 1);
    cfg.dpo.length_normalized = s.boolean("length_normalized", false);
    cfg.dpo.toy_vocab = s.count("toy_vocab", cfg.dpo.toy_vocab, 2);
    cfg.dpo.toy_pairs = s.count("toy_pairs", cfg.dpo.toy_pairs, 1);
    cfg.dpo.toy_max_length = s.count("toy_max_length", cfg.dpo.toy_max_length, 1);
    cfg.dpo.toy_init_scale = s.number("toy_init_scale", cfg.dpo.toy_init_scale);
    if (cfg.dpo.toy_init_scale < 0.0) invalid(s.field("toy_init_scale"), "must be non-negative");
  }
  {
    const auto s = top.sub("sft");
    s.allow({"learning_rate", "epochs", "effective_batch_size"});
    cfg.sft.learning_rate = s.number("learning_rate", cfg.sft.learning_rate);
    cfg.sft.epochs = s.count("epochs", cfg.sft.epochs, 1);
    cfg.sft.effective_batch_size = s.count("effective_batch_size", cfg.sft.effective_batch_size, 1);
  }
  {
    const auto s = top.sub("eval");
    s.allow({"coa_markers"});
    cfg.coa_markers = s.strings("coa_markers").value_or(std::vector<std::string>{});
    try {
      if (!cfg.coa_markers.empty()) MarkerMatcher check(cfg.coa_markers);
    } catch (const Error& e) {
      invalid(s.field("coa_markers"), e.what());
    }
  }
  {
    const auto s = top.sub("backends");
    if (const auto* t = s.table()) {
      for (const auto& [role, node] : *t) {
        (void)node;
        const std::string r(role.str());
        if (r != "generator" && r != "sft_model" && r != "embedder") {
          invalid(s.field(r), "unknown role (expected generator, sft_model or embedder)");
        }
        cfg.backends.emplace(r, parse_backend(s.sub(r), r, base_dir));
      }
    }
    for (const auto& [role, spec] : cfg.backends) {
      const bool want_chat = role != "embedder";
      if (spec.is_chat() != want_chat) {
        invalid(s.field(role) + ".kind",
                want_chat ? "role needs a chat backend" : "role needs an embedding backend");
      }
    }
  }

  absolutize(root, base_dir);
  std::ostringstream echo;
  echo << root << '\n';
  cfg.echo_toml = echo.str();
  return cfg;
}

PipelineConfig load_config(const std::filesystem::path& path, const ConfigOverrides& overrides,
                           const EnvLookup& env) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const Error& e) {
    invalid("--config", e.what());
  }
  const auto base = std::filesystem::absolute(path).parent_path();
  return parse_config(text, base, overrides, env);
}

}  // namespace amod
