#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <fstream>
#include <random>
#include <sstream>

#include "amod/cli.hpp"
#include "amod/config.hpp"
#include "amod/exporter.hpp"
#include "demo_fixture.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace amod;
using amod::test::error_code_of;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run amod_run(std::vector<std::string> args) {
  args.insert(args.begin(), "amod");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

EnvLookup fake_env(std::map<std::string, std::string> vars) {
  return [vars](std::string_view name) -> std::optional<std::string> {
    const auto it = vars.find(std::string(name));
    if (it == vars.end()) return std::nullopt;
    return it->second;
  };
}

std::string config_error(const std::string& toml, const fs::path& base) {
  try {
    parse_config(toml, base, {}, fake_env({}));
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ConfigInvalid);
    return e.what();
  }
  FAIL("expected ConfigInvalid");
  return {};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config validation names the offending field") {
  amod::test::TempDir dir;
  amod::test::write_text(dir / "s.jsonl", "");

  CHECK(config_error("sed = 3\n", dir.path()).find("sed") != std::string::npos);
  CHECK(config_error("[retrieval]\nkk = 3\n", dir.path()).find("retrieval.kk") != std::string::npos);
  CHECK(config_error("[retrieval]\nk = 0\n", dir.path()).find("retrieval.k") != std::string::npos);
  CHECK(config_error("[retrieval]\ndedup_threshold = 1.5\n", dir.path()).find("dedup_threshold") !=
        std::string::npos);
  CHECK(config_error("[backends.generator]\nkind = \"remote_chat\"\nendpoint = \"http://x\"\n"
                     "auth = \"sk-secret\"\n",
                     dir.path())
            .find("backends.generator.auth") != std::string::npos);
  CHECK(config_error("[backends.generator]\nkind = \"mock_chat\"\n", dir.path()).find("script") !=
        std::string::npos);
  CHECK(config_error("[backends.generator]\nkind = \"mock_chat\"\nscript = \"none.jsonl\"\n", dir.path())
            .find("none.jsonl") != std::string::npos);
  CHECK(config_error("[backends.generator]\nkind = \"remote_chat\"\n", dir.path()).find("endpoint") !=
        std::string::npos);
  CHECK(config_error("[backends.generator]\nkind = \"telepathy\"\n", dir.path()).find("telepathy") !=
        std::string::npos);
  CHECK(config_error("dataset = \"missing.jsonl\"\n", dir.path()).find("dataset") != std::string::npos);
  CHECK(config_error("seed = \"abc\"\n", dir.path()).find("seed") != std::string::npos);
  CHECK(config_error("not toml [", dir.path()).size() > 0);

  CHECK(config_error("[backends.generator]\nkind = \"mock_embed\"\n", dir.path())
            .find("backends.generator.kind") != std::string::npos);
  CHECK(config_error("[backends.embedder]\nkind = \"mock_chat\"\nscript = \"s.jsonl\"\n",
                     dir.path())
            .find("backends.embedder.kind") != std::string::npos);
  CHECK(config_error("[backends.critic]\nkind = \"mock_embed\"\n", dir.path())
            .find("backends.critic") != std::string::npos);

  const auto cfg = parse_config("", dir.path(), {}, fake_env({}));
  CHECK(error_code_of([&] { cfg.backend("sft_model", true); }) == ErrorCode::ConfigInvalid);
}

TEST_CASE("config defaults, paths, environment and overrides") {
  amod::test::TempDir dir;
  fs::create_directories(dir / "mock");
  amod::test::write_text(dir / "mock" / "g.jsonl", "");
  amod::test::write_text(dir / "data.jsonl", "");

  const auto defaults = parse_config("", dir.path(), {}, fake_env({}));
  CHECK(defaults.k == 32);
  CHECK(defaults.dpo.beta == 0.1);
  CHECK(defaults.taxonomy.categories().size() == 6);
  CHECK(defaults.output_dir == dir / "amod-out");

  const std::string text =
      "dataset = \"data.jsonl\"\noutput_dir = \"${OUT}/run\"\n"
      "[backends.generator]\nkind = \"remote_chat\"\nendpoint = \"${HOST}/v1\"\n"
      "model = \"m\"\nauth = \"env:KEY\"\n"
      "[backends.sft_model]\nkind = \"mock_chat\"\nscript = \"mock/g.jsonl\"\n";
  const auto cfg =
      parse_config(text, dir.path(), {}, fake_env({{"OUT", "/tmp/x"}, {"HOST", "http://h:1"}}));
  CHECK(cfg.dataset == dir / "data.jsonl");
  CHECK(cfg.output_dir == fs::path("/tmp/x/run"));
  CHECK(cfg.backend("generator", true).endpoint == "http://h:1/v1");
  CHECK(cfg.backend("generator", true).auth == "env:KEY");
  CHECK(cfg.backend("sft_model", true).script != nullptr);
  // Echo keeps the placeholders and absolute paths.
  CHECK(cfg.echo_toml.find("${HOST}") != std::string::npos);
  CHECK(cfg.echo_toml.find((dir / "data.jsonl").string()) != std::string::npos);

  const auto unset = [&] { parse_config(text, dir.path(), {}, fake_env({{"OUT", "/tmp"}})); };
  CHECK(error_code_of(unset) == ErrorCode::ConfigInvalid);
  try {
    unset();
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("HOST") != std::string::npos);
  }
  CHECK(expand_env("a${X}b${X}", "f", fake_env({{"X", "-"}})) == "a-b-");
  CHECK(expand_env("plain $X", "f", fake_env({})) == "plain $X");
  CHECK(error_code_of([] { expand_env("${", "f", fake_env({})); }) == ErrorCode::ConfigInvalid);

  ConfigOverrides ov;
  ov.backend = {"generator.endpoint=http://other", "generator.timeout_seconds=5",
                "embedder.kind=mock_embed"};
  ov.seed = 99;
  const auto over = parse_config(text, dir.path(), ov, fake_env({{"OUT", "/o"}, {"HOST", "h"}}));
  CHECK(over.seed == 99);
  CHECK(over.backend("generator", true).endpoint == "http://other");
  CHECK(over.backend("generator", true).timeout == std::chrono::milliseconds(5000));
  CHECK(over.backend("embedder", false).kind == BackendKind::MockEmbed);
  ConfigOverrides bad;
  bad.backend = {"no-equals"};
  CHECK(error_code_of([&] { parse_config(text, dir.path(), bad, fake_env({{"OUT", "/"}, {"HOST", "h"}})); }) ==
        ErrorCode::ConfigInvalid);
}

TEST_CASE("cli exit codes") {
  amod::test::TempDir dir;
  auto r = amod_run({});
  CHECK(r.code == cli::kExitValidation);
  CHECK(r.err.find("error:") == 0);

  r = amod_run({"--help"});
  CHECK(r.code == cli::kExitOk);
  CHECK(r.out.find("export-dpo") != std::string::npos);

  r = amod_run({"ingest"});
  CHECK(r.code == cli::kExitValidation);
  CHECK(r.err.find("--config") != std::string::npos);

  r = amod_run({"--config", (dir / "missing.toml").string(), "ingest"});
  CHECK(r.code == cli::kExitValidation);

  r = amod_run({"bogus"});
  CHECK(r.code == cli::kExitValidation);

  amod::test::write_text(dir / "remote.toml",
                         "[backends.generator]\nkind = \"remote_chat\"\nmodel = \"m\"\n");
  r = amod_run({"--config", (dir / "remote.toml").string(), "ingest"});
  CHECK(r.code == cli::kExitValidation);
  CHECK(r.err.find("backends.generator.endpoint") != std::string::npos);

  // Stage prerequisites missing is a validation problem too.
  amod::test::write_text(dir / "empty.toml", "output_dir = \"o\"\n");
  r = amod_run({"--config", (dir / "empty.toml").string(), "refine"});
  CHECK(r.code == cli::kExitValidation);

  r = amod_run({"--config", (dir / "empty.toml").string(), "gradcheck", "--trials", "0"});
  CHECK(r.code == cli::kExitValidation);
}

TEST_CASE("pipeline stages on the demo fixture") {
  amod::test::TempDir dir;
  const auto fx = demo::write_demo_fixture(dir.path());
  const auto cfg = (dir / "config.toml").string();
  for (const std::string stage :
       {"ingest", "index", "generate", "refine", "export-sft", "pairs", "export-dpo"}) {
    const auto r = amod_run({"--config", cfg, stage});
    INFO(stage, r.err);
    REQUIRE(r.code == 0);
  }
  const auto out = dir / "out";
  CHECK(load_sft(out / "export" / "sft.jsonl").size() ==
        fx.first_pass.size() + fx.reflected.size() + fx.malformed_first.size());
  CHECK(fs::exists(out / "corpus" / "config.echo.toml"));

  const auto augmented = slurp(out / "augment" / "augmented.jsonl");
  for (const auto& id : fx.stubborn) {
    const auto at = augmented.find("\"" + id + "\"");
    REQUIRE(at != std::string::npos);
    const auto line_end = augmented.find('\n', at);
    CHECK(augmented.substr(at, line_end - at).find("dropped") != std::string::npos);
  }
  for (const auto& pair : load_dpo(out / "export" / "dpo.jsonl")) {
    CHECK(pair.prompt.find("Example Cases:") == std::string::npos);
  }

  SUBCASE("resume keeps finished samples") {
    const auto r = amod_run({"--config", cfg, "--resume", "generate"});
    CHECK(r.code == 0);
    CHECK(r.out.find("(" + std::to_string(fx.train.size()) + " resumed)") != std::string::npos);
  }
  SUBCASE("evaluate a predictions file against the oracle") {
    const Taxonomy tax = Taxonomy::moderation_default();
    std::mt19937_64 rng(5);
    std::ostringstream preds;
    std::vector<std::string> p, g;
    std::ifstream test(out / "corpus" / "test.jsonl");
    std::string line;
    while (std::getline(test, line)) {
      const auto j = nlohmann::json::parse(line);
      const std::string guess = tax.categories()[rng() % 6];
      preds << nlohmann::json{{"id", j["id"]}, {"label", guess}, {"completion_tokens", 10}}.dump()
            << "\n";
      p.push_back(guess);
      g.push_back(j["label"].get<std::string>());
    }
    amod::test::write_text(dir / "preds.jsonl", preds.str());
    const auto r = amod_run({"--config", cfg, "evaluate", "--predictions",
                             (dir / "preds.jsonl").string(), "--name", "guess"});
    REQUIRE(r.code == 0);
    const auto report = nlohmann::json::parse(slurp(out / "eval" / "guess.json"));
    const auto want = oracle::f1(p, g, tax.categories());
    CHECK(std::abs(report["macro_f1"].get<double>() - want.macro) <= 1e-9);
    CHECK(std::abs(report["weighted_f1"].get<double>() - want.weighted) <= 1e-9);
    CHECK(report["missing_predictions"] == 0);
  }
  SUBCASE("evaluate with the model backend and report") {
    REQUIRE(amod_run({"--config", cfg, "evaluate", "--name", "sft"}).code == 0);
    REQUIRE(amod_run({"--config", cfg, "evaluate", "--name", "plain", "--predictions",
                      (out / "eval" / "sft.predictions.jsonl").string()})
                .code == 0);
    const auto r = amod_run({"--config", cfg, "report", "--variant",
                             (out / "eval" / "sft.json").string(), "--baseline",
                             (out / "eval" / "plain.json").string()});
    CHECK(r.code == 0);
    CHECK(r.out.find("tokens per point undefined") != std::string::npos);
    CHECK(r.out.find("refine") != std::string::npos);
  }
}

TEST_CASE("train-toy and gradcheck commands") {
  amod::test::TempDir dir;
  amod::test::write_text(dir / "toy.toml", "output_dir = \"o\"\nseed = 3\n[dpo]\n"
                                           "learning_rate = 0.1\nepochs = 200\n");
  auto r = amod_run({"--config", (dir / "toy.toml").string(), "train-toy"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("train-toy: 500 pairs, 200 epochs") == 0);
  const auto m = nlohmann::json::parse(slurp(dir / "o" / "toy" / "manifest.json"));
  CHECK(m["final"]["preference_accuracy"].get<double>() >= 0.95);
  CHECK(m["final"]["mean_margin"].get<double>() > 0.0);

  r = amod_run({"--config", (dir / "toy.toml").string(), "gradcheck", "--trials", "20",
                "--epsilon", "1e-5"});
  CHECK(r.code == 0);
  CHECK(r.out.find("gradcheck: 20 trials") == 0);
  r = amod_run({"--config", (dir / "toy.toml").string(), "gradcheck", "--epsilon", "1.0"});
  CHECK(r.code == cli::kExitValidation);
}
