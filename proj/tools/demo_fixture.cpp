#include "demo_fixture.hpp"

#include <array>
#include <sstream>

#include "amod/coagen.hpp"
#include "amod/corpus.hpp"
#include "amod/gateway.hpp"
#include "amod/retrieval.hpp"
#include "amod/util.hpp"
#include "json.hpp"

namespace amod::demo {

namespace {

struct Seed {
  const char* id;
  const char* label;
  const char* text;
};

constexpr std::array<Seed, 30> kSamples{{
    {"pol-01", "Politics",
     "Posters urge readers to overthrow the elected council by force and seize the ministries "
     "next week."},
    {"pol-02", "Politics",
     "A forum post claims the national leader is a foreign puppet and calls for mass riots at "
     "the capital."},
    {"pol-03", "Politics",
     "Leaflet text: boycott the election, burn the ballot boxes, the state has no right to rule "
     "us."},
    {"pol-04", "Politics",
     "Thread spreading fabricated quotes from the prime minister to stir hatred against the "
     "government."},
    {"pol-05", "Politics",
     "Message organizing an unauthorized armed rally to topple the provincial administration."},
    {"por-01", "Pornography",
     "Click here for uncensored explicit adult videos, no age check, full scenes streamed free."},
    {"por-02", "Pornography",
     "Selling private nude photo packs, message me for the explicit download link."},
    {"por-03", "Pornography",
     "Live cam show tonight with explicit sexual content, join the paid room now."},
    {"por-04", "Pornography",
     "Story excerpt describing graphic sexual acts in explicit detail between strangers."},
    {"por-05", "Pornography",
     "Site index of hardcore adult clips sorted by category with direct downloads."},
    {"vio-01", "Violence", "I will find you after school and beat you until you cannot walk."},
    {"vio-02", "Violence",
     "Step-by-step guide to injuring someone with a kitchen knife without getting caught."},
    {"vio-03", "Violence",
     "Video caption praising the attacker who stabbed three commuters this morning."},
    {"vio-04", "Violence", "Threat posted on the board: the whole office gets shot on Friday."},
    {"vio-05", "Violence",
     "Recruitment post asking members to bring bats and attack the rival group downtown."},
    {"bia-01", "Bias",
     "People from that province are all thieves and should not be hired anywhere."},
    {"bia-02", "Bias",
     "Women are too emotional to be engineers, companies should stop hiring them."},
    {"bia-03", "Bias",
     "That religion breeds criminals, ban their families from our neighborhood."},
    {"bia-04", "Bias",
     "Older workers are useless dead weight and should be pushed out of every team."},
    {"bia-05", "Bias",
     "Comment mocking disabled people as burdens who deserve no public support."},
    {"gam-01", "Gambling",
     "Join our online casino tonight, deposit 100 and get 300 in bonus chips."},
    {"gam-02", "Gambling",
     "Guaranteed football betting tips, 95 percent win rate, send payment to unlock."},
    {"gam-03", "Gambling",
     "New lottery app pays out instantly, invite friends for extra free spins."},
    {"gam-04", "Gambling",
     "Underground card room opening Saturday, high stakes baccarat, cash only."},
    {"gam-05", "Gambling",
     "Crypto dice site with no limits, bet your savings and double it in minutes."},
    {"har-01", "Harmless",
     "The library extends its weekend hours during exam season starting next month."},
    {"har-02", "Harmless", "Recipe: simmer the tomatoes with garlic and basil for twenty minutes."},
    {"har-03", "Harmless", "Our hiking club meets at the north trailhead at seven on Sunday."},
    {"har-04", "Harmless",
     "The city council approved funding to repair sidewalks on Main Street."},
    {"har-05", "Harmless", "Tips for keeping houseplants healthy through the winter months."},
}};

std::string excerpt(const ModerationSample& x, const Taxonomy& tax) {
  if (x.label == tax.harmless_label()) return "None";
  std::istringstream words(x.text);
  std::string w, out;
  for (int i = 0; i < 6 && words >> w; ++i) out += (out.empty() ? "" : " ") + w;
  return "\"" + out + " ...\"";
}

Category wrong_label(const ModerationSample& x, const Taxonomy& tax) {
  const auto i = *tax.index_of(x.label);
  return tax.categories()[(i + 1) % tax.size()];
}

std::string chain(const std::string& analysis, const std::string& harmful, const Category& label) {
  return "Analysis Process: " + analysis + "\nHarmful Content: " + harmful +
         "\nClassification Result: " + label;
}

std::string grounded(const ModerationSample& x, const std::vector<RetrievedCase>& refs,
                     const Taxonomy& tax) {
  std::string analysis = "The content is judged against the retrieved examples.";
  if (!refs.empty()) {
    analysis += " It is a similar case to reference example " + refs.front().sample_id +
                ", and the decisive cue carries over.";
  }
  return chain(analysis, excerpt(x, tax), x.label);
}

std::string ungrounded_wrong(const ModerationSample& x, const Taxonomy& tax) {
  return chain("Read on its own, the text looks like ordinary discussion.", "None",
               wrong_label(x, tax));
}

std::string ungrounded_right(const ModerationSample& x, const Taxonomy& tax) {
  return chain("Read on its own, the wording gives the decisive cue.", excerpt(x, tax), x.label);
}

std::string malformed(const ModerationSample& x) {
  return "I think this one is probably " + x.label + ", but I am not sure.";
}

MockChatEntry keyed(const PromptBundle& prompt, std::string response) {
  MockChatEntry e;
  e.request_hash = request_hash(prompt.messages());
  e.response_text = std::move(response);
  return e;
}

void write_script(const std::filesystem::path& path, const std::vector<MockChatEntry>& entries) {
  std::string s;
  for (const auto& e : entries) {
    s += mock_entry_to_json(e);
    s += '\n';
  }
  write_file_atomic(path, s);
}

}  // namespace

FixtureManifest write_demo_fixture(const std::filesystem::path& dir,
                                   const FixtureOptions& options) {
  std::filesystem::create_directories(dir / "mock");
  const auto tax = Taxonomy::moderation_default();

  SampleSet all(tax);
  for (const auto& s : kSamples) all.add({s.id, s.text, s.label, Split::Unassigned, "demo", {}});
  write_dataset(dir / "dataset.jsonl", all);

  const auto [train, test] =
      split_balanced(all, options.train_per_category, options.test_per_category, options.seed);

  BackendSpec embedder;
  embedder.id = "embedder";
  embedder.kind = BackendKind::MockEmbed;
  embedder.mock_dim = options.embed_dim;
  embedder.mock_seed = options.embed_seed;
  Gateway gw;
  std::vector<std::string> texts;
  for (const auto& s : train) texts.push_back(s.text);
  const auto vecs = gw.embed(embedder, texts);
  EmbeddingMap raw;
  for (std::size_t i = 0; i < train.size(); ++i) raw.emplace(train.samples()[i].id, vecs[i].values);
  const auto index = build_index(train, raw);
  const auto queries = embeddings_from_index(index);

  std::vector<const ModerationSample*> ordered;
  for (const auto& s : train) ordered.push_back(&s);
  std::sort(ordered.begin(), ordered.end(),
            [](const auto* a, const auto* b) { return a->id < b->id; });

  FixtureManifest m;
  std::vector<MockChatEntry> generator;
  std::vector<MockChatEntry> sft_model;
  for (std::size_t i = 0; i < ordered.size(); ++i) {
    const auto& x = *ordered[i];
    m.train.push_back(x.id);
    const auto refs = query_topk(index, normalize(queries.at(x.id)), options.k, x.id);
    const auto with_refs = build_generation_prompt(x, refs, tax);
    const auto plain = build_generation_prompt(x, {}, tax);

    const auto reflect = [&](const std::string& first, const std::string& second) {
      generator.push_back(keyed(with_refs, first));
      ReasoningChain prior;
      prior.raw_text = first;
      const auto reflection = build_reflection_prompt(x, refs, prior, tax);
      generator.push_back(keyed(reflection, second));
    };
    if (i == 9) {
      m.malformed_first.push_back(x.id);
      reflect(malformed(x), grounded(x, refs, tax));
    } else if (i % 6 == 1) {
      m.reflected.push_back(x.id);
      reflect(chain("The wording focuses on everyday events and nothing stands out.", "None",
                    wrong_label(x, tax)),
              grounded(x, refs, tax));
    } else if (i % 6 == 4) {
      m.stubborn.push_back(x.id);
      reflect(ungrounded_wrong(x, tax), ungrounded_wrong(x, tax));
    } else {
      m.first_pass.push_back(x.id);
      generator.push_back(keyed(with_refs, grounded(x, refs, tax)));
    }

    if (i % 6 == 4) {
      sft_model.push_back(keyed(with_refs, ungrounded_wrong(x, tax)));
      continue;
    }
    sft_model.push_back(keyed(with_refs, grounded(x, refs, tax)));
    if (i % 6 == 2) {
      sft_model.push_back(keyed(plain, ungrounded_right(x, tax)));
    } else if (i % 6 == 5) {
      sft_model.push_back(keyed(plain, malformed(x)));
    } else {
      sft_model.push_back(keyed(plain, ungrounded_wrong(x, tax)));
    }
  }

  std::vector<const ModerationSample*> held_out;
  for (const auto& s : test) held_out.push_back(&s);
  std::sort(held_out.begin(), held_out.end(),
            [](const auto* a, const auto* b) { return a->id < b->id; });
  for (std::size_t i = 0; i < held_out.size(); ++i) {
    const auto& x = *held_out[i];
    m.test.push_back(x.id);
    const auto plain = build_generation_prompt(x, {}, tax);
    sft_model.push_back(keyed(plain, i == 0 ? ungrounded_wrong(x, tax)
                                            : chain("This is a similar case to familiar "
                                                    "content of this kind.",
                                                    excerpt(x, tax), x.label)));
  }

  write_script(dir / "mock" / "generator.jsonl", generator);
  write_script(dir / "mock" / "sft_model.jsonl", sft_model);

  std::ostringstream cfg;
  cfg << "seed = " << options.seed << "\n"
      << "dataset = \"dataset.jsonl\"\n"
      << "output_dir = \"out\"\n\n"
      << "[split]\n"
      << "train_per_category = " << options.train_per_category << "\n"
      << "test_per_category = " << options.test_per_category << "\n\n"
      << "[retrieval]\n"
      << "k = " << options.k << "\n\n"
      << "[gateway]\n"
      << "concurrency = " << options.concurrency << "\n\n"
      << "[dpo]\n"
      << "learning_rate = 0.1\n"
      << "epochs = 200\n\n"
      << "[backends.generator]\n"
      << "kind = \"mock_chat\"\n"
      << "script = \"mock/generator.jsonl\"\n\n"
      << "[backends.sft_model]\n"
      << "kind = \"mock_chat\"\n"
      << "script = \"mock/sft_model.jsonl\"\n\n"
      << "[backends.embedder]\n"
      << "kind = \"mock_embed\"\n"
      << "dim = " << options.embed_dim << "\n"
      << "seed = " << options.embed_seed << "\n";
  write_file_atomic(dir / "config.toml", cfg.str());

  nlohmann::ordered_json j;
  j["train"] = m.train;
  j["test"] = m.test;
  j["first_pass"] = m.first_pass;
  j["reflected"] = m.reflected;
  j["malformed_first"] = m.malformed_first;
  j["stubborn"] = m.stubborn;
  write_file_atomic(dir / "fixture.json", j.dump(2) + "\n");
  return m;
}

}  // namespace amod::demo
