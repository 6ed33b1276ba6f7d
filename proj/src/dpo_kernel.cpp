#include "amod/dpo_kernel.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include "amod/error.hpp"
#include "amod/util.hpp"

namespace amod {

ToyPolicy::ToyPolicy(LogitTable logits, LogitTable reference)
    : logits_(std::move(logits)), reference_(std::move(reference)) {
  if (logits_.vocab() != reference_.vocab()) {
    throw Error(ErrorCode::InvalidArgument, "policy and reference vocab sizes differ");
  }
}

ToyPolicy ToyPolicy::uniform(std::size_t vocab) { return ToyPolicy(LogitTable(vocab, 0.0)); }

ToyPolicy ToyPolicy::random(std::size_t vocab, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  const auto unit = [&] { return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53; };
  LogitTable t(vocab);
  auto v = t.values();
  for (std::size_t i = 0; i < v.size(); i += 2) {
    // Box-Muller keeps draws identical across standard libraries.
    const double r = std::sqrt(-2.0 * std::log(unit()));
    const double theta = 2.0 * std::numbers::pi * unit();
    v[i] = scale * r * std::cos(theta);
    if (i + 1 < v.size()) v[i + 1] = scale * r * std::sin(theta);
  }
  return ToyPolicy(std::move(t));
}

double TokenLogprobView::sequence_policy() const {
  double s = 0.0;
  for (double x : per_token_logprob_policy) s += x;
  return s;
}

double TokenLogprobView::sequence_reference() const {
  double s = 0.0;
  for (double x : per_token_logprob_reference) s += x;
  return s;
}

namespace {

double log_sum_exp(std::span<const double> row) {
  const double m = *std::max_element(row.begin(), row.end());
  double s = 0.0;
  for (double x : row) s += std::exp(x - m);
  return m + std::log(s);
}

void check_tokens(std::size_t vocab, TokenId prompt_last, std::span<const TokenId> response) {
  if (response.empty()) throw Error(ErrorCode::InvalidArgument, "response must be non-empty");
  if (prompt_last >= vocab) {
    throw Error(ErrorCode::TokenOutOfRange, "prompt token " + std::to_string(prompt_last) +
                                                " >= vocab " + std::to_string(vocab));
  }
  for (TokenId t : response) {
    if (t >= vocab) {
      throw Error(ErrorCode::TokenOutOfRange,
                  "token " + std::to_string(t) + " >= vocab " + std::to_string(vocab));
    }
  }
}

// grad[prev][j] += scale * d log p(next | prev) / d logit[prev][j] along the sequence.
void accumulate_sequence_grad(const LogitTable& table, TokenId prompt_last,
                              std::span<const TokenId> response, double scale, LogitTable& grad) {
  TokenId prev = prompt_last;
  const std::size_t V = table.vocab();
  for (TokenId next : response) {
    const auto row = table.row(prev);
    const double lse = log_sum_exp(row);
    for (std::size_t j = 0; j < V; ++j) {
      const double p = std::exp(row[j] - lse);
      grad.at(prev, static_cast<TokenId>(j)) -= scale * p;
    }
    grad.at(prev, next) += scale;
    prev = next;
  }
}

void check_finite(std::initializer_list<double> xs) {
  for (double x : xs) {
    if (!std::isfinite(x)) throw Error(ErrorCode::NonFiniteInput, "non-finite log-probability");
  }
}

}  // namespace

std::vector<double> token_logprobs(const LogitTable& table, TokenId prompt_last,
                                   std::span<const TokenId> response) {
  check_tokens(table.vocab(), prompt_last, response);
  std::vector<double> out;
  out.reserve(response.size());
  TokenId prev = prompt_last;
  for (TokenId next : response) {
    const auto row = table.row(prev);
    out.push_back(row[next] - log_sum_exp(row));
    prev = next;
  }
  return out;
}

double sequence_logprob(const LogitTable& table, TokenId prompt_last,
                        std::span<const TokenId> response) {
  double s = 0.0;
  for (double x : token_logprobs(table, prompt_last, response)) s += x;
  return s;
}

double sequence_logprob(const ToyPolicy& policy, TokenId prompt_last,
                        std::span<const TokenId> response) {
  return sequence_logprob(policy.logits(), prompt_last, response);
}

TokenLogprobView logprob_view(const ToyPolicy& policy, TokenId prompt_last,
                              std::span<const TokenId> response) {
  return {std::vector<TokenId>(response.begin(), response.end()),
          token_logprobs(policy.logits(), prompt_last, response),
          token_logprobs(policy.reference(), prompt_last, response)};
}

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

DpoLoss dpo_loss(double beta, double lp_pos_policy, double lp_pos_ref, double lp_neg_policy,
                 double lp_neg_ref) {
  check_finite({beta, lp_pos_policy, lp_pos_ref, lp_neg_policy, lp_neg_ref});
  if (beta < 0.0) throw Error(ErrorCode::InvalidArgument, "beta must be non-negative");
  const double m = beta * ((lp_pos_policy - lp_pos_ref) - (lp_neg_policy - lp_neg_ref));
  return {softplus(-m), m};
}

DpoLoss dpo_loss(double beta, const TokenLogprobView& chosen, const TokenLogprobView& rejected) {
  for (const auto* v : {&chosen, &rejected}) {
    if (v->response_token_ids.empty() ||
        v->per_token_logprob_policy.size() != v->response_token_ids.size() ||
        v->per_token_logprob_reference.size() != v->response_token_ids.size()) {
      throw Error(ErrorCode::LengthMismatch, "token log-prob view lists differ in length");
    }
  }
  return dpo_loss(beta, chosen.sequence_policy(), chosen.sequence_reference(),
                  rejected.sequence_policy(), rejected.sequence_reference());
}

std::pair<double, double> dpo_grad(double beta, double lp_pos_policy, double lp_pos_ref,
                                   double lp_neg_policy, double lp_neg_ref) {
  const auto [loss, m] = dpo_loss(beta, lp_pos_policy, lp_pos_ref, lp_neg_policy, lp_neg_ref);
  (void)loss;
  const double s = sigmoid(-m);
  return {-beta * s, beta * s};
}

SftResult sft_nll(const ToyPolicy& policy, const std::vector<SequenceExample>& batch) {
  if (batch.empty()) throw Error(ErrorCode::InvalidArgument, "SFT batch is empty");
  SftResult r{0.0, LogitTable(policy.vocab())};
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (const auto& ex : batch) {
    r.loss -= scale * sequence_logprob(policy.logits(), ex.prompt_last, ex.response);
    // d(-lp)/d logits = -(d lp / d logits)
    accumulate_sequence_grad(policy.logits(), ex.prompt_last, ex.response, -scale, r.gradient);
  }
  return r;
}

namespace {

// Net (chosen minus rejected) visit weights per bigram cell and per row. The
// margin is linear in these, so transitions shared by both responses cancel
// exactly instead of through floating-point subtraction.
struct NetVisits {
  std::map<std::pair<TokenId, TokenId>, double> cell;
  std::map<TokenId, double> row;

  void add(TokenId prompt_last, std::span<const TokenId> seq, double weight) {
    TokenId prev = prompt_last;
    for (TokenId next : seq) {
      cell[{prev, next}] += weight;
      row[prev] += weight;
      prev = next;
    }
  }
};

}  // namespace

DpoBatchResult dpo_objective(const ToyPolicy& policy, const std::vector<PreferenceExample>& pairs,
                             double beta, bool length_normalized) {
  if (pairs.empty()) throw Error(ErrorCode::InvalidArgument, "no preference pairs");
  if (!std::isfinite(beta)) throw Error(ErrorCode::NonFiniteInput, "beta is not finite");
  if (beta < 0.0) throw Error(ErrorCode::InvalidArgument, "beta must be non-negative");
  const auto& pol = policy.logits();
  const auto& ref = policy.reference();
  DpoBatchResult r;
  r.gradient = LogitTable(policy.vocab());
  const double inv_n = 1.0 / static_cast<double>(pairs.size());
  std::size_t correct = 0;
  std::size_t seen = 0;
  for (const auto& p : pairs) {
    check_tokens(policy.vocab(), p.prompt_last, p.chosen);
    check_tokens(policy.vocab(), p.prompt_last, p.rejected);
    const double pos_norm = length_normalized ? 1.0 / static_cast<double>(p.chosen.size()) : 1.0;
    const double neg_norm =
        length_normalized ? 1.0 / static_cast<double>(p.rejected.size()) : 1.0;
    NetVisits net;
    net.add(p.prompt_last, p.chosen, pos_norm);
    net.add(p.prompt_last, p.rejected, -neg_norm);

    // margin / beta = sum_cells w * (pol - ref) - sum_rows w_row * (lse_pol - lse_ref)
    double ratio = 0.0;
    for (const auto& [key, w] : net.cell) {
      if (w != 0.0) ratio += w * (pol.at(key.first, key.second) - ref.at(key.first, key.second));
    }
    std::map<TokenId, double> lse_pol;
    for (const auto& [row, w] : net.row) {
      lse_pol[row] = log_sum_exp(pol.row(row));
      if (w != 0.0) ratio -= w * (lse_pol[row] - log_sum_exp(ref.row(row)));
    }
    const double m = beta * ratio;
    if (!std::isfinite(m)) throw Error(ErrorCode::NonFiniteInput, "non-finite margin");
    // Running means: a batch of equal terms averages to exactly that term.
    ++seen;
    r.mean_loss += (softplus(-m) - r.mean_loss) / static_cast<double>(seen);
    r.mean_margin += (m - r.mean_margin) / static_cast<double>(seen);
    const double pos_pol = pos_norm * sequence_logprob(pol, p.prompt_last, p.chosen);
    const double neg_pol = neg_norm * sequence_logprob(pol, p.prompt_last, p.rejected);
    if (pos_pol > neg_pol) ++correct;

    // dL/dlogit(r, c) = -sigmoid(-m) * beta * (w(r, c) - w_row(r) * softmax(r)_c)
    const double coef = -inv_n * beta * sigmoid(-m);
    for (const auto& [row, w_row] : net.row) {
      const auto logits = pol.row(row);
      for (std::size_t c = 0; c < policy.vocab(); ++c) {
        const auto it = net.cell.find({row, static_cast<TokenId>(c)});
        const double w = it == net.cell.end() ? 0.0 : it->second;
        const double d = w - w_row * std::exp(logits[c] - lse_pol[row]);
        if (d != 0.0) r.gradient.at(row, static_cast<TokenId>(c)) += coef * d;
      }
    }
  }
  r.preference_accuracy = static_cast<double>(correct) * inv_n;
  return r;
}

std::vector<PreferenceExample> synthetic_pairs(std::size_t n, std::size_t vocab,
                                               std::size_t max_length, std::uint64_t seed) {
  if (vocab < 2) throw Error(ErrorCode::InvalidArgument, "vocab must be at least 2");
  if (max_length == 0) throw Error(ErrorCode::InvalidArgument, "max_length must be positive");
  std::mt19937_64 rng(seed);
  const std::size_t half = vocab / 2;
  const auto draw = [&](std::size_t len, std::size_t lo, std::size_t hi) {
    std::vector<TokenId> seq(len);
    for (auto& t : seq) t = static_cast<TokenId>(lo + uniform_below(rng, hi - lo));
    return seq;
  };
  std::vector<PreferenceExample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    PreferenceExample p;
    p.prompt_last = static_cast<TokenId>(uniform_below(rng, vocab));
    const auto len = static_cast<std::size_t>(1 + uniform_below(rng, max_length));
    p.chosen = draw(len, 0, half);
    p.rejected = draw(len, half, vocab);
    out.push_back(std::move(p));
  }
  return out;
}

std::pair<ToyPolicy, TrainTrace> train_toy_dpo(const std::vector<PreferenceExample>& pairs,
                                               const DpoConfig& config, const ToyPolicy& init) {
  if (pairs.empty()) throw Error(ErrorCode::InvalidArgument, "no preference pairs");
  if (!(config.learning_rate > 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "learning rate must be positive");
  }
  ToyPolicy policy = init;
  TrainTrace trace;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto step = dpo_objective(policy, pairs, config.beta, config.length_normalized);
    trace.mean_loss.push_back(step.mean_loss);
    trace.mean_margin.push_back(step.mean_margin);
    trace.preference_accuracy.push_back(step.preference_accuracy);
    auto theta = policy.logits().values();
    const auto grad = step.gradient.values();
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= config.learning_rate * grad[i];
  }
  return {std::move(policy), std::move(trace)};
}

namespace {

template <typename Loss>
GradcheckReport check_cells(const ToyPolicy& policy, const LogitTable& analytic,
                            const std::vector<TokenId>& rows, double epsilon, Loss loss) {
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) {
    throw Error(ErrorCode::InvalidArgument, "epsilon must lie in [1e-7, 1e-3]");
  }
  GradcheckReport report;
  ToyPolicy probe = policy;
  const std::size_t V = policy.vocab();
  for (TokenId prev : rows) {
    for (TokenId next = 0; next < V; ++next) {
      double& cell = probe.logits().at(prev, next);
      const double saved = cell;
      cell = saved + epsilon;
      const double up = loss(probe);
      cell = saved - epsilon;
      const double down = loss(probe);
      cell = saved;
      GradcheckRow row{prev, next, analytic.at(prev, next), (up - down) / (2.0 * epsilon), 0.0};
      const double denom = std::max({std::abs(row.analytic), std::abs(row.numeric), 1e-8});
      row.rel_error = std::abs(row.analytic - row.numeric) / denom;
      report.max_rel_error = std::max(report.max_rel_error, row.rel_error);
      report.rows.push_back(row);
    }
  }
  return report;
}

std::vector<TokenId> visited_rows(TokenId prompt_last,
                                  std::initializer_list<const std::vector<TokenId>*> seqs) {
  std::vector<TokenId> rows{prompt_last};
  for (const auto* s : seqs) {
    for (std::size_t i = 0; i + 1 < s->size(); ++i) rows.push_back((*s)[i]);
  }
  std::sort(rows.begin(), rows.end());
  rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
  return rows;
}

}  // namespace

GradcheckReport gradcheck(const ToyPolicy& policy, const PreferenceExample& pair, double beta,
                          double epsilon) {
  const auto analytic = dpo_objective(policy, {pair}, beta).gradient;
  return check_cells(policy, analytic, visited_rows(pair.prompt_last, {&pair.chosen, &pair.rejected}),
                     epsilon, [&](const ToyPolicy& p) {
                       return dpo_objective(p, {pair}, beta).mean_loss;
                     });
}

GradcheckReport gradcheck_sft(const ToyPolicy& policy, const std::vector<SequenceExample>& batch,
                              double epsilon) {
  const auto analytic = sft_nll(policy, batch).gradient;
  std::vector<TokenId> rows;
  for (const auto& ex : batch) {
    auto r = visited_rows(ex.prompt_last, {&ex.response});
    rows.insert(rows.end(), r.begin(), r.end());
  }
  std::sort(rows.begin(), rows.end());
  rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
  return check_cells(policy, analytic, rows, epsilon,
                     [&](const ToyPolicy& p) { return sft_nll(p, batch).loss; });
}

std::string format_gradcheck_table(const GradcheckReport& report) {
  std::ostringstream out;
  out << std::left << std::setw(12) << "cell" << std::right << std::setw(18) << "analytic"
      << std::setw(18) << "numeric" << std::setw(14) << "rel_err" << '\n';
  out << std::scientific << std::setprecision(6);
  for (const auto& r : report.rows) {
    const std::string cell = "(" + std::to_string(r.prev) + "," + std::to_string(r.next) + ")";
    out << std::left << std::setw(12) << cell << std::right << std::setw(18) << r.analytic
        << std::setw(18) << r.numeric << std::setw(14) << r.rel_error << '\n';
  }
  out << "max_rel_err " << report.max_rel_error << '\n';
  return out.str();
}

nlohmann::ordered_json preference_example_to_json(const PreferenceExample& p) {
  nlohmann::ordered_json j;
  j["prompt_last"] = p.prompt_last;
  j["chosen"] = p.chosen;
  j["rejected"] = p.rejected;
  return j;
}

PreferenceExample preference_example_from_json(const nlohmann::json& j) {
  return {j.at("prompt_last").get<TokenId>(), j.at("chosen").get<std::vector<TokenId>>(),
          j.at("rejected").get<std::vector<TokenId>>()};
}

nlohmann::ordered_json policy_to_json(const ToyPolicy& policy) {
  nlohmann::ordered_json j;
  j["vocab"] = policy.vocab();
  const auto l = policy.logits().values();
  const auto r = policy.reference().values();
  j["logits"] = std::vector<double>(l.begin(), l.end());
  j["reference"] = std::vector<double>(r.begin(), r.end());
  return j;
}

ToyPolicy policy_from_json(const nlohmann::json& j) {
  const auto vocab = j.at("vocab").get<std::size_t>();
  const auto load = [&](const char* key) {
    const auto v = j.at(key).get<std::vector<double>>();
    if (v.size() != vocab * vocab) {
      throw Error(ErrorCode::MalformedRecord, std::string("policy table '") + key +
                                                  "' has the wrong size");
    }
    LogitTable t(vocab);
    std::copy(v.begin(), v.end(), t.values().begin());
    return t;
  };
  return ToyPolicy(load("logits"), load("reference"));
}

std::string serialize_trace(const TrainTrace& trace) {
  std::string out;
  for (std::size_t e = 0; e < trace.mean_loss.size(); ++e) {
    nlohmann::ordered_json j;
    j["epoch"] = e + 1;
    j["mean_loss"] = trace.mean_loss[e];
    j["mean_margin"] = trace.mean_margin[e];
    j["preference_accuracy"] = trace.preference_accuracy[e];
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace amod
