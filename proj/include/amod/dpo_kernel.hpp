#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace amod {

using TokenId = std::uint32_t;

// Square table of next-token logits indexed by (previous token, next token).
class LogitTable {
 public:
  LogitTable() = default;
  explicit LogitTable(std::size_t vocab, double fill = 0.0)
      : vocab_(vocab), data_(vocab * vocab, fill) {}

  std::size_t vocab() const noexcept { return vocab_; }
  double& at(TokenId prev, TokenId next) { return data_[prev * vocab_ + next]; }
  double at(TokenId prev, TokenId next) const { return data_[prev * vocab_ + next]; }
  std::span<const double> row(TokenId prev) const {
    return {data_.data() + prev * vocab_, vocab_};
  }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  bool operator==(const LogitTable&) const = default;

 private:
  std::size_t vocab_ = 0;
  std::vector<double> data_;
};

// Bigram policy with a frozen reference copy taken at construction.
class ToyPolicy {
 public:
  ToyPolicy() = default;
  explicit ToyPolicy(LogitTable init) : logits_(init), reference_(std::move(init)) {}
  ToyPolicy(LogitTable logits, LogitTable reference);

  static ToyPolicy uniform(std::size_t vocab);
  // Logits drawn i.i.d. normal(0, scale).
  static ToyPolicy random(std::size_t vocab, std::uint64_t seed, double scale = 1.0);

  std::size_t vocab() const noexcept { return logits_.vocab(); }
  LogitTable& logits() noexcept { return logits_; }
  const LogitTable& logits() const noexcept { return logits_; }
  const LogitTable& reference() const noexcept { return reference_; }

  bool operator==(const ToyPolicy&) const = default;

 private:
  LogitTable logits_;
  LogitTable reference_;
};

// Per-token log-probabilities of one response under the policy and the reference.
struct TokenLogprobView {
  std::vector<TokenId> response_token_ids;
  std::vector<double> per_token_logprob_policy;
  std::vector<double> per_token_logprob_reference;

  double sequence_policy() const;
  double sequence_reference() const;
};

std::vector<double> token_logprobs(const LogitTable& table, TokenId prompt_last,
                                   std::span<const TokenId> response);
double sequence_logprob(const LogitTable& table, TokenId prompt_last,
                        std::span<const TokenId> response);
double sequence_logprob(const ToyPolicy& policy, TokenId prompt_last,
                        std::span<const TokenId> response);
TokenLogprobView logprob_view(const ToyPolicy& policy, TokenId prompt_last,
                              std::span<const TokenId> response);

struct DpoLoss {
  double loss = 0.0;
  double margin = 0.0;
};

// margin = beta * ((pos_policy - pos_ref) - (neg_policy - neg_ref)); loss = softplus(-margin).
DpoLoss dpo_loss(double beta, double lp_pos_policy, double lp_pos_ref, double lp_neg_policy,
                 double lp_neg_ref);
DpoLoss dpo_loss(double beta, const TokenLogprobView& chosen, const TokenLogprobView& rejected);

// (dL/d lp_pos_policy, dL/d lp_neg_policy); reference gradients are zero.
std::pair<double, double> dpo_grad(double beta, double lp_pos_policy, double lp_pos_ref,
                                   double lp_neg_policy, double lp_neg_ref);

double softplus(double z);
double sigmoid(double z);

struct SequenceExample {
  TokenId prompt_last = 0;
  std::vector<TokenId> response;
};

struct SftResult {
  double loss = 0.0;
  LogitTable gradient;
};

// Mean negative sequence log-likelihood and its gradient over the policy logits.
SftResult sft_nll(const ToyPolicy& policy, const std::vector<SequenceExample>& batch);

struct PreferenceExample {
  TokenId prompt_last = 0;
  std::vector<TokenId> chosen;
  std::vector<TokenId> rejected;

  bool operator==(const PreferenceExample&) const = default;
};

struct DpoConfig {
  double beta = 0.1;
  double learning_rate = 1.0e-6;
  std::size_t epochs = 3;
  std::uint64_t seed = 0;
  // Divide sequence log-probs by length; excluded from acceptance checks.
  bool length_normalized = false;
};

struct DpoBatchResult {
  double mean_loss = 0.0;
  double mean_margin = 0.0;
  double preference_accuracy = 0.0;
  LogitTable gradient;
};

DpoBatchResult dpo_objective(const ToyPolicy& policy, const std::vector<PreferenceExample>& pairs,
                             double beta, bool length_normalized = false);

struct TrainTrace {
  // Measured at the start of each epoch, before that epoch's update.
  std::vector<double> mean_loss;
  std::vector<double> mean_margin;
  std::vector<double> preference_accuracy;
};

// Chosen responses use tokens from the lower half of the vocabulary and
// rejected ones from the upper half, so a bigram policy can separate them.
// Both responses of a pair share one length, uniform in [1, max_length].
std::vector<PreferenceExample> synthetic_pairs(std::size_t n, std::size_t vocab,
                                               std::size_t max_length, std::uint64_t seed);

// Full-batch gradient descent on the mean DPO loss.
std::pair<ToyPolicy, TrainTrace> train_toy_dpo(const std::vector<PreferenceExample>& pairs,
                                               const DpoConfig& config, const ToyPolicy& init);

struct GradcheckRow {
  TokenId prev = 0;
  TokenId next = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::vector<GradcheckRow> rows;
};

// Central differences over every cell in the rows the pair visits. Relative
// error uses max(|analytic|, |numeric|, 1e-8) as denominator.
GradcheckReport gradcheck(const ToyPolicy& policy, const PreferenceExample& pair, double beta,
                          double epsilon);
GradcheckReport gradcheck_sft(const ToyPolicy& policy, const std::vector<SequenceExample>& batch,
                              double epsilon);
std::string format_gradcheck_table(const GradcheckReport& report);

nlohmann::ordered_json preference_example_to_json(const PreferenceExample& p);
PreferenceExample preference_example_from_json(const nlohmann::json& j);
nlohmann::ordered_json policy_to_json(const ToyPolicy& policy);
ToyPolicy policy_from_json(const nlohmann::json& j);
// One JSON line per epoch.
std::string serialize_trace(const TrainTrace& trace);

}  // namespace amod
