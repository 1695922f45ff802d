#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "collab/core.hpp"
#include "collab/reward.hpp"

namespace collab {

struct TokenProb {
  TokenId token;
  double prob;

  friend bool operator==(const TokenProb&, const TokenProb&) = default;
};

/// Next-token distribution, possibly truncated. Unlisted tokens share
/// tail_mass; when `complete` is set the tail is zero and unlisted tokens have
/// probability exactly zero.
struct TokenDistribution {
  std::vector<TokenProb> entries;
  double tail_mass = 0.0;
  bool complete = false;

  std::optional<double> prob(TokenId t) const;
  double listed_mass() const;

  /// Entries sorted by descending probability, ties by ascending token id.
  void sort_canonical();
  /// Keeps the top `k` entries (canonical order) and moves the rest to the tail.
  TokenDistribution truncated(int k) const;

  /// Throws ErrorKind::contract on duplicate ids, out-of-range probabilities,
  /// or normalization off by more than `tol`.
  void validate(const Vocab& vocab, double tol = 1e-9) const;

  static TokenDistribution from_dense(const std::vector<double>& probs);
};

inline constexpr int kAllTokens = 0;

/// A token-level policy. Implementations must tolerate concurrent const calls.
class AgentPolicy {
 public:
  virtual ~AgentPolicy() = default;

  virtual const Vocab& vocab() const = 0;
  virtual std::string name() const = 0;
  virtual std::uint64_t id() const;

  /// True when query(state, kAllTokens) yields a complete distribution.
  virtual bool complete_distributions() const { return true; }
  virtual bool reentrant() const { return true; }

  /// Raw next-token distribution. `want_top` = kAllTokens asks for the full
  /// row; callers go through next_distribution() which sorts and validates.
  virtual TokenDistribution query(const State& state, int want_top) const = 0;

  /// Sampled continuations of `state` (not including any already generated
  /// tokens), each ending at EOS or after max_len tokens. The default samples
  /// autoregressively from query().
  virtual std::vector<Trajectory> continuations(const State& state, int n, int max_len, std::uint64_t seed) const;
};

using PolicyPtr = std::shared_ptr<const AgentPolicy>;

TokenDistribution next_distribution(const AgentPolicy& agent, const State& state, int want_top = kAllTokens);
std::vector<TokenId> top_k_candidates(const AgentPolicy& agent, const State& state, int k);
std::vector<TokenId> top_k_candidates(const TokenDistribution& dist, int k);

/// n continuations of `state` sampled at temperature 1, validated against
/// max_len and EOS placement.
std::vector<Trajectory> sample_continuations(const AgentPolicy& agent, const State& state, int n, int max_len,
                                             std::uint64_t seed);

/// n continuations of [state, z]. Reproducible from (seed, n, max_len, agent id).
std::vector<Trajectory> sample_rollouts(const AgentPolicy& agent, const State& state, TokenId z, int n, int max_len,
                                        std::uint64_t seed);

/// KL(p || q) in nats. Truncated reports are coarsened: tokens whose mass is
/// known on both sides stay separate, everything else is lumped into one
/// residual bucket per side.
double token_kl(const TokenDistribution& p, const TokenDistribution& q);

struct WeightedContinuation {
  Tokens tokens;  // continuation after the start state
  double prob;
};

/// Every continuation of `start` up to the horizon, with its probability
/// under `agent`. Guarded by |V|^remaining <= 1e6.
std::vector<WeightedContinuation> enumerate_continuations(const AgentPolicy& agent, const State& start, int horizon);

/// All complete continuations of `generated` (EOS-terminated or horizon-long),
/// independent of any policy.
std::vector<Tokens> enumerate_responses(const Vocab& vocab, const Tokens& generated, int horizon);

class UniformPolicy final : public AgentPolicy {
 public:
  explicit UniformPolicy(Vocab vocab) : vocab_(std::move(vocab)) {}

  const Vocab& vocab() const override { return vocab_; }
  std::string name() const override { return "uniform"; }
  TokenDistribution query(const State& state, int want_top) const override;

 private:
  Vocab vocab_;
};

/// Explicit conditional table keyed by the full context (prompt followed by
/// generated tokens). An optional default row answers contexts not in the table.
class TabularPolicy final : public AgentPolicy {
 public:
  using Table = std::map<Tokens, std::vector<double>>;

  TabularPolicy(Vocab vocab, Table rows, std::optional<std::vector<double>> default_row = std::nullopt,
                std::string name = "tabular");

  const Vocab& vocab() const override { return vocab_; }
  std::string name() const override { return name_; }
  std::uint64_t id() const override { return id_; }
  TokenDistribution query(const State& state, int want_top) const override;

  const std::vector<double>& row(const Tokens& context) const;
  const Table& rows() const { return rows_; }

 private:
  Vocab vocab_;
  Table rows_;
  std::optional<std::vector<double>> default_row_;
  std::string name_;
  std::uint64_t id_;
};

/// Order-n model over the context with add-lambda smoothing. Contexts shorter
/// than n-1 tokens use the shorter history as their key.
class NGramPolicy final : public AgentPolicy {
 public:
  NGramPolicy(Vocab vocab, int order, double lambda = 1.0, std::string name = "ngram");

  void observe(const Tokens& sequence);
  void add_count(const Tokens& history, TokenId next, double count = 1.0);

  const Vocab& vocab() const override { return vocab_; }
  std::string name() const override { return name_; }
  std::uint64_t id() const override;
  TokenDistribution query(const State& state, int want_top) const override;

  int order() const { return order_; }
  double lambda() const { return lambda_; }

 private:
  Tokens history_of(const Tokens& context) const;

  Vocab vocab_;
  int order_;
  double lambda_;
  std::string name_;
  std::map<Tokens, std::vector<double>> counts_;
};

/// Token-level conditionals of rho(tau|x) ∝ rho_ref(tau|x) * exp(r(x,tau)/beta)
/// for one fixed prompt, obtained by exact marginalisation over the enumerable
/// response space.
class GibbsTiltedPolicy final : public AgentPolicy {
 public:
  GibbsTiltedPolicy(PolicyPtr base, RewardPtr reward, double beta, Tokens prompt, int horizon,
                    std::string name = "gibbs");

  const Vocab& vocab() const override { return base_->vocab(); }
  std::string name() const override { return name_; }
  std::uint64_t id() const override { return id_; }
  TokenDistribution query(const State& state, int want_top) const override;

  /// log sum over completions c of `generated` of rho_ref(c|generated) exp(r/beta).
  double log_partition(const Tokens& generated) const;
  double beta() const { return beta_; }
  const Tokens& prompt() const { return prompt_; }
  int horizon() const { return horizon_; }
  const AgentPolicy& base() const { return *base_; }
  const RewardModel& reward() const { return *reward_; }

 private:
  double build(const Tokens& generated);

  PolicyPtr base_;
  RewardPtr reward_;
  double beta_;
  Tokens prompt_;
  int horizon_;
  std::string name_;
  std::uint64_t id_;
  std::map<Tokens, double> log_w_;
  std::map<Tokens, std::vector<double>> rows_;
};

/// Agents sharing one vocabulary plus the reference policy for the KL term.
class AgentPool {
 public:
  AgentPool(std::vector<PolicyPtr> agents, RefSelector ref);
  AgentPool(std::vector<PolicyPtr> agents, PolicyPtr ref);

  std::size_t size() const { return agents_.size(); }
  const AgentPolicy& agent(std::size_t i) const { return *agents_.at(i); }
  const PolicyPtr& agent_ptr(std::size_t i) const { return agents_.at(i); }
  const AgentPolicy& ref() const { return *ref_; }
  /// Index of the reference policy inside the pool, when it is a member.
  std::optional<std::size_t> ref_index() const { return ref_index_; }
  const Vocab& vocab() const { return agents_.front()->vocab(); }

 private:
  void check_vocab() const;

  std::vector<PolicyPtr> agents_;
  PolicyPtr ref_;
  std::optional<std::size_t> ref_index_;
};

}  // namespace collab
