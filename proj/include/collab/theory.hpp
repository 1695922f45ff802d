#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "collab/core.hpp"
#include "collab/policy.hpp"
#include "collab/qeval.hpp"
#include "collab/reward.hpp"

namespace collab {

enum class LatentRewards { random, zero, target };

struct InstanceParams {
  int vocab_size = 3;
  int horizon = 3;
  int n_agents = 2;
  double beta = 1.0;
  double alpha = 1.0;
  int top_k = 10;
  LatentRewards latent = LatentRewards::random;
  /// Replaces the Gibbs agents by unrelated random tables. Negative control only.
  bool corrupt = false;
  /// Minimum unnormalised weight per token in reference rows (full support).
  double ref_floor = 0.05;

  void validate() const;
};

/// Parameters drawn per seed for certification sweeps: |V| in [2, 4],
/// T in [1, 4], K in [1, 3], beta log-uniform in [0.1, 2], alpha = 1.
InstanceParams random_params(std::uint64_t seed);

/// Enumerable instance: an empty prompt, a random full-support reference
/// policy, rewards in [0, 1] over every response, and one Gibbs-tilted agent
/// per latent reward.
struct SyntheticInstance {
  InstanceParams params;
  std::uint64_t seed = 0;
  Vocab vocab{2, 0};
  Tokens prompt;
  std::shared_ptr<const TabularPolicy> ref;
  std::shared_ptr<const TabularTrajectoryReward> target;
  std::vector<std::shared_ptr<const TabularTrajectoryReward>> latent;
  std::vector<PolicyPtr> agents;
  std::vector<Tokens> responses;

  int horizon() const { return params.horizon; }
  AgentPool pool() const;
  DecoderConfig decoder_config() const;
  /// Non-terminal prefixes (generated tokens) in lexicographic order.
  std::vector<Tokens> states() const;
  State state(const Tokens& generated) const { return State{prompt, generated, false}; }
};

SyntheticInstance gen_instance(const InstanceParams& params, std::uint64_t seed);

/// max over responses extending `prefix` of |a - b|.
double delta_star(const RewardModel& a, const RewardModel& b, const SyntheticInstance& inst, const Tokens& prefix = {});

/// Unregularised optimum of a reward by backward induction over the response tree.
class OptimalPolicy {
 public:
  OptimalPolicy(const SyntheticInstance& inst, const RewardModel& reward);

  double value(const Tokens& prefix) const;
  double q(const Tokens& prefix, TokenId z) const;
  TokenId act(const Tokens& prefix) const;
  /// Deterministic continuation of `prefix` under the optimal policy.
  Tokens path(const Tokens& prefix) const;

 private:
  double solve(const Tokens& prefix);

  const SyntheticInstance* inst_;
  const RewardModel* reward_;
  std::map<Tokens, double> value_;
  std::map<Tokens, TokenId> action_;
};

/// Probability that `policy` emits exactly `continuation` from `start`.
double continuation_prob(const AgentPolicy& policy, const State& start, const Tokens& continuation);

/// KL between the continuation distributions of two policies from `start`,
/// by direct summation.
double trajectory_kl(const AgentPolicy& p, const AgentPolicy& q, const State& start, int horizon);

/// beta * KL(rho_j || rho_ref | prefix) through the log-partition identity
/// E[r_j] - beta * log Z(prefix), valid only for Gibbs-tilted agents.
double gibbs_scaled_kl(const GibbsTiltedPolicy& agent, const Tokens& prefix);

struct LemmaReport {
  int i = 0;
  int j = 0;
  Tokens state;
  TokenId z = 0;
  double lhs = 0.0;
  double delta = 0.0;
  double kl_i = 0.0;  // beta-scaled
  double kl_j = 0.0;  // beta-scaled
  double rhs = 0.0;
  double slack = 0.0;
  bool holds = false;
};

/// Which optimal policy the sub-optimality gap is measured against.
enum class OptimumKind { unregularized, gibbs };

struct BoundReport {
  Tokens state;
  TokenId z = 0;
  OptimumKind optimum = OptimumKind::unregularized;
  double q_opt = 0.0;
  double q_alg = 0.0;
  double lhs_delta = 0.0;
  double rhs_bound = 0.0;
  double slack = 0.0;
  double min_delta_star = 0.0;
  int chosen_j = 0;
  double delta_star_chosen = 0.0;
  double alpha_kl_token = 0.0;
  double beta_kl_traj = 0.0;
  bool holds = false;
};

std::string to_string(OptimumKind k);

/// Caches the optimal policies and exact Q tables of one instance so every
/// (state, token) pair can be checked cheaply.
class InstanceVerifier {
 public:
  explicit InstanceVerifier(const SyntheticInstance& inst);

  LemmaReport lemma1(int i, int j, const Tokens& state, TokenId z) const;
  BoundReport theorem1(const Tokens& state, TokenId z, OptimumKind kind = OptimumKind::unregularized);

  /// Q of the switching decoder: emit z at `state`, then decode greedily.
  double q_alg(const Tokens& state, TokenId z);

 private:
  const SyntheticInstance& inst_;
  AgentPool pool_;
  DecoderConfig cfg_;
  OptimalPolicy opt_;
  std::shared_ptr<const GibbsTiltedPolicy> gibbs_opt_;
  QEvaluator evaluator_;
  std::map<Tokens, double> q_alg_cache_;
};

LemmaReport verify_lemma1(const SyntheticInstance& inst, int i, int j, const Tokens& state, TokenId z);
BoundReport verify_theorem1(const SyntheticInstance& inst, const Tokens& state, TokenId z,
                            OptimumKind kind = OptimumKind::unregularized);

std::string serialize_bound_report(const BoundReport& r);
std::string serialize_lemma_report(const LemmaReport& r);

/// Routes queries to a per-prompt policy. Used where each prompt has its own
/// tilted distribution.
class PromptDispatchPolicy final : public AgentPolicy {
 public:
  PromptDispatchPolicy(Vocab vocab, std::map<Tokens, PolicyPtr> by_prompt, std::string name);
  const Vocab& vocab() const override { return vocab_; }
  std::string name() const override { return name_; }
  std::uint64_t id() const override { return id_; }
  TokenDistribution query(const State& state, int want_top) const override;

 private:
  Vocab vocab_;
  std::map<Tokens, PolicyPtr> by_prompt_;
  std::string name_;
  std::uint64_t id_;
};

struct ExpertParams {
  int vocab_size = 6;
  int horizon = 3;
  int n_prompts = 3;
  int prompt_len = 2;
  double beta = 0.7;
  double alpha = 1.0;
  int top_k = 1;
  double ref_floor = 0.05;
  void validate() const;
};

/// Two experts, each Gibbs-tilted toward one keyword of a target that pays
/// 0.5 per keyword present.
struct ExpertInstance {
  ExpertParams params;
  std::uint64_t seed = 0;
  Vocab vocab{2, 0};
  std::vector<Tokens> prompts;
  TokenId keyword_a = 1;
  TokenId keyword_b = 2;
  PolicyPtr ref;
  RewardPtr reward_a;
  RewardPtr reward_b;
  RewardPtr target;
  PolicyPtr expert_a;
  PolicyPtr expert_b;

  DecoderConfig decoder_config() const;
  /// Expected target reward when sampling the whole response from `policy`.
  double expected_reward(const AgentPolicy& policy, const Tokens& prompt) const;
};

ExpertInstance gen_expert_instance(const ExpertParams& params, std::uint64_t seed);

}  // namespace collab
