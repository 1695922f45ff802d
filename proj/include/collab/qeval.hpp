#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "collab/core.hpp"
#include "collab/policy.hpp"
#include "collab/reward.hpp"

namespace collab {

/// Estimate of Q^{pi_j}_target(s, z): expected target reward of the response
/// obtained by emitting z at s and then following agent j.
struct QEstimate {
  double value = 0.0;
  double stderr_ = 0.0;
  QMethod method = QMethod::exact_dp;
  int n_samples = 0;
};

struct RolloutConfig {
  int n_rollouts = 32;
  std::optional<int> max_len;  // unset: the remaining horizon
  std::uint64_t seed = 0;

  void validate() const;
};

/// One (agent, token) candidate of a decoding step. For the switching decoder
/// j_value = q - alpha * kl; single-agent traces reuse the struct with
/// j_value holding the tilted score and log_prob set.
struct CandidateScore {
  int agent = 0;
  TokenId token = 0;
  QEstimate q;
  double kl = 0.0;
  double j_value = 0.0;
  std::optional<double> log_prob;
};

QEstimate q_mc(const AgentPolicy& agent, const RewardModel& target, const State& state, TokenId z,
               const RolloutConfig& cfg, int horizon);

QEstimate q_prefix_proxy(const RewardModel& target, const State& state, TokenId z);

/// Exact expectation by backward induction over every continuation.
QEstimate q_exact_dp(const AgentPolicy& agent, const RewardModel& target, const State& state, TokenId z, int horizon);

/// Pool recursion: at every later state the agent maximizing the expected
/// continuation value is used, i.e. the dynamic-programming optimum over
/// per-state agent choices.
QEstimate q_exact_dp(const AgentPool& pool, const RewardModel& target, const State& state, TokenId z, int horizon);

/// Token-level KL(pi_agent(.|s) || pi_ref(.|s)). Remote agents are compared on
/// their top-k reports with the residual-lumping rule.
double agent_kl(const AgentPool& pool, std::size_t agent, const State& state, int top_k);

CandidateScore implicit_j(int agent, TokenId z, const QEstimate& q, double kl, double alpha);
CandidateScore implicit_j(int agent, const State& state, TokenId z, const QEstimate& q, const AgentPool& pool,
                          double alpha, int top_k = kAllTokens);

/// Dispatches to the configured estimator. Exact values are memoised per
/// (agent index, state), so one evaluator serves a whole decode.
/// Not thread-safe; use one evaluator per worker.
class QEvaluator {
 public:
  QEvaluator(const RewardModel& target, const DecoderConfig& cfg, RolloutConfig rollout);

  QEstimate operator()(std::size_t agent_index, const AgentPolicy& agent, const State& state, TokenId z);

  /// The estimator actually used for `agent` at `state` (auto resolved).
  QMethod method_for(const AgentPolicy& agent, const State& state) const;

  const RewardModel& target() const { return target_; }
  std::size_t evaluations() const { return evaluations_; }

 private:
  double exact_value(std::size_t agent_index, const AgentPolicy& agent, const State& state);

  const RewardModel& target_;
  DecoderConfig cfg_;
  RolloutConfig rollout_;
  std::map<std::pair<std::size_t, Tokens>, double> memo_;
  Tokens memo_prompt_;
  std::size_t evaluations_ = 0;
};

}  // namespace collab
