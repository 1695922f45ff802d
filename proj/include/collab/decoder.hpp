#pragma once

#include <string>
#include <vector>

#include "collab/core.hpp"
#include "collab/policy.hpp"
#include "collab/qeval.hpp"
#include "collab/reward.hpp"

namespace collab {

struct StepRecord {
  int step = 0;
  std::vector<CandidateScore> candidates;
  int chosen_agent = 0;
  TokenId chosen_token = 0;
};

struct BonCandidate {
  int agent = 0;
  int sample = 0;
  Tokens tokens;
  double reward = 0.0;
};

/// Full record of one decode. `output` holds the generated tokens only.
struct DecodeTrace {
  std::string method;
  Tokens prompt;
  Tokens prefix;  // generated tokens that predate the first step record
  std::vector<StepRecord> steps;
  Tokens output;
  DecoderConfig config;
  RolloutConfig rollout;
  std::vector<int> attribution;  // tokens emitted per agent
  std::vector<BonCandidate> bon_candidates;
  std::optional<double> reward;  // target reward of the output, when scored

  /// Rebuilds the output from the step choices.
  Tokens reconstruct() const;
};

/// Thrown when a decode fails part-way; carries the trace up to the failure.
class DecodeError : public Error {
 public:
  DecodeError(const Error& cause, DecodeTrace partial)
      : Error(cause.kind(), cause.detail()), partial_(std::move(partial)) {}
  const DecodeTrace& partial() const { return partial_; }

 private:
  DecodeTrace partial_;
};

/// One switching step: every agent proposes its top-k tokens, each candidate
/// is scored J = Q_j - alpha * KL_j, and the best pair under the tie-break
/// rule is chosen. KL is computed once per agent.
StepRecord collab_step(const AgentPool& pool, const State& state, const DecoderConfig& cfg, QEvaluator& q);
StepRecord collab_step(const AgentPool& pool, const RewardModel& target, const State& state, const DecoderConfig& cfg,
                       const RolloutConfig& rcfg);

DecodeTrace collab_decode(const AgentPool& pool, const RewardModel& target, const Tokens& prompt,
                          const DecoderConfig& cfg, const RolloutConfig& rcfg);

/// Continues switching from an arbitrary non-terminal state (the prefix is
/// kept in the output but has no step records).
DecodeTrace collab_continue(const AgentPool& pool, const State& start, const DecoderConfig& cfg, QEvaluator& q);

enum class SingleMode { greedy, tilted_sample };

/// Single-agent controlled decoding: scores ln pi(z|s) + Q(s,z)/alpha over the
/// agent's top-k and either takes the argmax or samples the renormalised tilt.
DecodeTrace single_agent_decode(const AgentPolicy& agent, const RewardModel& target, const Tokens& prompt,
                                const DecoderConfig& cfg, const RolloutConfig& rcfg, SingleMode mode);

/// Best-of-N: n_per_agent temperature-1 samples from each agent, the highest
/// target reward wins (ties: lower agent, then lower sample index).
DecodeTrace bon_decode(const AgentPool& pool, const RewardModel& target, const Tokens& prompt, int n_per_agent,
                       const DecoderConfig& cfg);

/// Canonical text form: stable key order, 17 significant digits.
std::string serialize_trace(const DecodeTrace& trace, const Vocab* vocab = nullptr);

}  // namespace collab
