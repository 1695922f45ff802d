#include "collab/qeval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace collab {

namespace {

void check_enumerable(const Vocab& v, const State& next, int horizon) {
  const int remaining = horizon - static_cast<int>(next.generated.size());
  if (!enumeration_bound(v.size(), remaining))
    throw Error(ErrorKind::guard, "exact Q needs |V|^remaining <= 1e6 (|V| = " + std::to_string(v.size()) +
                                      ", remaining = " + std::to_string(remaining) + ")");
}

const TokenDistribution complete_row(const AgentPolicy& agent, const State& s) {
  TokenDistribution d = next_distribution(agent, s);
  if (!d.complete) throw Error(ErrorKind::capability, "exact Q needs complete rows from agent '" + agent.name() + "'");
  return d;
}

double single_value(const AgentPolicy& agent, const RewardModel& target, State& s, int horizon) {
  if (is_terminal(s, agent.vocab(), horizon)) return trajectory_reward(target, s.prompt, s.generated);
  const TokenDistribution d = complete_row(agent, s);
  double v = 0.0;
  for (const auto& e : d.entries) {
    if (e.prob <= 0.0) continue;
    s.generated.push_back(e.token);
    v += e.prob * single_value(agent, target, s, horizon);
    s.generated.pop_back();
  }
  return v;
}

double pool_value(const AgentPool& pool, const RewardModel& target, State& s, int horizon,
                  std::map<Tokens, double>& memo) {
  if (is_terminal(s, pool.vocab(), horizon)) return trajectory_reward(target, s.prompt, s.generated);
  if (auto it = memo.find(s.generated); it != memo.end()) return it->second;
  // Q_pool(s, a) is shared across agents; only the mixing weights differ.
  std::map<TokenId, double> q;
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < pool.size(); ++j) {
    const TokenDistribution d = complete_row(pool.agent(j), s);
    double v = 0.0;
    for (const auto& e : d.entries) {
      if (e.prob <= 0.0) continue;
      auto it = q.find(e.token);
      if (it == q.end()) {
        s.generated.push_back(e.token);
        it = q.emplace(e.token, pool_value(pool, target, s, horizon, memo)).first;
        s.generated.pop_back();
      }
      v += e.prob * it->second;
    }
    best = std::max(best, v);
  }
  memo.emplace(s.generated, best);
  return best;
}

}  // namespace

void RolloutConfig::validate() const {
  if (n_rollouts < 1) throw Error(ErrorKind::config, "rollout n_rollouts must be >= 1");
  if (max_len && *max_len < 1) throw Error(ErrorKind::config, "rollout max_len must be >= 1");
}

QEstimate q_mc(const AgentPolicy& agent, const RewardModel& target, const State& state, TokenId z,
               const RolloutConfig& cfg, int horizon) {
  cfg.validate();
  const State next = append_token(state, z, agent.vocab(), horizon);
  QEstimate out;
  out.method = QMethod::mc;
  if (next.terminal) {
    out.value = trajectory_reward(target, next.prompt, next.generated);
    return out;
  }
  const int remaining = horizon - static_cast<int>(next.generated.size());
  const int len = std::min(cfg.max_len.value_or(remaining), remaining);
  const auto rollouts = sample_rollouts(agent, state, z, cfg.n_rollouts, len, cfg.seed);

  double sum = 0.0;
  std::vector<double> rewards;
  rewards.reserve(rollouts.size());
  for (const auto& t : rollouts) {
    Tokens response = next.generated;
    response.insert(response.end(), t.tokens.begin(), t.tokens.end());
    rewards.push_back(trajectory_reward(target, next.prompt, response));
    sum += rewards.back();
  }
  const double m = static_cast<double>(rewards.size());
  out.value = sum / m;
  out.n_samples = static_cast<int>(rewards.size());
  if (rewards.size() > 1) {
    double ss = 0.0;
    for (double r : rewards) ss += (r - out.value) * (r - out.value);
    out.stderr_ = std::sqrt(ss / (m - 1.0)) / std::sqrt(m);
  }
  return out;
}

QEstimate q_prefix_proxy(const RewardModel& target, const State& state, TokenId z) {
  if (state.terminal) throw Error(ErrorKind::contract, "q_prefix_proxy on a terminal state");
  Tokens partial = state.generated;
  partial.push_back(z);
  QEstimate out;
  out.method = QMethod::prefix_proxy;
  out.value = prefix_reward(target, state.prompt, partial);
  return out;
}

QEstimate q_exact_dp(const AgentPolicy& agent, const RewardModel& target, const State& state, TokenId z, int horizon) {
  State next = append_token(state, z, agent.vocab(), horizon);
  check_enumerable(agent.vocab(), next, horizon);
  QEstimate out;
  out.method = QMethod::exact_dp;
  out.value = single_value(agent, target, next, horizon);
  return out;
}

QEstimate q_exact_dp(const AgentPool& pool, const RewardModel& target, const State& state, TokenId z, int horizon) {
  State next = append_token(state, z, pool.vocab(), horizon);
  check_enumerable(pool.vocab(), next, horizon);
  std::map<Tokens, double> memo;
  QEstimate out;
  out.method = QMethod::exact_dp;
  out.value = pool_value(pool, target, next, horizon, memo);
  return out;
}

double agent_kl(const AgentPool& pool, std::size_t agent, const State& state, int top_k) {
  if (pool.ref_index() && *pool.ref_index() == agent) return 0.0;
  const AgentPolicy& a = pool.agent(agent);
  const AgentPolicy& ref = pool.ref();
  const TokenDistribution p = next_distribution(a, state, a.complete_distributions() ? kAllTokens : top_k);
  const TokenDistribution q = next_distribution(ref, state, ref.complete_distributions() ? kAllTokens : top_k);
  return token_kl(p, q);
}

CandidateScore implicit_j(int agent, TokenId z, const QEstimate& q, double kl, double alpha) {
  CandidateScore c;
  c.agent = agent;
  c.token = z;
  c.q = q;
  c.kl = kl;
  c.j_value = q.value - alpha * kl;
  return c;
}

CandidateScore implicit_j(int agent, const State& state, TokenId z, const QEstimate& q, const AgentPool& pool,
                          double alpha, int top_k) {
  return implicit_j(agent, z, q, agent_kl(pool, static_cast<std::size_t>(agent), state, top_k), alpha);
}

QEvaluator::QEvaluator(const RewardModel& target, const DecoderConfig& cfg, RolloutConfig rollout)
    : target_(target), cfg_(cfg), rollout_(rollout) {
  cfg_.validate();
  rollout_.validate();
}

QMethod QEvaluator::method_for(const AgentPolicy& agent, const State& state) const {
  if (cfg_.q_method != QMethod::automatic) return cfg_.q_method;
  const int remaining = cfg_.max_new_tokens - static_cast<int>(state.generated.size()) - 1;
  if (agent.complete_distributions() && enumeration_bound(agent.vocab().size(), remaining)) return QMethod::exact_dp;
  return QMethod::mc;
}

double QEvaluator::exact_value(std::size_t agent_index, const AgentPolicy& agent, const State& state) {
  if (is_terminal(state, agent.vocab(), cfg_.max_new_tokens))
    return trajectory_reward(target_, state.prompt, state.generated);
  auto key = std::make_pair(agent_index, state.generated);
  if (auto it = memo_.find(key); it != memo_.end()) return it->second;
  const TokenDistribution d = complete_row(agent, state);
  double v = 0.0;
  State child = state;
  for (const auto& e : d.entries) {
    if (e.prob <= 0.0) continue;
    child.generated.push_back(e.token);
    v += e.prob * exact_value(agent_index, agent, child);
    child.generated.pop_back();
  }
  memo_.emplace(std::move(key), v);
  return v;
}

QEstimate QEvaluator::operator()(std::size_t agent_index, const AgentPolicy& agent, const State& state, TokenId z) {
  ++evaluations_;
  switch (method_for(agent, state)) {
    case QMethod::mc:
      return q_mc(agent, target_, state, z, rollout_, cfg_.max_new_tokens);
    case QMethod::prefix_proxy:
      return q_prefix_proxy(target_, state, z);
    case QMethod::exact_dp:
    case QMethod::automatic: {
      if (state.prompt != memo_prompt_) {
        memo_.clear();
        memo_prompt_ = state.prompt;
      }
      const State next = append_token(state, z, agent.vocab(), cfg_.max_new_tokens);
      check_enumerable(agent.vocab(), next, cfg_.max_new_tokens);
      QEstimate out;
      out.method = QMethod::exact_dp;
      out.value = exact_value(agent_index, agent, next);
      return out;
    }
  }
  throw Error(ErrorKind::contract, "unreachable q method");
}

}  // namespace collab
