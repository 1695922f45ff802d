#include "collab/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "collab/canonical.hpp"
#include "collab/rng.hpp"

namespace collab {

namespace {

int want_for(const AgentPolicy& a, const DecoderConfig& cfg) {
  return a.complete_distributions() ? kAllTokens : cfg.top_k;
}

/// Max J, then the lowest (agent, token) among candidates within tolerance.
std::size_t select_candidate(const std::vector<CandidateScore>& cands, double tol) {
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& c : cands) best = std::max(best, c.j_value);
  std::size_t pick = cands.size();
  for (std::size_t i = 0; i < cands.size(); ++i) {
    const auto& c = cands[i];
    if (!(c.j_value >= best - tol)) continue;
    if (pick == cands.size() || c.agent < cands[pick].agent ||
        (c.agent == cands[pick].agent && c.token < cands[pick].token))
      pick = i;
  }
  return pick;
}

}  // namespace

Tokens DecodeTrace::reconstruct() const {
  Tokens out = prefix;
  for (const auto& s : steps) out.push_back(s.chosen_token);
  return out;
}

StepRecord collab_step(const AgentPool& pool, const State& state, const DecoderConfig& cfg, QEvaluator& q) {
  if (state.terminal || is_terminal(state, pool.vocab(), cfg))
    throw Error(ErrorKind::contract, "collab_step on a terminal state");

  std::vector<TokenDistribution> dists;
  dists.reserve(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i)
    dists.push_back(next_distribution(pool.agent(i), state, want_for(pool.agent(i), cfg)));
  std::optional<TokenDistribution> ref_dist;
  if (!pool.ref_index()) ref_dist = next_distribution(pool.ref(), state, want_for(pool.ref(), cfg));
  const TokenDistribution& ref = ref_dist ? *ref_dist : dists[*pool.ref_index()];

  StepRecord rec;
  rec.step = static_cast<int>(state.generated.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const double kl = (pool.ref_index() && *pool.ref_index() == i) ? 0.0 : token_kl(dists[i], ref);
    for (TokenId z : top_k_candidates(dists[i], cfg.top_k))
      rec.candidates.push_back(implicit_j(static_cast<int>(i), z, q(i, pool.agent(i), state, z), kl, cfg.alpha));
  }
  if (rec.candidates.empty()) throw Error(ErrorKind::backend, "no candidates at step " + std::to_string(rec.step));
  const auto& chosen = rec.candidates[select_candidate(rec.candidates, cfg.tie_tolerance)];
  rec.chosen_agent = chosen.agent;
  rec.chosen_token = chosen.token;
  return rec;
}

StepRecord collab_step(const AgentPool& pool, const RewardModel& target, const State& state, const DecoderConfig& cfg,
                       const RolloutConfig& rcfg) {
  QEvaluator q(target, cfg, rcfg);
  return collab_step(pool, state, cfg, q);
}

DecodeTrace collab_continue(const AgentPool& pool, const State& start, const DecoderConfig& cfg, QEvaluator& q) {
  cfg.validate();
  const Vocab& v = pool.vocab();
  v.check(start.prompt);
  v.check(start.generated);
  DecodeTrace trace;
  trace.method = "collab";
  trace.prompt = start.prompt;
  trace.prefix = start.generated;
  trace.output = start.generated;
  trace.config = cfg;
  trace.attribution.assign(pool.size(), 0);

  State state = start;
  state.terminal = is_terminal(state, v, cfg);
  try {
    while (!state.terminal) {
      StepRecord rec = collab_step(pool, state, cfg, q);
      state = append_token(state, rec.chosen_token, v, cfg);
      trace.output.push_back(rec.chosen_token);
      ++trace.attribution[static_cast<std::size_t>(rec.chosen_agent)];
      trace.steps.push_back(std::move(rec));
    }
  } catch (const DecodeError&) {
    throw;
  } catch (const Error& e) {
    throw DecodeError(e, std::move(trace));
  }
  return trace;
}

DecodeTrace collab_decode(const AgentPool& pool, const RewardModel& target, const Tokens& prompt,
                          const DecoderConfig& cfg, const RolloutConfig& rcfg) {
  QEvaluator q(target, cfg, rcfg);
  DecodeTrace trace = collab_continue(pool, make_state(prompt, pool.vocab()), cfg, q);
  trace.rollout = rcfg;
  try {
    trace.reward = trajectory_reward(target, trace.prompt, trace.output);
  } catch (const Error& e) {
    throw DecodeError(e, std::move(trace));
  }
  return trace;
}

DecodeTrace single_agent_decode(const AgentPolicy& agent, const RewardModel& target, const Tokens& prompt,
                                const DecoderConfig& cfg, const RolloutConfig& rcfg, SingleMode mode) {
  cfg.validate();
  if (!(cfg.alpha > 0.0)) throw Error(ErrorKind::config, "single-agent decoding needs alpha > 0");
  const Vocab& v = agent.vocab();
  QEvaluator q(target, cfg, rcfg);

  DecodeTrace trace;
  trace.method = mode == SingleMode::greedy ? "single_greedy" : "single_tilted";
  trace.prompt = prompt;
  trace.config = cfg;
  trace.rollout = rcfg;
  trace.attribution.assign(1, 0);

  State state = make_state(prompt, v);
  state.terminal = is_terminal(state, v, cfg);
  try {
    while (!state.terminal) {
      const TokenDistribution dist = next_distribution(agent, state, want_for(agent, cfg));
      StepRecord rec;
      rec.step = static_cast<int>(state.generated.size());
      for (TokenId z : top_k_candidates(dist, cfg.top_k)) {
        CandidateScore c;
        c.agent = 0;
        c.token = z;
        c.q = q(0, agent, state, z);
        c.log_prob = std::log(*dist.prob(z));
        c.j_value = *c.log_prob + c.q.value / cfg.alpha;
        rec.candidates.push_back(c);
      }
      std::size_t pick = 0;
      if (mode == SingleMode::greedy) {
        pick = select_candidate(rec.candidates, cfg.tie_tolerance);
      } else {
        // C_alpha over the candidate set only.
        double mx = -std::numeric_limits<double>::infinity();
        for (const auto& c : rec.candidates) mx = std::max(mx, c.j_value);
        std::vector<double> w;
        double total = 0.0;
        for (const auto& c : rec.candidates) {
          w.push_back(std::exp(c.j_value - mx));
          total += w.back();
        }
        Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(rec.step)));
        const double u = rng.uniform() * total;
        double acc = 0.0;
        pick = w.size() - 1;
        for (std::size_t i = 0; i < w.size(); ++i) {
          acc += w[i];
          if (u < acc) {
            pick = i;
            break;
          }
        }
      }
      rec.chosen_agent = 0;
      rec.chosen_token = rec.candidates[pick].token;
      state = append_token(state, rec.chosen_token, v, cfg);
      trace.output.push_back(rec.chosen_token);
      ++trace.attribution[0];
      trace.steps.push_back(std::move(rec));
    }
    trace.reward = trajectory_reward(target, trace.prompt, trace.output);
  } catch (const Error& e) {
    throw DecodeError(e, std::move(trace));
  }
  return trace;
}

DecodeTrace bon_decode(const AgentPool& pool, const RewardModel& target, const Tokens& prompt, int n_per_agent,
                       const DecoderConfig& cfg) {
  cfg.validate();
  if (n_per_agent < 1) throw Error(ErrorKind::contract, "best-of-n needs n_per_agent >= 1");
  const Vocab& v = pool.vocab();
  DecodeTrace trace;
  trace.method = "bon";
  trace.prompt = prompt;
  trace.config = cfg;
  trace.attribution.assign(pool.size(), 0);

  const State start = make_state(prompt, v);
  std::optional<std::size_t> best;
  try {
    for (std::size_t j = 0; j < pool.size(); ++j) {
      const auto samples =
          sample_continuations(pool.agent(j), start, n_per_agent, cfg.max_new_tokens, mix_seed(cfg.seed, j));
      for (std::size_t i = 0; i < samples.size(); ++i) {
        BonCandidate c{static_cast<int>(j), static_cast<int>(i), samples[i].tokens,
                       trajectory_reward(target, prompt, samples[i].tokens)};
        trace.bon_candidates.push_back(std::move(c));
        if (!best || trace.bon_candidates.back().reward > trace.bon_candidates[*best].reward)
          best = trace.bon_candidates.size() - 1;
      }
    }
  } catch (const Error& e) {
    throw DecodeError(e, std::move(trace));
  }
  const BonCandidate& win = trace.bon_candidates[*best];
  trace.output = win.tokens;
  trace.reward = win.reward;
  for (std::size_t t = 0; t < win.tokens.size(); ++t) {
    StepRecord rec;
    rec.step = static_cast<int>(t);
    rec.chosen_agent = win.agent;
    rec.chosen_token = win.tokens[t];
    trace.steps.push_back(std::move(rec));
  }
  trace.attribution[static_cast<std::size_t>(win.agent)] = static_cast<int>(win.tokens.size());
  return trace;
}

std::string serialize_trace(const DecodeTrace& trace, const Vocab* vocab) {
  CanonicalWriter w;
  w.begin_object();
  w.key("method").value(trace.method);
  w.key("prompt").ints(trace.prompt);
  w.key("prefix").ints(trace.prefix);
  w.key("output").ints(trace.output);
  if (vocab && vocab->has_labels()) {
    std::string text;
    for (TokenId t : trace.output) text += (text.empty() ? "" : " ") + vocab->label(t);
    w.key("output_text").value(text);
  }
  w.key("reward").value(trace.reward);
  w.key("config").begin_object();
  w.key("alpha").value(trace.config.alpha);
  w.key("beta").value(trace.config.beta);
  w.key("top_k").value(trace.config.top_k);
  w.key("max_new_tokens").value(trace.config.max_new_tokens);
  w.key("ref").value(trace.config.ref.to_string());
  w.key("seed").value(trace.config.seed);
  w.key("tie_break").value("lowest_agent_then_token");
  w.key("tie_tolerance").value(trace.config.tie_tolerance);
  w.key("q_method").value(to_string(trace.config.q_method));
  w.end_object();
  w.key("rollout").begin_object();
  w.key("n_rollouts").value(trace.rollout.n_rollouts);
  if (trace.rollout.max_len)
    w.key("max_len").value(*trace.rollout.max_len);
  else
    w.key("max_len").null();
  w.key("seed").value(trace.rollout.seed);
  w.end_object();
  w.key("attribution").ints(std::vector<std::int32_t>(trace.attribution.begin(), trace.attribution.end()));
  w.key("steps").begin_array();
  for (const auto& s : trace.steps) {
    w.begin_object();
    w.key("t").value(s.step);
    w.key("chosen_agent").value(s.chosen_agent);
    w.key("chosen_token").value(s.chosen_token);
    w.key("candidates").begin_array();
    for (const auto& c : s.candidates) {
      CanonicalWriter line(false);
      line.begin_object();
      line.key("agent").value(c.agent);
      line.key("token").value(c.token);
      line.key("q").value(c.q.value);
      line.key("q_stderr").value(c.q.stderr_);
      line.key("q_method").value(to_string(c.q.method));
      line.key("n").value(c.q.n_samples);
      line.key("kl").value(c.kl);
      line.key("j").value(c.j_value);
      if (c.log_prob) line.key("log_prob").value(*c.log_prob);
      line.end_object();
      w.raw(line.str());
    }
    w.end_array();
    w.end_object();
  }
  w.end_array();
  w.key("bon_candidates").begin_array();
  for (const auto& c : trace.bon_candidates) {
    CanonicalWriter line(false);
    line.begin_object();
    line.key("agent").value(c.agent);
    line.key("sample").value(c.sample);
    line.key("tokens").ints(c.tokens);
    line.key("reward").value(c.reward);
    line.end_object();
    w.raw(line.str());
  }
  w.end_array();
  w.end_object();
  return w.str();
}

}  // namespace collab
