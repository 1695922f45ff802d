#include "collab/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "collab/canonical.hpp"
#include "collab/decoder.hpp"
#include "collab/rng.hpp"

namespace collab {

namespace {

std::vector<double> random_row(Rng& rng, int n, double floor) {
  std::vector<double> row(static_cast<std::size_t>(n));
  double total = 0.0;
  for (auto& p : row) {
    p = floor + rng.uniform();
    total += p;
  }
  for (auto& p : row) p /= total;
  return row;
}

std::shared_ptr<const TabularPolicy> random_tabular(const Vocab& vocab, int horizon, Rng& rng, double floor,
                                                    const std::string& name) {
  TabularPolicy::Table rows;
  Tokens cur;
  auto rec = [&](auto&& self) -> void {
    State s{{}, cur, false};
    if (is_terminal(s, vocab, horizon)) return;
    rows[cur] = random_row(rng, vocab.size(), floor);
    for (TokenId t = 0; t < vocab.size(); ++t) {
      cur.push_back(t);
      self(self);
      cur.pop_back();
    }
  };
  rec(rec);
  return std::make_shared<TabularPolicy>(vocab, std::move(rows), std::nullopt, name);
}

bool is_prefix(const Tokens& prefix, const Tokens& full) {
  return prefix.size() <= full.size() && std::equal(prefix.begin(), prefix.end(), full.begin());
}

}  // namespace

void InstanceParams::validate() const {
  if (vocab_size < 2) throw Error(ErrorKind::usage, "instance vocab size must be >= 2");
  if (horizon < 1) throw Error(ErrorKind::usage, "instance horizon must be >= 1");
  if (n_agents < 1) throw Error(ErrorKind::usage, "instance needs at least one agent");
  if (!(beta > 0.0)) throw Error(ErrorKind::usage, "instance beta must be > 0");
  if (!(alpha >= 0.0)) throw Error(ErrorKind::usage, "instance alpha must be >= 0");
  if (!enumeration_bound(vocab_size, horizon))
    throw Error(ErrorKind::guard, "instance trajectory space |V|^T exceeds 1e6");
}

InstanceParams random_params(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x7061726d73ull));
  InstanceParams p;
  p.vocab_size = 2 + static_cast<int>(rng.below(3));
  p.horizon = 1 + static_cast<int>(rng.below(4));
  p.n_agents = 1 + static_cast<int>(rng.below(3));
  p.beta = std::exp(rng.uniform(std::log(0.1), std::log(2.0)));
  p.alpha = 1.0;
  return p;
}

SyntheticInstance gen_instance(const InstanceParams& params, std::uint64_t seed) {
  params.validate();
  SyntheticInstance inst;
  inst.params = params;
  inst.seed = seed;
  std::vector<std::string> labels{"<eos>"};
  for (int i = 1; i < params.vocab_size; ++i) labels.push_back(std::string(1, static_cast<char>('a' + (i - 1) % 26)));
  inst.vocab = Vocab(params.vocab_size, 0, labels);
  inst.responses = enumerate_responses(inst.vocab, {}, params.horizon);

  Rng rng(mix_seed(seed, 0x696e7374ull));
  inst.ref = random_tabular(inst.vocab, params.horizon, rng, params.ref_floor, "ref");

  auto random_reward = [&](const std::string& name) {
    std::map<Tokens, double> table;
    for (const auto& r : inst.responses) table[r] = rng.uniform();
    return std::make_shared<TabularTrajectoryReward>(std::move(table), RewardBounds{0.0, 1.0}, name);
  };
  inst.target = random_reward("target");
  for (int j = 0; j < params.n_agents; ++j) {
    const std::string name = "r" + std::to_string(j);
    switch (params.latent) {
      case LatentRewards::random:
        inst.latent.push_back(random_reward(name));
        break;
      case LatentRewards::zero: {
        std::map<Tokens, double> table;
        for (const auto& r : inst.responses) table[r] = 0.0;
        inst.latent.push_back(std::make_shared<TabularTrajectoryReward>(std::move(table), RewardBounds{0.0, 1.0}, name));
        break;
      }
      case LatentRewards::target:
        inst.latent.push_back(
            std::make_shared<TabularTrajectoryReward>(inst.target->table(), RewardBounds{0.0, 1.0}, name));
        break;
    }
  }
  for (int j = 0; j < params.n_agents; ++j) {
    const std::string name = "agent" + std::to_string(j);
    if (params.corrupt)
      inst.agents.push_back(random_tabular(inst.vocab, params.horizon, rng, 0.0, name));
    else
      inst.agents.push_back(std::make_shared<GibbsTiltedPolicy>(inst.ref, inst.latent[static_cast<std::size_t>(j)],
                                                                params.beta, inst.prompt, params.horizon, name));
  }
  return inst;
}

AgentPool SyntheticInstance::pool() const { return AgentPool(agents, ref); }

DecoderConfig SyntheticInstance::decoder_config() const {
  DecoderConfig cfg;
  cfg.alpha = params.alpha;
  cfg.beta = params.beta;
  cfg.top_k = params.top_k;
  cfg.max_new_tokens = params.horizon;
  cfg.q_method = QMethod::exact_dp;
  cfg.seed = seed;
  return cfg;
}

std::vector<Tokens> SyntheticInstance::states() const {
  std::vector<Tokens> out;
  Tokens cur;
  auto rec = [&](auto&& self) -> void {
    if (is_terminal(state(cur), vocab, params.horizon)) return;
    out.push_back(cur);
    for (TokenId t = 0; t < vocab.size(); ++t) {
      cur.push_back(t);
      self(self);
      cur.pop_back();
    }
  };
  rec(rec);
  return out;
}

double delta_star(const RewardModel& a, const RewardModel& b, const SyntheticInstance& inst, const Tokens& prefix) {
  if (!enumeration_bound(inst.vocab.size(), inst.horizon()))
    throw Error(ErrorKind::guard, "delta_star needs an enumerable response space");
  double best = 0.0;
  bool any = false;
  for (const auto& r : inst.responses) {
    if (!is_prefix(prefix, r)) continue;
    any = true;
    best = std::max(best, std::abs(trajectory_reward(a, inst.prompt, r) - trajectory_reward(b, inst.prompt, r)));
  }
  if (!any) throw Error(ErrorKind::contract, "delta_star: no response extends the given prefix");
  return best;
}

// ---------------------------------------------------------------------------
// OptimalPolicy

OptimalPolicy::OptimalPolicy(const SyntheticInstance& inst, const RewardModel& reward) : inst_(&inst), reward_(&reward) {
  if (!enumeration_bound(inst.vocab.size(), inst.horizon()))
    throw Error(ErrorKind::guard, "optimal policy needs an enumerable response space");
  solve({});
}

double OptimalPolicy::solve(const Tokens& prefix) {
  if (is_terminal(inst_->state(prefix), inst_->vocab, inst_->horizon()))
    return trajectory_reward(*reward_, inst_->prompt, prefix);
  double best = -std::numeric_limits<double>::infinity();
  TokenId arg = 0;
  for (TokenId z = 0; z < inst_->vocab.size(); ++z) {
    Tokens child = prefix;
    child.push_back(z);
    const double v = solve(child);
    if (v > best) {
      best = v;
      arg = z;
    }
  }
  value_[prefix] = best;
  action_[prefix] = arg;
  return best;
}

double OptimalPolicy::value(const Tokens& prefix) const {
  if (is_terminal(inst_->state(prefix), inst_->vocab, inst_->horizon()))
    return trajectory_reward(*reward_, inst_->prompt, prefix);
  return value_.at(prefix);
}

double OptimalPolicy::q(const Tokens& prefix, TokenId z) const {
  Tokens child = prefix;
  child.push_back(z);
  return value(child);
}

TokenId OptimalPolicy::act(const Tokens& prefix) const { return action_.at(prefix); }

Tokens OptimalPolicy::path(const Tokens& prefix) const {
  Tokens cur = prefix;
  Tokens out;
  while (!is_terminal(inst_->state(cur), inst_->vocab, inst_->horizon())) {
    const TokenId a = act(cur);
    cur.push_back(a);
    out.push_back(a);
  }
  return out;
}

// ---------------------------------------------------------------------------
// KL helpers

double continuation_prob(const AgentPolicy& policy, const State& start, const Tokens& continuation) {
  State s = start;
  double p = 1.0;
  for (TokenId t : continuation) {
    const TokenDistribution d = next_distribution(policy, s);
    p *= d.prob(t).value_or(0.0);
    if (p == 0.0) return 0.0;
    s.generated.push_back(t);
  }
  return p;
}

double trajectory_kl(const AgentPolicy& p, const AgentPolicy& q, const State& start, int horizon) {
  double kl = 0.0;
  for (const auto& c : enumerate_continuations(p, start, horizon)) {
    if (c.prob <= 0.0) continue;
    const double qc = continuation_prob(q, start, c.tokens);
    if (qc <= 0.0) throw Error(ErrorKind::support, "trajectory KL support violation");
    kl += c.prob * std::log(c.prob / qc);
  }
  return std::max(0.0, kl);
}

double gibbs_scaled_kl(const GibbsTiltedPolicy& agent, const Tokens& prefix) {
  const State start{agent.prompt(), prefix, false};
  double expected = 0.0;
  for (const auto& c : enumerate_continuations(agent, start, agent.horizon())) {
    Tokens full = prefix;
    full.insert(full.end(), c.tokens.begin(), c.tokens.end());
    expected += c.prob * trajectory_reward(agent.reward(), agent.prompt(), full);
  }
  return expected - agent.beta() * agent.log_partition(prefix);
}

std::string to_string(OptimumKind k) { return k == OptimumKind::gibbs ? "gibbs" : "unregularized"; }

// ---------------------------------------------------------------------------
// InstanceVerifier

InstanceVerifier::InstanceVerifier(const SyntheticInstance& inst)
    : inst_(inst),
      pool_(inst.pool()),
      cfg_(inst.decoder_config()),
      opt_(inst, *inst.target),
      gibbs_opt_(std::make_shared<GibbsTiltedPolicy>(inst.ref, inst.target, inst.params.beta, inst.prompt,
                                                     inst.horizon(), "gibbs_opt")),
      evaluator_(*inst.target, cfg_, RolloutConfig{}) {}

double InstanceVerifier::q_alg(const Tokens& state, TokenId z) {
  Tokens next = state;
  next.push_back(z);
  if (auto it = q_alg_cache_.find(next); it != q_alg_cache_.end()) return it->second;
  double v = 0.0;
  const State s = inst_.state(next);
  if (is_terminal(s, inst_.vocab, inst_.horizon())) {
    v = trajectory_reward(*inst_.target, inst_.prompt, next);
  } else {
    const DecodeTrace trace = collab_continue(pool_, s, cfg_, evaluator_);
    v = trajectory_reward(*inst_.target, inst_.prompt, trace.output);
  }
  q_alg_cache_.emplace(std::move(next), v);
  return v;
}

LemmaReport InstanceVerifier::lemma1(int i, int j, const Tokens& state, TokenId z) const {
  const auto& agents = inst_.agents;
  if (i < 0 || j < 0 || static_cast<std::size_t>(i) >= agents.size() || static_cast<std::size_t>(j) >= agents.size())
    throw Error(ErrorKind::contract, "lemma1: agent index out of range");
  const State s = inst_.state(state);
  const int T = inst_.horizon();
  const auto& ri = *inst_.latent[static_cast<std::size_t>(i)];
  const auto& rj = *inst_.latent[static_cast<std::size_t>(j)];
  Tokens next = state;
  next.push_back(z);
  const State sz = inst_.state(next);

  LemmaReport rep;
  rep.i = i;
  rep.j = j;
  rep.state = state;
  rep.z = z;
  rep.lhs = q_exact_dp(*agents[static_cast<std::size_t>(i)], ri, s, z, T).value -
            q_exact_dp(*agents[static_cast<std::size_t>(j)], rj, s, z, T).value;
  rep.delta = delta_star(ri, rj, inst_, next);
  const double beta = inst_.params.beta;
  rep.kl_i = beta * trajectory_kl(*agents[static_cast<std::size_t>(i)], *inst_.ref, sz, T);
  rep.kl_j = beta * trajectory_kl(*agents[static_cast<std::size_t>(j)], *inst_.ref, sz, T);
  rep.rhs = rep.delta + rep.kl_i - rep.kl_j;
  rep.slack = rep.rhs - rep.lhs;
  rep.holds = rep.slack >= -1e-9;
  return rep;
}

BoundReport InstanceVerifier::theorem1(const Tokens& state, TokenId z, OptimumKind kind) {
  const State s = inst_.state(state);
  if (is_terminal(s, inst_.vocab, inst_.horizon())) throw Error(ErrorKind::contract, "theorem1: terminal state");
  inst_.vocab.check(z);
  const int T = inst_.horizon();
  Tokens next = state;
  next.push_back(z);
  const State sz = inst_.state(next);

  BoundReport rep;
  rep.state = state;
  rep.z = z;
  rep.optimum = kind;
  rep.q_alg = q_alg(state, z);

  const double beta = inst_.params.beta;
  if (kind == OptimumKind::unregularized) {
    rep.q_opt = opt_.q(state, z);
    // The optimum is deterministic: KL reduces to -log rho_ref of its path.
    const Tokens path = is_terminal(sz, inst_.vocab, T) ? Tokens{} : opt_.path(next);
    rep.beta_kl_traj = beta * -std::log(continuation_prob(*inst_.ref, sz, path));
  } else {
    rep.q_opt = q_exact_dp(*gibbs_opt_, *inst_.target, s, z, T).value;
    rep.beta_kl_traj = beta * trajectory_kl(*gibbs_opt_, *inst_.ref, sz, T);
  }
  rep.beta_kl_traj = std::max(0.0, rep.beta_kl_traj);
  rep.lhs_delta = rep.q_opt - rep.q_alg;

  const double alpha = inst_.params.alpha;
  const TokenDistribution ref_row = next_distribution(*inst_.ref, s);
  double best = std::numeric_limits<double>::infinity();
  rep.min_delta_star = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < inst_.agents.size(); ++j) {
    const double d = delta_star(*inst_.target, *inst_.latent[j], inst_, next);
    const double kl = alpha * token_kl(next_distribution(*inst_.agents[j], s), ref_row);
    rep.min_delta_star = std::min(rep.min_delta_star, d);
    if (d + kl < best) {
      best = d + kl;
      rep.chosen_j = static_cast<int>(j);
      rep.delta_star_chosen = d;
      rep.alpha_kl_token = kl;
    }
  }
  rep.rhs_bound = best + rep.beta_kl_traj;
  rep.slack = rep.rhs_bound - rep.lhs_delta;
  rep.holds = rep.slack >= -1e-9;
  return rep;
}

LemmaReport verify_lemma1(const SyntheticInstance& inst, int i, int j, const Tokens& state, TokenId z) {
  return InstanceVerifier(inst).lemma1(i, j, state, z);
}

BoundReport verify_theorem1(const SyntheticInstance& inst, const Tokens& state, TokenId z, OptimumKind kind) {
  InstanceVerifier v(inst);
  return v.theorem1(state, z, kind);
}

std::string serialize_bound_report(const BoundReport& r) {
  CanonicalWriter w(false);
  w.begin_object();
  w.key("state").ints(r.state);
  w.key("z").value(r.z);
  w.key("optimum").value(to_string(r.optimum));
  w.key("q_opt").value(r.q_opt);
  w.key("q_alg").value(r.q_alg);
  w.key("lhs_delta").value(r.lhs_delta);
  w.key("rhs_bound").value(r.rhs_bound);
  w.key("slack").value(r.slack);
  w.key("min_delta_star").value(r.min_delta_star);
  w.key("chosen_j").value(r.chosen_j);
  w.key("delta_star_j").value(r.delta_star_chosen);
  w.key("alpha_kl_token").value(r.alpha_kl_token);
  w.key("beta_kl_traj").value(r.beta_kl_traj);
  w.key("holds").value(r.holds);
  w.end_object();
  return w.str();
}

std::string serialize_lemma_report(const LemmaReport& r) {
  CanonicalWriter w(false);
  w.begin_object();
  w.key("i").value(r.i);
  w.key("j").value(r.j);
  w.key("state").ints(r.state);
  w.key("z").value(r.z);
  w.key("lhs").value(r.lhs);
  w.key("delta").value(r.delta);
  w.key("beta_kl_i").value(r.kl_i);
  w.key("beta_kl_j").value(r.kl_j);
  w.key("rhs").value(r.rhs);
  w.key("slack").value(r.slack);
  w.key("holds").value(r.holds);
  w.end_object();
  return w.str();
}

}  // namespace collab

namespace collab {

PromptDispatchPolicy::PromptDispatchPolicy(Vocab vocab, std::map<Tokens, PolicyPtr> by_prompt, std::string name)
    : vocab_(std::move(vocab)), by_prompt_(std::move(by_prompt)), name_(std::move(name)) {
  std::uint64_t h = fnv1a(name_);
  for (const auto& [prompt, policy] : by_prompt_) {
    if (!policy->vocab().same_shape(vocab_)) throw Error(ErrorKind::contract, "dispatch policy vocab mismatch");
    h = hash_ints<TokenId>(prompt, h) ^ policy->id();
    h = splitmix64(h);
  }
  id_ = h;
}

TokenDistribution PromptDispatchPolicy::query(const State& state, int want_top) const {
  auto it = by_prompt_.find(state.prompt);
  if (it == by_prompt_.end()) throw Error(ErrorKind::table_miss, name_ + ": no policy for this prompt");
  return it->second->query(state, want_top);
}

void ExpertParams::validate() const {
  if (vocab_size < 3) throw Error(ErrorKind::usage, "expert instance needs at least two non-eos tokens");
  if (horizon < 1 || n_prompts < 1 || prompt_len < 0 || top_k < 1)
    throw Error(ErrorKind::usage, "invalid expert instance parameters");
  if (!(beta > 0.0) || !(alpha >= 0.0)) throw Error(ErrorKind::usage, "invalid expert instance temperatures");
  if (!enumeration_bound(vocab_size, horizon)) throw Error(ErrorKind::guard, "expert instance is not enumerable");
}

ExpertInstance gen_expert_instance(const ExpertParams& params, std::uint64_t seed) {
  params.validate();
  ExpertInstance inst;
  inst.params = params;
  inst.seed = seed;
  inst.vocab = Vocab(params.vocab_size, 0);
  Rng rng(mix_seed(seed, 0x657870657274ull));

  inst.keyword_a = 1 + static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(params.vocab_size - 1)));
  do {
    inst.keyword_b = 1 + static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(params.vocab_size - 1)));
  } while (inst.keyword_b == inst.keyword_a);

  const RewardBounds unit{0.0, 1.0};
  inst.reward_a = std::make_shared<KeywordReward>(std::set<TokenId>{inst.keyword_a}, 1.0, unit);
  inst.reward_b = std::make_shared<KeywordReward>(std::set<TokenId>{inst.keyword_b}, 1.0, unit);
  inst.target = std::make_shared<BlendReward>(
      std::vector<BlendReward::Component>{{0.5, inst.reward_a}, {0.5, inst.reward_b}});

  std::set<Tokens> seen;
  while (static_cast<int>(inst.prompts.size()) < params.n_prompts) {
    Tokens p;
    for (int i = 0; i < params.prompt_len; ++i)
      p.push_back(1 + static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(params.vocab_size - 1))));
    if (seen.insert(p).second || params.prompt_len == 0) inst.prompts.push_back(p);
    if (params.prompt_len == 0) break;
  }

  TabularPolicy::Table rows;
  for (const auto& prompt : inst.prompts) {
    Tokens cur = prompt;
    auto rec = [&](auto&& self, int depth) -> void {
      rows[cur] = random_row(rng, params.vocab_size, params.ref_floor);
      if (depth + 1 >= params.horizon) return;
      for (TokenId t = 1; t < params.vocab_size; ++t) {
        cur.push_back(t);
        self(self, depth + 1);
        cur.pop_back();
      }
    };
    rec(rec, 0);
  }
  auto ref = std::make_shared<TabularPolicy>(inst.vocab, std::move(rows), std::nullopt, "ref");
  inst.ref = ref;

  std::map<Tokens, PolicyPtr> a, b;
  for (const auto& prompt : inst.prompts) {
    a[prompt] = std::make_shared<GibbsTiltedPolicy>(ref, inst.reward_a, params.beta, prompt, params.horizon, "a");
    b[prompt] = std::make_shared<GibbsTiltedPolicy>(ref, inst.reward_b, params.beta, prompt, params.horizon, "b");
  }
  inst.expert_a = std::make_shared<PromptDispatchPolicy>(inst.vocab, std::move(a), "expert_a");
  inst.expert_b = std::make_shared<PromptDispatchPolicy>(inst.vocab, std::move(b), "expert_b");
  return inst;
}

DecoderConfig ExpertInstance::decoder_config() const {
  DecoderConfig cfg;
  cfg.alpha = params.alpha;
  cfg.beta = params.beta;
  cfg.top_k = params.top_k;
  cfg.max_new_tokens = params.horizon;
  cfg.q_method = QMethod::exact_dp;
  cfg.seed = seed;
  return cfg;
}

double ExpertInstance::expected_reward(const AgentPolicy& policy, const Tokens& prompt) const {
  double total = 0.0;
  for (const auto& c : enumerate_continuations(policy, State{prompt, {}, false}, params.horizon))
    total += c.prob * trajectory_reward(*target, prompt, c.tokens);
  return total;
}

}  // namespace collab
