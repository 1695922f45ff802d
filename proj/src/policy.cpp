#include "collab/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "collab/rng.hpp"

namespace collab {

namespace {

std::uint64_t double_bits(double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof(v));
  return bits;
}

std::string describe(const Tokens& tokens) {
  std::string s;
  for (TokenId t : tokens) s += (s.empty() ? "" : " ") + std::to_string(t);
  return "[" + s + "]";
}

void check_row(const Vocab& vocab, const std::vector<double>& row, const std::string& where) {
  if (static_cast<int>(row.size()) != vocab.size())
    throw Error(ErrorKind::contract, where + ": row has " + std::to_string(row.size()) + " entries, vocab has " +
                                         std::to_string(vocab.size()));
  double total = 0.0;
  for (double p : row) {
    if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorKind::contract, where + ": probability outside [0, 1]");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw Error(ErrorKind::contract, where + ": row does not sum to 1");
}

}  // namespace

// ---------------------------------------------------------------------------
// TokenDistribution

std::optional<double> TokenDistribution::prob(TokenId t) const {
  for (const auto& e : entries)
    if (e.token == t) return e.prob;
  if (complete) return 0.0;
  return std::nullopt;
}

double TokenDistribution::listed_mass() const {
  double s = 0.0;
  for (const auto& e : entries) s += e.prob;
  return s;
}

void TokenDistribution::sort_canonical() {
  std::sort(entries.begin(), entries.end(), [](const TokenProb& a, const TokenProb& b) {
    if (a.prob != b.prob) return a.prob > b.prob;
    return a.token < b.token;
  });
}

TokenDistribution TokenDistribution::truncated(int k) const {
  TokenDistribution out = *this;
  out.sort_canonical();
  if (k <= 0 || static_cast<std::size_t>(k) >= out.entries.size()) return out;
  double dropped = 0.0;
  for (std::size_t i = static_cast<std::size_t>(k); i < out.entries.size(); ++i) dropped += out.entries[i].prob;
  out.entries.resize(static_cast<std::size_t>(k));
  out.tail_mass += dropped;
  out.complete = out.complete && dropped == 0.0;
  return out;
}

void TokenDistribution::validate(const Vocab& vocab, double tol) const {
  std::set<TokenId> seen;
  double total = tail_mass;
  for (const auto& e : entries) {
    if (!vocab.contains(e.token))
      throw Error(ErrorKind::contract, "distribution lists token " + std::to_string(e.token) + " outside vocab");
    if (!seen.insert(e.token).second)
      throw Error(ErrorKind::contract, "distribution lists token " + std::to_string(e.token) + " twice");
    if (!(e.prob >= 0.0 && e.prob <= 1.0))
      throw Error(ErrorKind::contract, "probability of token " + std::to_string(e.token) + " outside [0, 1]");
    total += e.prob;
  }
  if (!(tail_mass >= 0.0)) throw Error(ErrorKind::contract, "negative tail mass");
  if (complete && tail_mass != 0.0) throw Error(ErrorKind::contract, "complete distribution with non-zero tail");
  if (!(std::abs(total - 1.0) <= tol)) {
    std::ostringstream os;
    os.precision(17);
    os << "distribution sums to " << total;
    throw Error(ErrorKind::contract, os.str());
  }
}

TokenDistribution TokenDistribution::from_dense(const std::vector<double>& probs) {
  TokenDistribution d;
  for (std::size_t i = 0; i < probs.size(); ++i)
    if (probs[i] > 0.0) d.entries.push_back({static_cast<TokenId>(i), probs[i]});
  d.complete = true;
  d.sort_canonical();
  return d;
}

// ---------------------------------------------------------------------------
// AgentPolicy

std::uint64_t AgentPolicy::id() const { return fnv1a(name()); }

std::vector<Trajectory> AgentPolicy::continuations(const State& state, int n, int max_len, std::uint64_t seed) const {
  const Vocab& v = vocab();
  std::vector<Trajectory> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    State s = state;
    Trajectory traj;
    while (static_cast<int>(traj.tokens.size()) < max_len) {
      TokenDistribution d = next_distribution(*this, s);
      const double mass = d.listed_mass();
      const double u = rng.uniform() * mass;
      double acc = 0.0;
      TokenId pick = d.entries.back().token;
      for (const auto& e : d.entries) {
        acc += e.prob;
        if (u < acc) {
          pick = e.token;
          break;
        }
      }
      traj.tokens.push_back(pick);
      if (pick == v.eos()) break;
      s.generated.push_back(pick);
    }
    out.push_back(std::move(traj));
  }
  return out;
}

TokenDistribution next_distribution(const AgentPolicy& agent, const State& state, int want_top) {
  if (state.terminal || (!state.generated.empty() && state.generated.back() == agent.vocab().eos()))
    throw Error(ErrorKind::contract, "next_distribution on a terminal state (agent '" + agent.name() + "')");
  if (want_top < 0) throw Error(ErrorKind::contract, "want_top must be positive or kAllTokens");
  TokenDistribution d;
  try {
    d = agent.query(state, want_top);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::contract || e.kind() == ErrorKind::out_of_vocab) throw;
    throw Error(e.kind(), "agent '" + agent.name() + "': " + e.detail());
  } catch (const std::exception& e) {
    throw Error(ErrorKind::backend, "agent '" + agent.name() + "': " + e.what());
  }
  d.sort_canonical();
  if (want_top != kAllTokens) d = d.truncated(want_top);
  try {
    d.validate(agent.vocab());
  } catch (const Error& e) {
    throw Error(ErrorKind::backend, "agent '" + agent.name() + "' returned an invalid distribution: " + e.detail());
  }
  return d;
}

std::vector<TokenId> top_k_candidates(const TokenDistribution& dist, int k) {
  if (k < 1) throw Error(ErrorKind::contract, "top_k must be >= 1");
  TokenDistribution d = dist;
  d.sort_canonical();
  std::vector<TokenId> out;
  for (const auto& e : d.entries) {
    if (static_cast<int>(out.size()) == k) break;
    out.push_back(e.token);
  }
  return out;
}

std::vector<TokenId> top_k_candidates(const AgentPolicy& agent, const State& state, int k) {
  if (k < 1) throw Error(ErrorKind::contract, "top_k must be >= 1");
  return top_k_candidates(next_distribution(agent, state, agent.complete_distributions() ? kAllTokens : k), k);
}

std::vector<Trajectory> sample_continuations(const AgentPolicy& agent, const State& state, int n, int max_len,
                                             std::uint64_t seed) {
  if (n < 1) throw Error(ErrorKind::contract, "sampling needs n >= 1");
  if (max_len < 1) throw Error(ErrorKind::contract, "sampling needs max_len >= 1");
  const Vocab& v = agent.vocab();
  if (state.terminal || (!state.generated.empty() && state.generated.back() == v.eos()))
    throw Error(ErrorKind::contract, "sampling from a terminal state");
  std::vector<Trajectory> out;
  try {
    out = agent.continuations(state, n, max_len, seed);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::contract) throw;
    throw Error(e.kind(), "agent '" + agent.name() + "': " + e.detail());
  }
  if (static_cast<int>(out.size()) != n)
    throw Error(ErrorKind::backend, "agent '" + agent.name() + "' returned " + std::to_string(out.size()) +
                                        " continuations, expected " + std::to_string(n));
  for (const auto& t : out) {
    if (static_cast<int>(t.tokens.size()) > max_len)
      throw Error(ErrorKind::backend, "agent '" + agent.name() + "' continuation exceeds max_len");
    for (std::size_t i = 0; i < t.tokens.size(); ++i) {
      if (!v.contains(t.tokens[i]))
        throw Error(ErrorKind::backend, "agent '" + agent.name() + "' continuation has out-of-vocab token");
      if (t.tokens[i] == v.eos() && i + 1 != t.tokens.size())
        throw Error(ErrorKind::backend, "agent '" + agent.name() + "' continuation runs past EOS");
    }
  }
  return out;
}

std::vector<Trajectory> sample_rollouts(const AgentPolicy& agent, const State& state, TokenId z, int n, int max_len,
                                        std::uint64_t seed) {
  if (n < 1) throw Error(ErrorKind::contract, "sample_rollouts needs n >= 1");
  if (max_len < 1) throw Error(ErrorKind::contract, "sample_rollouts needs max_len >= 1");
  const Vocab& v = agent.vocab();
  if (state.terminal || (!state.generated.empty() && state.generated.back() == v.eos()))
    throw Error(ErrorKind::contract, "sample_rollouts on a terminal state");
  v.check(z);
  if (z == v.eos()) return std::vector<Trajectory>(static_cast<std::size_t>(n));

  State next = state;
  next.generated.push_back(z);
  const Tokens ctx = next.context();
  std::uint64_t salt = hash_ints<TokenId>(ctx, agent.id());
  salt = splitmix64(salt ^ static_cast<std::uint64_t>(n)) ^ static_cast<std::uint64_t>(max_len);
  return sample_continuations(agent, next, n, max_len, mix_seed(seed, salt));
}

double token_kl(const TokenDistribution& p, const TokenDistribution& q) {
  std::set<TokenId> listed;
  for (const auto& e : p.entries) listed.insert(e.token);
  for (const auto& e : q.entries) listed.insert(e.token);

  double kl = 0.0;
  double p_known = 0.0;
  double q_known = 0.0;
  for (TokenId t : listed) {
    const auto pt = p.prob(t);
    const auto qt = q.prob(t);
    if (!pt || !qt) continue;  // lumped into the residual bucket
    p_known += *pt;
    q_known += *qt;
    if (*pt <= 0.0) continue;
    if (*qt <= 0.0)
      throw Error(ErrorKind::support, "KL support violation: p(" + std::to_string(t) + ") > 0 but q(" +
                                          std::to_string(t) + ") = 0");
    kl += *pt * std::log(*pt / *qt);
  }
  if (!(p.complete && q.complete)) {
    const double p_res = std::max(0.0, 1.0 - p_known);
    const double q_res = std::max(0.0, 1.0 - q_known);
    if (p_res > 1e-12) {
      if (q_res <= 0.0) throw Error(ErrorKind::support, "KL support violation: p has residual tail mass but q has none");
      kl += p_res * std::log(p_res / q_res);
    }
  }
  return std::max(0.0, kl);
}

std::vector<Tokens> enumerate_responses(const Vocab& vocab, const Tokens& generated, int horizon) {
  const int remaining = horizon - static_cast<int>(generated.size());
  if (!enumeration_bound(vocab.size(), remaining))
    throw Error(ErrorKind::guard, "response space |V|^" + std::to_string(remaining) + " exceeds 1e6");
  std::vector<Tokens> out;
  Tokens cur = generated;
  auto rec = [&](auto&& self) -> void {
    const bool done = (!cur.empty() && cur.back() == vocab.eos()) || static_cast<int>(cur.size()) >= horizon;
    if (done) {
      out.push_back(cur);
      return;
    }
    for (TokenId t = 0; t < vocab.size(); ++t) {
      cur.push_back(t);
      self(self);
      cur.pop_back();
    }
  };
  rec(rec);
  return out;
}

std::vector<WeightedContinuation> enumerate_continuations(const AgentPolicy& agent, const State& start, int horizon) {
  const Vocab& v = agent.vocab();
  const int remaining = horizon - static_cast<int>(start.generated.size());
  if (!enumeration_bound(v.size(), remaining))
    throw Error(ErrorKind::guard, "continuation space |V|^" + std::to_string(remaining) + " exceeds 1e6");
  std::vector<WeightedContinuation> out;
  State s = start;
  Tokens cont;
  auto rec = [&](auto&& self, double prob) -> void {
    if (is_terminal(s, v, horizon)) {
      out.push_back({cont, prob});
      return;
    }
    TokenDistribution d = next_distribution(agent, s);
    if (!d.complete) throw Error(ErrorKind::capability, "agent '" + agent.name() + "' cannot report complete rows");
    for (const auto& e : d.entries) {
      if (e.prob <= 0.0) continue;
      s.generated.push_back(e.token);
      cont.push_back(e.token);
      self(self, prob * e.prob);
      cont.pop_back();
      s.generated.pop_back();
    }
  };
  rec(rec, 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Toy policies

TokenDistribution UniformPolicy::query(const State&, int) const {
  return TokenDistribution::from_dense(std::vector<double>(static_cast<std::size_t>(vocab_.size()), 1.0 / vocab_.size()));
}

TabularPolicy::TabularPolicy(Vocab vocab, Table rows, std::optional<std::vector<double>> default_row, std::string name)
    : vocab_(std::move(vocab)), rows_(std::move(rows)), default_row_(std::move(default_row)), name_(std::move(name)) {
  std::uint64_t h = fnv1a(name_);
  for (const auto& [ctx, row] : rows_) {
    vocab_.check(ctx);
    check_row(vocab_, row, "tabular policy '" + name_ + "' context " + describe(ctx));
    h = hash_ints<TokenId>(ctx, h);
    for (double p : row) h = splitmix64(h ^ double_bits(p));
  }
  if (default_row_) {
    check_row(vocab_, *default_row_, "tabular policy '" + name_ + "' default row");
    for (double p : *default_row_) h = splitmix64(h ^ double_bits(p));
  }
  id_ = h;
}

const std::vector<double>& TabularPolicy::row(const Tokens& context) const {
  auto it = rows_.find(context);
  if (it != rows_.end()) return it->second;
  if (default_row_) return *default_row_;
  throw Error(ErrorKind::table_miss, "tabular policy '" + name_ + "' has no row for context " + describe(context));
}

TokenDistribution TabularPolicy::query(const State& state, int) const {
  return TokenDistribution::from_dense(row(state.context()));
}

NGramPolicy::NGramPolicy(Vocab vocab, int order, double lambda, std::string name)
    : vocab_(std::move(vocab)), order_(order), lambda_(lambda), name_(std::move(name)) {
  if (order_ < 1) throw Error(ErrorKind::contract, "n-gram order must be >= 1");
  if (!(lambda_ > 0.0)) throw Error(ErrorKind::contract, "n-gram smoothing lambda must be > 0");
}

Tokens NGramPolicy::history_of(const Tokens& context) const {
  const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(order_ - 1), context.size());
  return Tokens(context.end() - static_cast<std::ptrdiff_t>(keep), context.end());
}

void NGramPolicy::add_count(const Tokens& history, TokenId next, double count) {
  vocab_.check(history);
  vocab_.check(next);
  auto& row = counts_[history_of(history)];
  if (row.empty()) row.assign(static_cast<std::size_t>(vocab_.size()), 0.0);
  row[static_cast<std::size_t>(next)] += count;
}

void NGramPolicy::observe(const Tokens& sequence) {
  for (std::size_t i = 0; i < sequence.size(); ++i)
    add_count(Tokens(sequence.begin(), sequence.begin() + static_cast<std::ptrdiff_t>(i)), sequence[i]);
}

std::uint64_t NGramPolicy::id() const {
  std::uint64_t h = splitmix64(fnv1a(name_) ^ static_cast<std::uint64_t>(order_)) ^ double_bits(lambda_);
  for (const auto& [hist, row] : counts_) {
    h = hash_ints<TokenId>(hist, h);
    for (double c : row) h = splitmix64(h ^ double_bits(c));
  }
  return h;
}

TokenDistribution NGramPolicy::query(const State& state, int) const {
  const std::size_t n = static_cast<std::size_t>(vocab_.size());
  std::vector<double> probs(n, 0.0);
  auto it = counts_.find(history_of(state.context()));
  double total = 0.0;
  if (it != counts_.end())
    for (double c : it->second) total += c;
  const double denom = total + lambda_ * static_cast<double>(n);
  for (std::size_t t = 0; t < n; ++t) {
    const double c = it != counts_.end() ? it->second[t] : 0.0;
    probs[t] = (c + lambda_) / denom;
  }
  return TokenDistribution::from_dense(probs);
}

GibbsTiltedPolicy::GibbsTiltedPolicy(PolicyPtr base, RewardPtr reward, double beta, Tokens prompt, int horizon,
                                     std::string name)
    : base_(std::move(base)),
      reward_(std::move(reward)),
      beta_(beta),
      prompt_(std::move(prompt)),
      horizon_(horizon),
      name_(std::move(name)) {
  if (!base_ || !reward_) throw Error(ErrorKind::contract, "gibbs policy needs a base policy and a reward");
  if (!(beta_ > 0.0)) throw Error(ErrorKind::contract, "gibbs policy needs beta > 0");
  if (horizon_ < 1) throw Error(ErrorKind::contract, "gibbs policy needs horizon >= 1");
  if (!enumeration_bound(base_->vocab().size(), horizon_))
    throw Error(ErrorKind::guard, "gibbs policy trajectory space |V|^T exceeds 1e6");
  base_->vocab().check(prompt_);
  build({});
  std::uint64_t h = splitmix64(fnv1a(name_) ^ base_->id()) ^ reward_->id();
  h = splitmix64(h ^ double_bits(beta_)) ^ static_cast<std::uint64_t>(horizon_);
  id_ = hash_ints<TokenId>(prompt_, h);
}

double GibbsTiltedPolicy::build(const Tokens& generated) {
  const Vocab& v = base_->vocab();
  State s{prompt_, generated, false};
  if (is_terminal(s, v, horizon_)) {
    const double lw = trajectory_reward(*reward_, prompt_, generated) / beta_;
    log_w_[generated] = lw;
    return lw;
  }
  TokenDistribution d = next_distribution(*base_, s);
  if (!d.complete) throw Error(ErrorKind::capability, "gibbs base policy must report complete rows");
  std::vector<double> logs(static_cast<std::size_t>(v.size()), -std::numeric_limits<double>::infinity());
  double mx = -std::numeric_limits<double>::infinity();
  for (const auto& e : d.entries) {
    if (e.prob <= 0.0) continue;
    Tokens child = generated;
    child.push_back(e.token);
    const double l = std::log(e.prob) + build(child);
    logs[static_cast<std::size_t>(e.token)] = l;
    mx = std::max(mx, l);
  }
  double sum = 0.0;
  for (double l : logs)
    if (std::isfinite(l)) sum += std::exp(l - mx);
  const double lw = mx + std::log(sum);
  std::vector<double> row(logs.size(), 0.0);
  for (std::size_t t = 0; t < logs.size(); ++t)
    if (std::isfinite(logs[t])) row[t] = std::exp(logs[t] - lw);
  log_w_[generated] = lw;
  rows_[generated] = std::move(row);
  return lw;
}

double GibbsTiltedPolicy::log_partition(const Tokens& generated) const {
  auto it = log_w_.find(generated);
  if (it == log_w_.end())
    throw Error(ErrorKind::table_miss, "gibbs policy '" + name_ + "' has no prefix " + describe(generated));
  return it->second;
}

TokenDistribution GibbsTiltedPolicy::query(const State& state, int) const {
  if (state.prompt != prompt_)
    throw Error(ErrorKind::contract, "gibbs policy '" + name_ + "' is defined for prompt " + describe(prompt_) +
                                         " only, got " + describe(state.prompt));
  auto it = rows_.find(state.generated);
  if (it == rows_.end())
    throw Error(ErrorKind::table_miss, "gibbs policy '" + name_ + "' has no row for prefix " + describe(state.generated));
  return TokenDistribution::from_dense(it->second);
}

// ---------------------------------------------------------------------------
// AgentPool

AgentPool::AgentPool(std::vector<PolicyPtr> agents, RefSelector ref) : agents_(std::move(agents)) {
  if (agents_.empty()) throw Error(ErrorKind::contract, "agent pool needs at least one agent");
  for (const auto& a : agents_)
    if (!a) throw Error(ErrorKind::contract, "agent pool contains a null agent");
  if (ref.kind == RefSelector::Kind::uniform) {
    ref_ = std::make_shared<UniformPolicy>(agents_.front()->vocab());
  } else {
    if (ref.index < 0 || static_cast<std::size_t>(ref.index) >= agents_.size())
      throw Error(ErrorKind::config, "ref agent index " + std::to_string(ref.index) + " outside pool of " +
                                         std::to_string(agents_.size()));
    ref_index_ = static_cast<std::size_t>(ref.index);
    ref_ = agents_[*ref_index_];
  }
  check_vocab();
}

AgentPool::AgentPool(std::vector<PolicyPtr> agents, PolicyPtr ref) : agents_(std::move(agents)), ref_(std::move(ref)) {
  if (agents_.empty()) throw Error(ErrorKind::contract, "agent pool needs at least one agent");
  if (!ref_) throw Error(ErrorKind::contract, "agent pool needs a reference policy");
  for (std::size_t i = 0; i < agents_.size(); ++i) {
    if (!agents_[i]) throw Error(ErrorKind::contract, "agent pool contains a null agent");
    if (agents_[i] == ref_ && !ref_index_) ref_index_ = i;
  }
  check_vocab();
}

void AgentPool::check_vocab() const {
  const Vocab& v = agents_.front()->vocab();
  for (const auto& a : agents_)
    if (!a->vocab().same_shape(v))
      throw Error(ErrorKind::contract, "agent '" + a->name() + "' vocab (size " + std::to_string(a->vocab().size()) +
                                           ", eos " + std::to_string(a->vocab().eos()) +
                                           ") differs from the pool's (size " + std::to_string(v.size()) + ", eos " +
                                           std::to_string(v.eos()) + ")");
  if (!ref_->vocab().same_shape(v)) throw Error(ErrorKind::contract, "reference policy vocab differs from the pool's");
}

}  // namespace collab
