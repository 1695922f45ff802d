#pragma once

// Brute-force reference for one switching step. Shares no code with the
// decoder or qeval: Q is a plain recursion over raw table rows, KL a direct
// sum, and the candidate sets an explicit sort.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "collab/policy.hpp"
#include "collab/reward.hpp"

namespace collab::oracle {

inline std::vector<double> dense(const AgentPolicy& a, const State& s) {
  const TokenDistribution d = a.query(s, kAllTokens);
  std::vector<double> row(static_cast<std::size_t>(a.vocab().size()), 0.0);
  for (const auto& e : d.entries) row[static_cast<std::size_t>(e.token)] = e.prob;
  return row;
}

inline bool ended(const State& s, const Vocab& v, int horizon) {
  return (!s.generated.empty() && s.generated.back() == v.eos()) || static_cast<int>(s.generated.size()) >= horizon;
}

inline double value(const AgentPolicy& a, const RewardModel& r, const State& s, int horizon) {
  if (ended(s, a.vocab(), horizon)) return r.score(s.prompt, s.generated);
  const auto row = dense(a, s);
  double v = 0.0;
  for (std::size_t t = 0; t < row.size(); ++t) {
    if (row[t] == 0.0) continue;
    State c = s;
    c.generated.push_back(static_cast<TokenId>(t));
    v += row[t] * value(a, r, c, horizon);
  }
  return v;
}

inline double q(const AgentPolicy& a, const RewardModel& r, const State& s, TokenId z, int horizon) {
  State c = s;
  c.generated.push_back(z);
  return value(a, r, c, horizon);
}

inline double kl(const std::vector<double>& p, const std::vector<double>& ref) {
  double k = 0.0;
  for (std::size_t t = 0; t < p.size(); ++t)
    if (p[t] > 0.0) k += p[t] * std::log(p[t] / ref[t]);
  return k;
}

/// Positive-probability tokens by descending probability, ties by id.
inline std::vector<TokenId> top_k(const std::vector<double>& row, int k) {
  std::vector<TokenId> ids;
  for (std::size_t t = 0; t < row.size(); ++t)
    if (row[t] > 0.0) ids.push_back(static_cast<TokenId>(t));
  std::stable_sort(ids.begin(), ids.end(), [&](TokenId a, TokenId b) {
    return row[static_cast<std::size_t>(a)] > row[static_cast<std::size_t>(b)];
  });
  if (static_cast<int>(ids.size()) > k) ids.resize(static_cast<std::size_t>(k));
  return ids;
}

struct Choice {
  int agent = -1;
  TokenId token = -1;
  double j = -std::numeric_limits<double>::infinity();
};

inline Choice best(const std::vector<PolicyPtr>& agents, const AgentPolicy& ref, const RewardModel& r, const State& s,
                   double alpha, int k, int horizon, double tol = 1e-12) {
  const auto ref_row = dense(ref, s);
  struct Cand {
    int agent;
    TokenId token;
    double j;
  };
  std::vector<Cand> all;
  for (std::size_t i = 0; i < agents.size(); ++i) {
    const auto row = dense(*agents[i], s);
    const double k_i = agents[i].get() == &ref ? 0.0 : kl(row, ref_row);
    for (TokenId z : top_k(row, k))
      all.push_back({static_cast<int>(i), z, q(*agents[i], r, s, z, horizon) - alpha * k_i});
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (const auto& c : all) mx = std::max(mx, c.j);
  Choice out;
  for (const auto& c : all) {
    if (c.j < mx - tol) continue;
    if (out.agent < 0 || std::pair(c.agent, c.token) < std::pair(out.agent, out.token)) out = {c.agent, c.token, c.j};
  }
  return out;
}

}  // namespace collab::oracle
