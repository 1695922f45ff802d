#pragma once

#include <doctest.h>

#include <functional>
#include <memory>
#include <set>

#include "collab/policy.hpp"
#include "collab/reward.hpp"

namespace collab::test {

// Vocab {EOS=0, A=1, B=2}.
inline Vocab abc() { return Vocab(3, 0, {"EOS", "A", "B"}); }
inline constexpr TokenId EOS = 0, A = 1, B = 2;

inline PolicyPtr table(const Vocab& v, TabularPolicy::Table rows, std::optional<std::vector<double>> def,
                       std::string name = "tabular") {
  return std::make_shared<TabularPolicy>(v, std::move(rows), std::move(def), std::move(name));
}

inline PolicyPtr constant_row(const Vocab& v, std::vector<double> row, std::string name = "const") {
  return table(v, {}, std::move(row), std::move(name));
}

inline RewardPtr keyword(std::set<TokenId> targets, double w = 1.0, RewardBounds b = {0.0, 3.0}) {
  return std::make_shared<KeywordReward>(std::move(targets), w, b);
}

/// Reward defined by a predicate over the response, tabulated over every
/// response reachable from an empty prefix.
inline RewardPtr tabulate(const Vocab& v, int horizon, const std::function<double(const Tokens&)>& f,
                          RewardBounds b = {0.0, 1.0}) {
  std::map<Tokens, double> t;
  for (const Tokens& r : enumerate_responses(v, {}, horizon)) t[r] = f(r);
  return std::make_shared<TabularTrajectoryReward>(std::move(t), b);
}

inline double sum(const TokenDistribution& d) { return d.listed_mass() + d.tail_mass; }

}  // namespace collab::test
