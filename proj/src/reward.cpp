#include "collab/reward.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "collab/rng.hpp"

namespace collab {

namespace {

void check_bounds(const RewardModel& r, double v) {
  const RewardBounds b = r.bounds();
  if (!std::isfinite(v) || !b.contains(v)) {
    std::ostringstream os;
    os.precision(17);
    os << "reward '" << r.name() << "' scored " << v << " outside declared bounds [" << b.lo << ", " << b.hi << "]";
    throw Error(ErrorKind::backend, os.str());
  }
}

}  // namespace

std::uint64_t RewardModel::id() const { return fnv1a(name()); }

double RewardModel::score_prefix(const Tokens&, const Tokens&) const {
  throw Error(ErrorKind::capability, "reward '" + name() + "' does not support prefix scoring");
}

double trajectory_reward(const RewardModel& r, const Tokens& prompt, const Tokens& response) {
  const double v = r.score(prompt, response);
  check_bounds(r, v);
  return v;
}

double prefix_reward(const RewardModel& r, const Tokens& prompt, const Tokens& partial) {
  if (!r.supports_prefix())
    throw Error(ErrorKind::capability, "reward '" + r.name() + "' does not support prefix scoring");
  const double v = r.score_prefix(prompt, partial);
  check_bounds(r, v);
  return v;
}

KeywordReward::KeywordReward(std::set<TokenId> targets, double weight, RewardBounds bounds)
    : targets_(std::move(targets)), weight_(weight), bounds_(bounds) {
  if (!(bounds_.lo <= bounds_.hi)) throw Error(ErrorKind::contract, "keyword reward bounds must satisfy lo <= hi");
}

double KeywordReward::score(const Tokens&, const Tokens& response) const {
  const auto hits = std::count_if(response.begin(), response.end(), [&](TokenId t) { return targets_.contains(t); });
  return std::clamp(weight_ * static_cast<double>(hits), bounds_.lo, bounds_.hi);
}

double KeywordReward::score_prefix(const Tokens& prompt, const Tokens& partial) const { return score(prompt, partial); }

std::string KeywordReward::name() const {
  std::ostringstream os;
  os.precision(17);
  os << "keyword{";
  bool first = true;
  for (TokenId t : targets_) {
    os << (first ? "" : ",") << t;
    first = false;
  }
  os << "}*" << weight_ << "[" << bounds_.lo << "," << bounds_.hi << "]";
  return os.str();
}

TabularTrajectoryReward::TabularTrajectoryReward(std::map<Tokens, double> table, RewardBounds bounds, std::string name)
    : table_(std::move(table)), bounds_(bounds), name_(std::move(name)) {
  std::uint64_t h = fnv1a(name_);
  for (const auto& [tokens, v] : table_) {
    if (!std::isfinite(v) || !bounds_.contains(v))
      throw Error(ErrorKind::contract, "tabular reward entry outside declared bounds");
    h = hash_ints<TokenId>(tokens, h);
    std::uint64_t bits;
    static_assert(sizeof(bits) == sizeof(v));
    std::memcpy(&bits, &v, sizeof(v));
    h = splitmix64(h ^ bits);
  }
  id_ = h;
}

double TabularTrajectoryReward::score(const Tokens&, const Tokens& response) const {
  auto it = table_.find(response);
  if (it == table_.end()) {
    std::string s;
    for (TokenId t : response) s += (s.empty() ? "" : " ") + std::to_string(t);
    throw Error(ErrorKind::table_miss, "trajectory [" + s + "] not in reward table '" + name_ + "'");
  }
  return it->second;
}

BlendReward::BlendReward(std::vector<Component> components) : components_(std::move(components)) {
  if (components_.empty()) throw Error(ErrorKind::contract, "blend reward needs at least one component");
  double total = 0.0;
  bounds_ = {0.0, 0.0};
  for (const auto& [w, r] : components_) {
    if (!(w >= 0.0) || !r) throw Error(ErrorKind::contract, "blend weights must be >= 0 and components non-null");
    total += w;
    bounds_.lo += w * r->bounds().lo;
    bounds_.hi += w * r->bounds().hi;
  }
  if (std::abs(total - 1.0) > 1e-12) throw Error(ErrorKind::contract, "blend weights must sum to 1");
}

double BlendReward::score(const Tokens& prompt, const Tokens& response) const {
  double v = 0.0;
  for (const auto& [w, r] : components_) v += w * trajectory_reward(*r, prompt, response);
  return std::clamp(v, bounds_.lo, bounds_.hi);
}

bool BlendReward::supports_prefix() const {
  return std::all_of(components_.begin(), components_.end(), [](const Component& c) { return c.second->supports_prefix(); });
}

double BlendReward::score_prefix(const Tokens& prompt, const Tokens& partial) const {
  if (!supports_prefix()) return RewardModel::score_prefix(prompt, partial);
  double v = 0.0;
  for (const auto& [w, r] : components_) v += w * prefix_reward(*r, prompt, partial);
  return std::clamp(v, bounds_.lo, bounds_.hi);
}

std::string BlendReward::name() const {
  std::ostringstream os;
  os.precision(17);
  os << "blend(";
  for (std::size_t i = 0; i < components_.size(); ++i)
    os << (i ? "+" : "") << components_[i].first << "*" << components_[i].second->name();
  os << ")";
  return os.str();
}

std::string ConstantReward::name() const {
  std::ostringstream os;
  os.precision(17);
  os << "constant(" << value_ << ")";
  return os.str();
}

}  // namespace collab
