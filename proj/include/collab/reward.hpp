#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "collab/core.hpp"

namespace collab {

struct RewardBounds {
  double lo = 0.0;
  double hi = 1.0;

  bool contains(double v) const { return v >= lo && v <= hi; }
};

/// Trajectory-level target or latent reward. Implementations are pure:
/// identical inputs give bit-identical scores, always inside bounds().
class RewardModel {
 public:
  virtual ~RewardModel() = default;

  virtual double score(const Tokens& prompt, const Tokens& response) const = 0;
  virtual RewardBounds bounds() const = 0;
  virtual std::string name() const = 0;
  virtual std::uint64_t id() const;

  virtual bool supports_prefix() const { return false; }
  /// Score a partial response as if it were complete.
  virtual double score_prefix(const Tokens& prompt, const Tokens& partial) const;
};

using RewardPtr = std::shared_ptr<const RewardModel>;

/// Checked scoring: the result must lie in the declared bounds.
double trajectory_reward(const RewardModel& r, const Tokens& prompt, const Tokens& response);
double prefix_reward(const RewardModel& r, const Tokens& prompt, const Tokens& partial);

/// weight per occurrence of any target token, clipped to bounds.
class KeywordReward final : public RewardModel {
 public:
  KeywordReward(std::set<TokenId> targets, double weight, RewardBounds bounds);

  double score(const Tokens& prompt, const Tokens& response) const override;
  RewardBounds bounds() const override { return bounds_; }
  std::string name() const override;
  bool supports_prefix() const override { return true; }
  double score_prefix(const Tokens& prompt, const Tokens& partial) const override;

  const std::set<TokenId>& targets() const { return targets_; }
  double weight() const { return weight_; }

 private:
  std::set<TokenId> targets_;
  double weight_;
  RewardBounds bounds_;
};

/// Explicit reward per complete response. Lookups outside the table throw:
/// the table must be total over the enumerable trajectory space.
class TabularTrajectoryReward final : public RewardModel {
 public:
  TabularTrajectoryReward(std::map<Tokens, double> table, RewardBounds bounds, std::string name = "tabular");

  double score(const Tokens& prompt, const Tokens& response) const override;
  RewardBounds bounds() const override { return bounds_; }
  std::string name() const override { return name_; }
  std::uint64_t id() const override { return id_; }

  const std::map<Tokens, double>& table() const { return table_; }

 private:
  std::map<Tokens, double> table_;
  RewardBounds bounds_;
  std::string name_;
  std::uint64_t id_;
};

/// Convex combination of other rewards.
class BlendReward final : public RewardModel {
 public:
  using Component = std::pair<double, RewardPtr>;

  explicit BlendReward(std::vector<Component> components);

  double score(const Tokens& prompt, const Tokens& response) const override;
  RewardBounds bounds() const override { return bounds_; }
  std::string name() const override;
  bool supports_prefix() const override;
  double score_prefix(const Tokens& prompt, const Tokens& partial) const override;

  const std::vector<Component>& components() const { return components_; }

 private:
  std::vector<Component> components_;
  RewardBounds bounds_;
};

class ConstantReward final : public RewardModel {
 public:
  explicit ConstantReward(double value) : value_(value) {}

  double score(const Tokens&, const Tokens&) const override { return value_; }
  RewardBounds bounds() const override { return {value_, value_}; }
  std::string name() const override;
  bool supports_prefix() const override { return true; }
  double score_prefix(const Tokens&, const Tokens&) const override { return value_; }

 private:
  double value_;
};

}  // namespace collab
