#include <doctest.h>

#include <numeric>

#include "collab/metrics.hpp"
#include "collab/rng.hpp"

using namespace collab;

TEST_CASE("average_reward") {
  CHECK(average_reward({1.0}) == 1.0);
  CHECK(average_reward({0.0, 1.0}) == 0.5);
  CHECK(average_reward({0.2, 0.4, 0.9}) == doctest::Approx(0.5));
  CHECK_THROWS_AS(average_reward({}), Error);
}

TEST_CASE("normalize_rewards") {
  const auto n = normalize_rewards({{"collab", 2.0}, {"x", 1.5}, {"y", 1.0}}, "collab", 1.0);
  CHECK(n.at("x") == 0.5);
  CHECK(n.at("y") == 0.0);
  CHECK(n.at("collab") == 1.0);
  try {
    normalize_rewards({{"collab", 1.0}}, "collab", 1.0);
    FAIL("expected degenerate error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::degenerate);
  }
  CHECK_THROWS_AS(normalize_rewards({{"x", 1.0}}, "collab", 0.0), Error);

  const auto per = normalize_rewards({{"collab", 3.0}, {"x", 2.0}}, "collab", {{"collab", 1.0}, {"x", 0.0}});
  CHECK(per.at("collab") == 1.0);
  CHECK(per.at("x") == doctest::Approx(2.0 / 3));  // (2 - 0) / (3 - 0)
}

TEST_CASE("property: the anchor maps to exactly 1 and normalisation is affine-invariant") {
  Rng rng(12);
  for (int trial = 0; trial < 500; ++trial) {
    std::map<std::string, double> means{{"collab", rng.uniform(-5, 5)}, {"a", rng.uniform(-5, 5)},
                                        {"b", rng.uniform(-5, 5)}};
    const double r_min = std::min({means["collab"], means["a"], means["b"]}) - rng.uniform(0.01, 1);
    const auto base = normalize_rewards(means, "collab", r_min);
    CHECK(base.at("collab") == 1.0);
    const double shift = rng.uniform(-10, 10), scale = rng.uniform(0.1, 10);
    std::map<std::string, double> moved;
    for (const auto& [k, v] : means) moved[k] = v * scale + shift;
    const auto out = normalize_rewards(moved, "collab", r_min * scale + shift);
    for (const auto& [k, v] : base) CHECK(out.at(k) == doctest::Approx(v).epsilon(1e-9));
  }
}

TEST_CASE("diversity") {
  CHECK(*diversity({0, 1, 2, 3, 4, 5, 6, 7}) == 1.0);
  CHECK(std::abs(*diversity({1, 2, 1, 2, 1, 2}) - 0.4 * 0.5 * (2.0 / 3.0)) <= 1e-12);
  CHECK(*diversity(Tokens(8, 3)) == doctest::Approx((1.0 / 7) * (1.0 / 6) * (1.0 / 5)));
  CHECK(*diversity(Tokens(8, 3)) == doctest::Approx(0.00476).epsilon(1e-3));
  CHECK_FALSE(diversity({1, 2, 3}));
  CHECK_FALSE(diversity({}));
}

TEST_CASE("property: diversity is invariant under relabeling and stays in [0, 1]") {
  Rng rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(6));
    std::vector<TokenId> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    Tokens t, u;
    const int len = 4 + static_cast<int>(rng.below(12));
    for (int i = 0; i < len; ++i) {
      t.push_back(static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(n))));
      u.push_back(perm[static_cast<std::size_t>(t.back())]);
    }
    const double d = *diversity(t);
    CHECK(d == *diversity(u));
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
  }
}

TEST_CASE("coherence with the token-count embedder") {
  const TokenCountEmbedder e(4);
  CHECK(*coherence({1, 2, 3}, {1, 2, 3}, e) == 1.0);
  CHECK(*coherence({1, 1}, {2, 3}, e) == 0.5);
  CHECK(*coherence({1, 1, 2}, {1, 2, 2}, e) == doctest::Approx(0.9));
  CHECK_FALSE(coherence({}, {1}, e));
  CHECK_FALSE(coherence({1}, {}, e));
}

TEST_CASE("property: coherence(p, p) = 1 for any non-empty prompt") {
  struct Hashing final : Embedder {
    std::vector<double> embed(const Tokens& t) const override {
      std::vector<double> v(5, 0.0);
      for (std::size_t i = 0; i < t.size(); ++i) v[(static_cast<std::size_t>(t[i]) * 7 + i) % 5] += 0.3 + t[i];
      return v;
    }
    std::string name() const override { return "hashing"; }
  } hashing;
  const TokenCountEmbedder counts(6);
  Rng rng(9);
  for (int trial = 0; trial < 300; ++trial) {
    Tokens p;
    const int len = 1 + static_cast<int>(rng.below(10));
    for (int i = 0; i < len; ++i) p.push_back(static_cast<TokenId>(rng.below(6)));
    CHECK(*coherence(p, p, counts) == 1.0);
    CHECK(*coherence(p, p, hashing) == 1.0);
  }
}

TEST_CASE("zero embeddings are absent") {
  struct Zero final : Embedder {
    std::vector<double> embed(const Tokens&) const override { return {0.0, 0.0}; }
    std::string name() const override { return "zero"; }
  } zero;
  CHECK_FALSE(coherence({1}, {1}, zero));
}

TEST_CASE("report aggregation and serialization") {
  const TokenCountEmbedder e(5);
  std::vector<PromptRow> rows;
  rows.push_back(score_output("single", 1, {1, 2}, {1, 2, 3, 4}, 0.5, e));
  rows.push_back(score_output("collab", 1, {1, 2}, {1, 2, 3, 4}, 1.0, e));
  rows.push_back(score_output("collab", 0, {1}, {1, 3}, 0.8, e));
  rows.push_back(score_output("single", 0, {1}, {1}, 0.2, e));
  PromptRow failed;
  failed.method = "bon";
  failed.status = "network";
  rows.push_back(failed);

  const auto rep = build_report({"collab", "single", "bon"}, rows);
  REQUIRE(rep.rows.size() == 5);
  CHECK(rep.rows[0].method == "collab");
  CHECK(rep.rows[0].prompt == 0);
  CHECK(rep.rows[4].method == "bon");
  CHECK(*rep.r_min == 0.2);
  CHECK(*rep.find("collab")->mean_reward == doctest::Approx(0.9));
  CHECK(*rep.find("collab")->normalized_reward == 1.0);
  CHECK(*rep.find("single")->normalized_reward == doctest::Approx((0.35 - 0.2) / (0.9 - 0.2)));
  CHECK_FALSE(rep.find("bon")->mean_reward);
  CHECK(rep.find("bon")->n_failed == 1);
  CHECK(rep.csv().rfind("method,prompt,reward,diversity,coherence,length,status\n", 0) == 0);
  CHECK(rep.csv().find("bon,0,,,,0,network\n") != std::string::npos);
  CHECK(rep.summary_json().find("\"r_min_mode\": \"global\"") != std::string::npos);

  const auto no_anchor = build_report({"single"}, {rows[0]});
  CHECK(no_anchor.warnings.size() == 1);
  CHECK_FALSE(no_anchor.methods[0].normalized_reward);

  const auto flat = build_report({"collab", "single"}, {rows[2], rows[3]}, {"single", false});
  CHECK(flat.warnings.size() == 1);  // anchor is the floor
}
