#include <doctest.h>

#include <cmath>
#include <cstdlib>

#include "collab/decoder.hpp"
#include "collab/remote.hpp"
#include "support.hpp"

using namespace collab;
using namespace collab::test;

namespace {

Endpoint fast(const MockServer& s, int attempts = 3) {
  Endpoint ep;
  ep.url = s.url();
  ep.timeout_ms = 5000;
  ep.attempts = attempts;
  ep.backoff_ms = {1};
  return ep;
}

MockOptions opts(PolicyPtr p, RewardPtr r = nullptr) {
  MockOptions o;
  o.policy = std::move(p);
  o.reward = std::move(r);
  return o;
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::usage;
}

// Tokens {EOS=0, A=1, B=2} with row {A: 0.5, B: 0.3, EOS: 0.2}.
PolicyPtr skewed() { return constant_row(abc(), {0.2, 0.5, 0.3}, "skewed"); }

}  // namespace

TEST_CASE("protocol version") {
  CHECK(protocol_version_supported("1.0"));
  CHECK(protocol_version_supported("1.7"));
  CHECK(protocol_version_supported("1"));
  CHECK_FALSE(protocol_version_supported("0.9"));
  CHECK_FALSE(protocol_version_supported("2.0"));
  CHECK_FALSE(protocol_version_supported("1x"));
}

TEST_CASE("endpoint validation and env auth") {
  Endpoint ep;
  ep.url = "http://127.0.0.1:1";
  CHECK_NOTHROW(ep.validate());
  ep.attempts = 0;
  CHECK_THROWS_AS(ep.validate(), Error);
  ep.attempts = 1;
  ep.timeout_ms = 0;
  CHECK_THROWS_AS(ep.validate(), Error);
  ep.timeout_ms = 10;
  ep.url = "ftp://x";
  CHECK_THROWS_AS(ep.validate(), Error);
  CHECK(Endpoint{}.backoff_for(0) == 100);
  CHECK(Endpoint{}.backoff_for(9) == 1600);

  ep.auth_token = "from-config";
  ::setenv("COLLAB_API_TOKEN", "from-env", 1);
  CHECK(*ep.with_env_auth().auth_token == "from-env");
  ::unsetenv("COLLAB_API_TOKEN");
  CHECK(*ep.with_env_auth().auth_token == "from-config");
}

TEST_CASE("fetch_info") {
  MockServer big(opts(std::make_shared<UniformPolicy>(Vocab(32000, 2))));
  big.start();
  RemoteClient c(fast(big));
  const auto inf = c.fetch_info();
  CHECK(inf.vocab_size == 32000);
  CHECK(inf.eos_id == 2);
  CHECK(inf.version == "1.0");
  CHECK_FALSE(inf.reward_bounds);

  SUBCASE("version mismatch") {
    auto o = opts(skewed());
    o.version = "0.9";
    MockServer old(o);
    old.start();
    CHECK(kind_of([&] { RemoteClient(fast(old)).fetch_info(); }) == ErrorKind::version_mismatch);
  }
  SUBCASE("pooling endpoints with different vocabularies") {
    MockServer other(opts(std::make_shared<UniformPolicy>(Vocab(32001, 2))));
    other.start();
    const auto inf2 = RemoteClient(fast(other)).fetch_info();
    CHECK(kind_of([&] { check_pool_compatible({inf, inf2}); }) == ErrorKind::config);
    CHECK_NOTHROW(check_pool_compatible({inf, inf}));
  }
  SUBCASE("unreachable") {
    Endpoint ep;
    ep.url = "http://127.0.0.1:1";
    ep.attempts = 2;
    ep.backoff_ms = {1};
    ep.timeout_ms = 200;
    CHECK(kind_of([&] { RemoteClient(ep).fetch_info(); }) == ErrorKind::network);
  }
}

TEST_CASE("fetch_logprobs") {
  MockServer s(opts(skewed()));
  s.start();
  RemoteClient c(fast(s));

  const auto d = c.fetch_logprobs({}, 2);
  REQUIRE(d.entries.size() == 2);
  CHECK(d.entries[0].token == A);
  CHECK(d.entries[0].prob == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(d.entries[1].prob == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(d.tail_mass == doctest::Approx(0.2).epsilon(1e-12));
  CHECK_FALSE(d.complete);
  CHECK_NOTHROW(d.validate(abc()));

  const auto full = c.fetch_logprobs({A}, 10);
  CHECK(full.complete);
  CHECK(full.tail_mass == 0.0);
  CHECK(full.entries.size() == 3);
  CHECK_NOTHROW(full.validate(abc()));

  CHECK(kind_of([&] { c.fetch_logprobs({7}, 2); }) == ErrorKind::out_of_vocab);

  SUBCASE("normalization off by 1e-3") {
    auto o = opts(skewed());
    o.normalization_error = 1e-3;
    MockServer bad(o);
    bad.start();
    CHECK(kind_of([&] { RemoteClient(fast(bad)).fetch_logprobs({}, 2); }) == ErrorKind::conformance);
  }
  SUBCASE("deviation inside 1e-6 is renormalised") {
    auto o = opts(skewed());
    o.normalization_error = 5e-7;
    MockServer near(o);
    near.start();
    const auto nd = RemoteClient(fast(near)).fetch_logprobs({}, 2);
    CHECK(std::abs(sum(nd) - 1.0) <= 1e-12);
  }
}

TEST_CASE("fetch_rollouts") {
  auto o = opts(skewed());
  o.scripted[{A}] = {{B, EOS}, {A, A, EOS}};
  MockServer s(o);
  s.start();
  RemoteClient c(fast(s));

  const auto scripted = c.fetch_rollouts({A}, 2, 4, 1.0, 0);
  CHECK(scripted == std::vector<Tokens>{{B, EOS}, {A, A, EOS}});

  for (const auto& r : c.fetch_rollouts({}, 16, 1, 1.0, 3)) CHECK(r.size() <= 1);
  CHECK(c.fetch_rollouts({B}, 5, 6, 1.0, 11) == c.fetch_rollouts({B}, 5, 6, 1.0, 11));
  CHECK(c.fetch_rollouts({B}, 5, 6, 0.5, 11) == c.fetch_rollouts({B}, 5, 6, 0.5, 11));

  SUBCASE("over-length continuations are rejected") {
    auto ol = opts(skewed());
    ol.overlong_rollouts = true;
    MockServer bad(ol);
    bad.start();
    CHECK(kind_of([&] { RemoteClient(fast(bad)).fetch_rollouts({}, 2, 3, 1.0, 0); }) == ErrorKind::conformance);
  }
}

TEST_CASE("fetch_reward") {
  const auto table = std::make_shared<TabularTrajectoryReward>(
      std::map<Tokens, double>{{{A, EOS}, 0.73}, {{}, 0.1}}, RewardBounds{0.0, 1.0});
  MockServer s(opts(skewed(), table));
  s.start();
  auto client = std::make_shared<RemoteClient>(fast(s));
  CHECK(client->fetch_reward({}, {A, EOS}) == 0.73);
  CHECK(client->fetch_reward({}, {}) == 0.1);
  const RemoteReward rr(client);
  CHECK(rr.bounds().hi == 1.0);
  CHECK(trajectory_reward(rr, {}, {A, EOS}) == 0.73);
  // A response outside the table is a server-side error, not a retry.
  CHECK(kind_of([&] { client->fetch_reward({}, {B}); }) == ErrorKind::backend);

  SUBCASE("out of declared bounds") {
    auto o = opts(skewed(), table);
    o.out_of_bounds_reward = true;
    MockServer bad(o);
    bad.start();
    CHECK(kind_of([&] { RemoteClient(fast(bad)).fetch_reward({}, {A, EOS}); }) == ErrorKind::conformance);
  }
  SUBCASE("no bounds declared") {
    MockServer plain(opts(skewed()));
    plain.start();
    CHECK(kind_of([&] { RemoteReward(std::make_shared<RemoteClient>(fast(plain))); }) == ErrorKind::capability);
  }
}

TEST_CASE("retries") {
  SUBCASE("attempts - 1 failures then success") {
    auto o = opts(skewed());
    o.fail_first_n = 2;
    MockServer s(o);
    s.start();
    RemoteClient c(fast(s, 3));
    CHECK(c.fetch_info().vocab_size == 3);
    CHECK(c.requests_sent() == 3);
  }
  SUBCASE("attempts failures give a network error with the count") {
    auto o = opts(skewed());
    o.fail_first_n = 3;
    MockServer s(o);
    s.start();
    try {
      RemoteClient(fast(s, 3)).fetch_info();
      FAIL("expected a network error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::network);
      CHECK(std::string(e.what()).find("3 attempt(s)") != std::string::npos);
    }
  }
}

TEST_CASE("remote agent is observationally equivalent to the table it serves") {
  const Vocab v = abc();
  const auto local = table(v,
                           {{{}, {0.1, 0.6, 0.3}},
                            {{A}, {0.5, 0.2, 0.3}},
                            {{B}, {0.2, 0.2, 0.6}},
                            {{A, B}, {0.3, 0.3, 0.4}}},
                           std::vector<double>{0.7, 0.2, 0.1}, "tab");
  MockServer s(opts(local));
  s.start();
  const auto remote = std::make_shared<RemoteAgent>(std::make_shared<RemoteClient>(fast(s)));
  CHECK_FALSE(remote->complete_distributions());

  for (const Tokens& ctx : std::vector<Tokens>{{}, {A}, {B}, {A, B}, {B, B, A}}) {
    const State st{{}, ctx, false};
    const auto dl = next_distribution(*local, st);
    const auto dr = next_distribution(*remote, st);
    REQUIRE(dr.entries.size() == dl.entries.size());
    for (std::size_t i = 0; i < dl.entries.size(); ++i) {
      CHECK(dr.entries[i].token == dl.entries[i].token);
      CHECK(std::abs(dr.entries[i].prob - dl.entries[i].prob) <= 1e-12);
    }
    CHECK(remote->continuations(st, 6, 4, 5) == local->continuations(st, 6, 4, 5));
    CHECK(top_k_candidates(*remote, st, 2) == top_k_candidates(*local, st, 2));
  }

  DecoderConfig cfg;
  cfg.max_new_tokens = 4;
  cfg.top_k = 2;
  cfg.q_method = QMethod::prefix_proxy;
  const auto r = keyword({B}, 0.5, {0.0, 2.0});
  const AgentPool lp({local, constant_row(v, {0.3, 0.4, 0.3})}, RefSelector::uniform());
  const AgentPool rp({remote, constant_row(v, {0.3, 0.4, 0.3})}, RefSelector::uniform());
  const auto tl = collab_decode(lp, *r, {A}, cfg, {});
  const auto tr = collab_decode(rp, *r, {A}, cfg, {});
  CHECK(tl.output == tr.output);
  for (std::size_t i = 0; i < tl.steps.size(); ++i)
    for (std::size_t c = 0; c < tl.steps[i].candidates.size(); ++c)
      CHECK(std::abs(tl.steps[i].candidates[c].kl - tr.steps[i].candidates[c].kl) <= 1e-9);
}

TEST_CASE("backend failure surfaces with the agent name and a partial trace") {
  auto o = opts(skewed());
  o.fail_prefix = Tokens{B};
  MockServer s(o);
  s.start();
  Endpoint ep = fast(s, 2);
  const auto remote = std::make_shared<RemoteAgent>(std::make_shared<RemoteClient>(ep), "flaky");
  CHECK_NOTHROW(next_distribution(*remote, State{{A}, {}, false}));
  try {
    next_distribution(*remote, State{{B}, {}, false});
    FAIL("expected a network error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::network);
    CHECK(std::string(e.what()).find("flaky") != std::string::npos);
  }
}

TEST_CASE("conformance suite") {
  const auto reward = keyword({A}, 0.5, {0.0, 1.0});
  SUBCASE("bundled mock passes") {
    MockServer s(opts(skewed(), reward));
    s.start();
    const auto rep = run_conformance(fast(s));
    for (const auto& c : rep.checks) CHECK_MESSAGE(c.passed, c.name << ": " << c.message);
    CHECK(rep.passed());
    CHECK(rep.find("reward_bounds"));
  }
  SUBCASE("broken mock fails with the declared kinds") {
    auto o = opts(skewed(), reward);
    o.normalization_error = 1e-3;
    o.out_of_bounds_reward = true;
    MockServer s(o);
    s.start();
    const auto rep = run_conformance(fast(s));
    CHECK_FALSE(rep.passed());
    REQUIRE(rep.find("logprobs_topk"));
    CHECK(*rep.find("logprobs_topk")->error == ErrorKind::conformance);
    REQUIRE(rep.find("reward_bounds"));
    CHECK(*rep.find("reward_bounds")->error == ErrorKind::conformance);
    CHECK(rep.find("info")->passed);
    CHECK(rep.find("rollout_shape")->passed);
    CHECK(rep.serialize().find("\"conformance\"") != std::string::npos);
  }
  SUBCASE("server without a reward model skips reward checks") {
    MockServer s(opts(skewed()));
    s.start();
    const auto rep = run_conformance(fast(s));
    CHECK(rep.passed());
    CHECK_FALSE(rep.find("reward_bounds"));
  }
}

TEST_CASE("concurrent requests through one client") {
  MockServer s(opts(skewed()));
  s.start();
  Endpoint ep = fast(s);
  ep.max_in_flight = 2;
  RemoteClient c(ep);
  std::vector<std::thread> ts;
  std::atomic<int> ok{0};
  for (int i = 0; i < 8; ++i)
    ts.emplace_back([&] {
      for (int j = 0; j < 10; ++j) ok += c.fetch_logprobs({A}, 3).complete;
    });
  for (auto& t : ts) t.join();
  CHECK(ok == 80);
}
