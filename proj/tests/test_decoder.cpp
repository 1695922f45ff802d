#include <doctest.h>

#include <cmath>

#include "collab/decoder.hpp"
#include "collab/theory.hpp"
#include "oracle.hpp"
#include "support.hpp"

using namespace collab;
using namespace collab::test;

namespace {

DecoderConfig exact(int T, double alpha = 1.0, int k = 10) {
  DecoderConfig c;
  c.max_new_tokens = T;
  c.alpha = alpha;
  c.top_k = k;
  c.q_method = QMethod::exact_dp;
  return c;
}

}  // namespace

TEST_CASE("single agent pool picks argmax Q") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto p = random_params(seed);
    p.n_agents = 1;
    const auto inst = gen_instance(p, seed);
    const AgentPool pool = inst.pool();
    const auto cfg = inst.decoder_config();
    for (const Tokens& g : inst.states()) {
      const State s = inst.state(g);
      const auto rec = collab_step(pool, *inst.target, s, cfg, {});
      double best = -1;
      for (TokenId z = 0; z < inst.vocab.size(); ++z)
        best = std::max(best, oracle::q(*inst.agents[0], *inst.target, s, z, inst.horizon()));
      CHECK(oracle::q(*inst.agents[0], *inst.target, s, rec.chosen_token, inst.horizon()) ==
            doctest::Approx(best).epsilon(1e-12));
    }
  }
}

TEST_CASE("KL price moves the choice to the cheaper agent") {
  const Vocab v = abc();
  // agent 0 is confident in A (far from the uniform reference), agent 1 mildly prefers B.
  const auto a0 = constant_row(v, {0.01, 0.98, 0.01}, "a0");
  const auto a1 = constant_row(v, {0.3, 0.3, 0.4}, "a1");
  const AgentPool pool({a0, a1}, RefSelector::uniform());
  const auto kw_a = keyword({A}, 1.8, {0.0, 1.8});
  const auto kw_b = keyword({B}, 1.6, {0.0, 1.6});
  const BlendReward r({{0.5, kw_a}, {0.5, kw_b}});  // prefix Q: A -> 0.9, B -> 0.8
  DecoderConfig cfg = exact(3, 0.0, 1);
  cfg.q_method = QMethod::prefix_proxy;

  auto rec = collab_step(pool, r, State{}, cfg, {});
  CHECK(rec.chosen_agent == 0);
  CHECK(rec.chosen_token == A);

  cfg.alpha = 1.0;
  rec = collab_step(pool, r, State{}, cfg, {});
  REQUIRE(rec.candidates.size() == 2);
  CHECK(rec.candidates[0].j_value == doctest::Approx(0.9 - rec.candidates[0].kl));
  CHECK(rec.candidates[0].j_value < rec.candidates[1].j_value);
  CHECK(rec.chosen_agent == 1);
  CHECK(rec.chosen_token == B);
}

TEST_CASE("identical agents: agent 0 wins every tie and matches the singleton run") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto inst = gen_instance(random_params(seed), seed);
    const auto cfg = inst.decoder_config();
    const AgentPool twins({inst.agents[0], inst.agents[0]}, inst.ref);
    const AgentPool one({inst.agents[0]}, inst.ref);
    const auto t2 = collab_decode(twins, *inst.target, inst.prompt, cfg, {});
    const auto t1 = collab_decode(one, *inst.target, inst.prompt, cfg, {});
    CHECK(t2.output == t1.output);
    for (const auto& s : t2.steps) CHECK(s.chosen_agent == 0);
  }
}

TEST_CASE("one deterministic agent decodes its own greedy path") {
  const Vocab v = abc();
  const auto det = table(v, {{{}, {0, 1, 0}}, {{A}, {0, 0, 1}}}, std::vector<double>{1, 0, 0}, "det");
  const AgentPool pool({det}, RefSelector::agent(0));
  const auto t = collab_decode(pool, *keyword({A}), {}, exact(5), {});
  CHECK(t.output == Tokens{A, B, EOS});
  CHECK(t.reconstruct() == t.output);
  CHECK(t.attribution == std::vector<int>{3});
  CHECK(*t.reward == 1.0);
}

TEST_CASE("property: every step matches the brute-force argmax") {
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    const auto params = random_params(seed);
    const auto inst = gen_instance(params, seed);
    DecoderConfig cfg = inst.decoder_config();
    cfg.top_k = 1 + static_cast<int>(seed % 3);
    const AgentPool pool = inst.pool();
    const auto trace = collab_decode(pool, *inst.target, inst.prompt, cfg, {});
    State s = inst.state({});
    for (const auto& step : trace.steps) {
      const auto o = oracle::best(inst.agents, *inst.ref, *inst.target, s, cfg.alpha, cfg.top_k, inst.horizon());
      CHECK(step.chosen_agent == o.agent);
      CHECK(step.chosen_token == o.token);
      s = append_token(s, step.chosen_token, inst.vocab, cfg);
    }
    int total = 0;
    for (int a : trace.attribution) total += a;
    CHECK(total == static_cast<int>(trace.output.size()));
    CHECK(trace.reconstruct() == trace.output);
  }
}

TEST_CASE("complementary experts both contribute") {
  // Each expert is tilted hard toward one keyword; the target pays for both.
  const Vocab v(4, 0, {"EOS", "A", "B", "C"});
  const auto ref = std::make_shared<UniformPolicy>(v);
  const auto ka = keyword({A}, 1.0, {0, 1});
  const auto kb = keyword({B}, 1.0, {0, 1});
  const auto ea = std::make_shared<GibbsTiltedPolicy>(ref, ka, 0.1, Tokens{}, 2, "expert_a");
  const auto eb = std::make_shared<GibbsTiltedPolicy>(ref, kb, 0.1, Tokens{}, 2, "expert_b");
  const BlendReward target({{0.5, ka}, {0.5, kb}});
  const std::vector<PolicyPtr> agents{ea, eb};
  const AgentPool pool(agents, ref);
  const auto cfg = exact(2, 0.1, 1);
  const auto t = collab_decode(pool, target, {}, cfg, {});
  CHECK(*t.reward == 1.0);
  CHECK(t.attribution == std::vector<int>{1, 1});
  State s;
  for (const auto& step : t.steps) {
    const auto o = oracle::best(agents, *ref, target, s, cfg.alpha, cfg.top_k, 2);
    CHECK(step.chosen_agent == o.agent);
    CHECK(step.chosen_token == o.token);
    s = append_token(s, step.chosen_token, v, cfg);
  }
  for (const auto& e : agents) CHECK(*single_agent_decode(*e, target, {}, cfg, {}, SingleMode::greedy).reward < 1.0);
}

TEST_CASE("single-agent decoding") {
  const Vocab v = abc();
  const auto agent = table(v, {{{}, {0.1, 0.6, 0.3}}, {{A}, {0.5, 0.2, 0.3}}, {{B}, {0.2, 0.2, 0.6}}},
                           std::vector<double>{0.7, 0.2, 0.1}, "tab");

  SUBCASE("constant Q gives the agent's greedy decode") {
    const ConstantReward c(0.5);
    const auto t = single_agent_decode(*agent, c, {}, exact(3), {}, SingleMode::greedy);
    CHECK(t.output == Tokens{A, EOS});
  }
  SUBCASE("huge alpha gives the agent's argmax") {
    const auto r = keyword({B}, 1.0, {0, 3});
    const auto t = single_agent_decode(*agent, *r, {}, exact(3, 1e9), {}, SingleMode::greedy);
    CHECK(t.output == Tokens{A, EOS});
  }
  SUBCASE("greedy pick is the brute-force argmax of ln pi + Q / alpha") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      const auto inst = gen_instance(random_params(seed), seed);
      DecoderConfig cfg = inst.decoder_config();
      const auto& a = *inst.agents[0];
      const auto t = single_agent_decode(a, *inst.target, inst.prompt, cfg, {}, SingleMode::greedy);
      State s = inst.state({});
      for (const auto& step : t.steps) {
        const auto row = oracle::dense(a, s);
        std::map<TokenId, double> score;
        double bv = -1e300;
        for (TokenId z : oracle::top_k(row, cfg.top_k)) {
          score[z] = std::log(row[static_cast<std::size_t>(z)]) +
                     oracle::q(a, *inst.target, s, z, inst.horizon()) / cfg.alpha;
          bv = std::max(bv, score[z]);
        }
        TokenId best = -1;
        for (const auto& [z, sc] : score)
          if (best < 0 && sc >= bv - 1e-12) best = z;
        CHECK(step.chosen_token == best);
        s = append_token(s, step.chosen_token, inst.vocab, cfg);
      }
    }
  }
  SUBCASE("uniform agent: singleton collab and greedy single agree") {
    // ln pi is constant across tokens, so both objectives rank by Q.
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto inst = gen_instance(random_params(seed), seed);
      const auto u = std::make_shared<UniformPolicy>(inst.vocab);
      const AgentPool one({u}, RefSelector::agent(0));
      const auto cfg = inst.decoder_config();
      CHECK(collab_decode(one, *inst.target, {}, cfg, {}).output ==
            single_agent_decode(*u, *inst.target, {}, cfg, {}, SingleMode::greedy).output);
    }
  }
  SUBCASE("tilted sampling is seeded") {
    const auto r = keyword({B}, 1.0, {0, 3});
    DecoderConfig cfg = exact(3);
    cfg.seed = 4;
    const auto a1 = single_agent_decode(*agent, *r, {}, cfg, {}, SingleMode::tilted_sample);
    const auto a2 = single_agent_decode(*agent, *r, {}, cfg, {}, SingleMode::tilted_sample);
    CHECK(serialize_trace(a1) == serialize_trace(a2));
  }
  SUBCASE("alpha = 0 is rejected") {
    CHECK_THROWS_AS(single_agent_decode(*agent, ConstantReward(0), {}, exact(3, 0.0), {}, SingleMode::greedy), Error);
  }
}

TEST_CASE("best-of-n") {
  const Vocab v = abc();
  const auto det_a = constant_row(v, {0, 1, 0}, "always_a");
  const auto det_b = constant_row(v, {0, 0, 1}, "always_b");
  DecoderConfig cfg = exact(3);

  SUBCASE("single deterministic sample") {
    const AgentPool pool({det_a}, RefSelector::agent(0));
    const auto t = bon_decode(pool, *keyword({A}), {}, 1, cfg);
    CHECK(t.output == Tokens{A, A, A});
    CHECK(t.bon_candidates.size() == 1);
  }
  SUBCASE("first agent wins when it scores") {
    const auto r = tabulate(v, 3, [](const Tokens& t) { return t.front() == A ? 1.0 : 0.0; });
    const AgentPool pool({det_a, det_b}, RefSelector::agent(0));
    const auto t = bon_decode(pool, *r, {}, 4, cfg);
    CHECK(t.output == Tokens{A, A, A});
    CHECK(t.attribution == std::vector<int>{3, 0});
    CHECK(t.bon_candidates.size() == 8);
  }
  SUBCASE("max selection") {
    const auto r = tabulate(v, 3, [](const Tokens& t) { return t.front() == A ? 0.3 : 0.7; });
    const AgentPool pool({det_a, det_b}, RefSelector::agent(0));
    const auto t = bon_decode(pool, *r, {}, 2, cfg);
    CHECK(t.output == Tokens{B, B, B});
    CHECK(*t.reward == 0.7);
  }
  SUBCASE("ties keep the first candidate") {
    const AgentPool pool({det_a, det_b}, RefSelector::agent(0));
    const auto t = bon_decode(pool, ConstantReward(0.5), {}, 3, cfg);
    CHECK(t.output == Tokens{A, A, A});
  }
  CHECK_THROWS_AS(bon_decode(AgentPool({det_a}, RefSelector::agent(0)), ConstantReward(0), {}, 0, cfg), Error);
}

TEST_CASE("failures return the partial trace") {
  const Vocab v = abc();
  // Row for the empty context only: the second step misses the table.
  const auto sparse = table(v, {{{}, {0, 1, 0}}}, std::nullopt, "sparse");
  const AgentPool pool({sparse}, RefSelector::agent(0));
  DecoderConfig cfg = exact(3);
  cfg.q_method = QMethod::prefix_proxy;
  try {
    collab_decode(pool, *keyword({A}), {}, cfg, {});
    FAIL("expected a decode error");
  } catch (const DecodeError& e) {
    CHECK(e.kind() == ErrorKind::table_miss);
    CHECK(e.partial().output == Tokens{A});
    CHECK(e.partial().steps.size() == 1);
  }
}

TEST_CASE("property: identical inputs serialize identically") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto inst = gen_instance(random_params(seed), seed);
    const auto cfg = inst.decoder_config();
    const AgentPool pool = inst.pool();
    CHECK(serialize_trace(collab_decode(pool, *inst.target, {}, cfg, {})) ==
          serialize_trace(collab_decode(pool, *inst.target, {}, cfg, {})));
    DecoderConfig mc = cfg;
    mc.q_method = QMethod::mc;
    mc.seed = seed;
    RolloutConfig rc;
    rc.seed = seed;
    rc.n_rollouts = 8;
    CHECK(serialize_trace(collab_decode(pool, *inst.target, {}, mc, rc)) ==
          serialize_trace(collab_decode(pool, *inst.target, {}, mc, rc)));
  }
}

TEST_CASE("serialized traces use 17 significant digits and labels") {
  const Vocab v = abc();
  const auto det = constant_row(v, {0, 1, 0}, "det");
  const AgentPool pool({det}, RefSelector::agent(0));
  const auto t = collab_decode(pool, BlendReward({{1.0 / 3, keyword({A})}, {2.0 / 3, keyword({B})}}), {}, exact(1), {});
  const std::string s = serialize_trace(t, &v);
  CHECK(s.find("0.33333333333333331") != std::string::npos);
  CHECK(s.find("\"A\"") != std::string::npos);
}
