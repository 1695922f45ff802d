#include <doctest.h>

#include <map>

#include "collab/core.hpp"
#include "collab/rng.hpp"

using namespace collab;

TEST_CASE("vocab invariants") {
  CHECK_NOTHROW(Vocab(2, 0));
  CHECK_THROWS_AS(Vocab(1, 0), Error);
  CHECK_THROWS_AS(Vocab(3, 3), Error);
  CHECK_THROWS_AS(Vocab(3, -1), Error);
  CHECK_THROWS_AS(Vocab(3, 0, {"a", "b"}), Error);
  const Vocab v(3, 0, {"<eos>", "a", "b"});
  CHECK(v.find("b") == 2);
  CHECK_FALSE(v.find("c"));
  CHECK(v.label(1) == "a");
  CHECK(Vocab(4, 1).label(2) == "2");
}

TEST_CASE("append_token") {
  const Vocab v(6, 0);
  const int T = 5;

  SUBCASE("concatenates without touching the input") {
    const State s{{1}, {}, false};
    const State next = append_token(s, 2, v, T);
    CHECK(next.prompt == Tokens{1});
    CHECK(next.generated == Tokens{2});
    CHECK_FALSE(next.terminal);
    CHECK(s.generated.empty());
  }
  SUBCASE("eos terminates") {
    const State s{{}, {2, 3, 4, 5}, false};
    CHECK(append_token(s, 0, v, 6).terminal);
  }
  SUBCASE("horizon terminates") {
    const State s{{}, {1, 1, 1, 1}, false};
    CHECK(append_token(s, 3, v, T).terminal);
  }
  SUBCASE("terminal state is a fixed point") {
    const State s = append_token(State{}, 0, v, T);
    CHECK_THROWS_AS(append_token(s, 1, v, T), Error);
    const State full{{}, {1, 1, 1, 1, 1}, false};
    CHECK_THROWS_AS(append_token(full, 1, v, T), Error);
  }
  SUBCASE("out of vocabulary") {
    try {
      append_token(State{}, 6, v, T);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::out_of_vocab);
    }
  }
}

TEST_CASE("is_terminal") {
  const Vocab v(4, 0);
  CHECK_FALSE(is_terminal(State{}, v, 3));
  CHECK(is_terminal(State{{}, {0}, false}, v, 3));
  CHECK(is_terminal(State{{}, {1, 2, 3}, false}, v, 3));
  CHECK_FALSE(is_terminal(State{{0, 0}, {1}, false}, v, 3));  // eos inside the prompt does not count
}

TEST_CASE("property: appending one by one equals extending by the sequence") {
  const Vocab v(5, 0);
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    Tokens seq;
    State s{{static_cast<TokenId>(rng.below(5))}, {}, false};
    const int T = 1 + static_cast<int>(rng.below(6));
    while (!s.terminal) {
      const TokenId z = static_cast<TokenId>(rng.below(5));
      seq.push_back(z);
      s = append_token(s, z, v, T);
    }
    CHECK(s.generated == seq);
    CHECK(s.terminal == is_terminal(State{s.prompt, seq, false}, v, T));
  }
}

TEST_CASE("states order and compare as map keys") {
  const State a{{1}, {2}, false};
  const State b{{1}, {2}, false};
  const State c{{1}, {3}, false};
  CHECK(a == b);
  CHECK(a < c);
  std::map<State, int> m{{a, 1}};
  CHECK(m.count(b) == 1);
}

TEST_CASE("decoder config validation") {
  DecoderConfig c;
  CHECK_NOTHROW(c.validate());
  c.top_k = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.max_new_tokens = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.alpha = -0.1;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.beta = -1;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("ref selector round trip") {
  CHECK(RefSelector::parse("uniform") == RefSelector::uniform());
  CHECK(RefSelector::parse("2") == RefSelector::agent(2));
  CHECK(RefSelector::parse(RefSelector::agent(1).to_string()) == RefSelector::agent(1));
}

TEST_CASE("enumeration bound") {
  CHECK(enumeration_bound(10, 6));
  CHECK_FALSE(enumeration_bound(10, 7));
  CHECK(*enumeration_bound(3, 0) == 1.0);
}

TEST_CASE("rng is reproducible and roughly uniform") {
  Rng a(5), b(5);
  for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());
  Rng r(1);
  double total = 0;
  for (int i = 0; i < 100000; ++i) total += r.uniform();
  CHECK(total / 100000 == doctest::Approx(0.5).epsilon(0.01));
}
