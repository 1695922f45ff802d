#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "collab/error.hpp"

namespace collab {

using TokenId = std::int32_t;
using Tokens = std::vector<TokenId>;

class Vocab {
 public:
  Vocab(int size, TokenId eos_id, std::vector<std::string> labels = {});

  int size() const { return size_; }
  TokenId eos() const { return eos_; }
  bool contains(TokenId t) const { return t >= 0 && t < size_; }
  bool has_labels() const { return !labels_.empty(); }
  const std::vector<std::string>& labels() const { return labels_; }

  /// Label for display; falls back to the decimal id.
  std::string label(TokenId t) const;
  std::optional<TokenId> find(const std::string& label) const;

  void check(TokenId t) const;
  void check(const Tokens& tokens) const;

  bool same_shape(const Vocab& other) const { return size_ == other.size_ && eos_ == other.eos_; }
  friend bool operator==(const Vocab&, const Vocab&) = default;

 private:
  int size_;
  TokenId eos_;
  std::vector<std::string> labels_;
};

/// Decoding state: prompt plus the generated prefix. Immutable by convention;
/// every transition returns a new value.
struct State {
  Tokens prompt;
  Tokens generated;
  bool terminal = false;

  Tokens context() const;
  std::size_t step() const { return generated.size(); }

  friend bool operator==(const State&, const State&) = default;
  friend auto operator<=>(const State&, const State&) = default;
};

struct Trajectory {
  Tokens tokens;
  std::vector<std::pair<int, double>> logprob_under;  // (agent index, total log-probability)

  friend bool operator==(const Trajectory& a, const Trajectory& b) { return a.tokens == b.tokens; }
};

enum class QMethod { automatic, mc, prefix_proxy, exact_dp };

std::string to_string(QMethod m);
QMethod parse_qmethod(const std::string& s);

/// Which distribution plays the reference policy in the token-level KL.
struct RefSelector {
  enum class Kind { agent, uniform };
  Kind kind = Kind::agent;
  int index = 0;

  static RefSelector agent(int i) { return {Kind::agent, i}; }
  static RefSelector uniform() { return {Kind::uniform, 0}; }

  std::string to_string() const;
  static RefSelector parse(const std::string& s);
  friend bool operator==(const RefSelector&, const RefSelector&) = default;
};

/// Equal J values (within tie_tolerance) go to the lower agent index, then the
/// lower token id. This is the only policy; it is kept as a type so traces can
/// record it.
enum class TieBreak { lowest_agent_then_token };

struct DecoderConfig {
  double alpha = 1.0;
  double beta = 1.0;
  int top_k = 10;
  int max_new_tokens = 64;
  RefSelector ref = RefSelector::agent(0);
  std::uint64_t seed = 0;
  TieBreak tie_break = TieBreak::lowest_agent_then_token;
  double tie_tolerance = 1e-12;
  QMethod q_method = QMethod::automatic;

  void validate() const;
};

State make_state(Tokens prompt, const Vocab& vocab);

bool is_terminal(const State& state, const Vocab& vocab, int max_new_tokens);
inline bool is_terminal(const State& state, const Vocab& vocab, const DecoderConfig& cfg) {
  return is_terminal(state, vocab, cfg.max_new_tokens);
}

State append_token(const State& state, TokenId z, const Vocab& vocab, int max_new_tokens);
inline State append_token(const State& state, TokenId z, const Vocab& vocab, const DecoderConfig& cfg) {
  return append_token(state, z, vocab, cfg.max_new_tokens);
}

/// Number of complete continuations reachable within `remaining` tokens is
/// bounded by size^remaining; returns nullopt when that bound exceeds `cap`.
std::optional<double> enumeration_bound(int vocab_size, int remaining, double cap = 1e6);

}  // namespace collab
