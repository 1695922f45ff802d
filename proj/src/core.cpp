#include "collab/core.hpp"

#include <cmath>

namespace collab {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::contract: return "contract";
    case ErrorKind::out_of_vocab: return "out_of_vocab";
    case ErrorKind::backend: return "backend";
    case ErrorKind::support: return "support";
    case ErrorKind::capability: return "capability";
    case ErrorKind::table_miss: return "table_miss";
    case ErrorKind::guard: return "guard";
    case ErrorKind::degenerate: return "degenerate";
    case ErrorKind::network: return "network";
    case ErrorKind::version_mismatch: return "version_mismatch";
    case ErrorKind::malformed: return "malformed";
    case ErrorKind::conformance: return "conformance";
    case ErrorKind::config: return "config";
    case ErrorKind::usage: return "usage";
  }
  return "unknown";
}

Vocab::Vocab(int size, TokenId eos_id, std::vector<std::string> labels)
    : size_(size), eos_(eos_id), labels_(std::move(labels)) {
  if (size_ < 2) throw Error(ErrorKind::contract, "vocab size must be >= 2, got " + std::to_string(size_));
  if (eos_ < 0 || eos_ >= size_)
    throw Error(ErrorKind::contract, "eos id " + std::to_string(eos_) + " outside vocab of size " + std::to_string(size_));
  if (!labels_.empty() && static_cast<int>(labels_.size()) != size_)
    throw Error(ErrorKind::contract, "vocab labels must have exactly " + std::to_string(size_) + " entries");
}

std::string Vocab::label(TokenId t) const {
  if (has_labels() && contains(t)) return labels_[static_cast<std::size_t>(t)];
  return std::to_string(t);
}

std::optional<TokenId> Vocab::find(const std::string& label) const {
  for (std::size_t i = 0; i < labels_.size(); ++i)
    if (labels_[i] == label) return static_cast<TokenId>(i);
  return std::nullopt;
}

void Vocab::check(TokenId t) const {
  if (!contains(t))
    throw Error(ErrorKind::out_of_vocab, "token " + std::to_string(t) + " outside vocab of size " + std::to_string(size_));
}

void Vocab::check(const Tokens& tokens) const {
  for (TokenId t : tokens) check(t);
}

Tokens State::context() const {
  Tokens out;
  out.reserve(prompt.size() + generated.size());
  out.insert(out.end(), prompt.begin(), prompt.end());
  out.insert(out.end(), generated.begin(), generated.end());
  return out;
}

std::string to_string(QMethod m) {
  switch (m) {
    case QMethod::automatic: return "auto";
    case QMethod::mc: return "mc";
    case QMethod::prefix_proxy: return "prefix_proxy";
    case QMethod::exact_dp: return "exact_dp";
  }
  return "auto";
}

QMethod parse_qmethod(const std::string& s) {
  if (s == "auto") return QMethod::automatic;
  if (s == "mc") return QMethod::mc;
  if (s == "prefix_proxy") return QMethod::prefix_proxy;
  if (s == "exact_dp") return QMethod::exact_dp;
  throw Error(ErrorKind::config, "unknown q method '" + s + "' (expected auto|mc|prefix_proxy|exact_dp)");
}

std::string RefSelector::to_string() const {
  return kind == Kind::uniform ? "uniform" : std::to_string(index);
}

RefSelector RefSelector::parse(const std::string& s) {
  if (s == "uniform") return uniform();
  try {
    std::size_t used = 0;
    int i = std::stoi(s, &used);
    if (used == s.size() && i >= 0) return agent(i);
  } catch (const std::exception&) {
  }
  throw Error(ErrorKind::config, "ref must be 'uniform' or a non-negative agent index, got '" + s + "'");
}

void DecoderConfig::validate() const {
  std::string problems;
  if (!(alpha >= 0.0)) problems += " alpha must be >= 0;";
  if (!(beta >= 0.0)) problems += " beta must be >= 0;";
  if (top_k < 1) problems += " top_k must be >= 1;";
  if (max_new_tokens < 1) problems += " max_new_tokens must be >= 1;";
  if (!(tie_tolerance >= 0.0)) problems += " tie_tolerance must be >= 0;";
  if (!problems.empty()) throw Error(ErrorKind::config, "invalid decoder config:" + problems);
}

State make_state(Tokens prompt, const Vocab& vocab) {
  vocab.check(prompt);
  return State{std::move(prompt), {}, false};
}

bool is_terminal(const State& state, const Vocab& vocab, int max_new_tokens) {
  if (!state.generated.empty() && state.generated.back() == vocab.eos()) return true;
  return static_cast<int>(state.generated.size()) >= max_new_tokens;
}

State append_token(const State& state, TokenId z, const Vocab& vocab, int max_new_tokens) {
  if (state.terminal || is_terminal(state, vocab, max_new_tokens))
    throw Error(ErrorKind::contract, "cannot append to a terminal state");
  vocab.check(z);
  State next = state;
  next.generated.push_back(z);
  next.terminal = is_terminal(next, vocab, max_new_tokens);
  return next;
}

std::optional<double> enumeration_bound(int vocab_size, int remaining, double cap) {
  if (remaining <= 0) return 1.0;
  const double bound = std::pow(static_cast<double>(vocab_size), remaining);
  if (!(bound <= cap)) return std::nullopt;
  return bound;
}

}  // namespace collab
