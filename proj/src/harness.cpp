#include "collab/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "collab/canonical.hpp"
#include "collab/log.hpp"
#include "collab/rng.hpp"

namespace collab {

using nlohmann::json;
namespace fs = std::filesystem;

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config:
    case ErrorKind::usage:
    case ErrorKind::contract:
    case ErrorKind::out_of_vocab:
    case ErrorKind::guard:
      return exit_config;
    default:
      return exit_backend;
  }
}

std::uint64_t prompt_seed(std::uint64_t seed, std::size_t index) {
  return seed ^ splitmix64(static_cast<std::uint64_t>(index));
}

// ---------------------------------------------------------------------------
// Prompts

std::string PromptSource::describe() const {
  switch (kind) {
    case Kind::inline_ids: return "inline ids";
    case Kind::inline_text: return "inline text";
    case Kind::file_ids: return "file " + path.string() + " (ids)";
    case Kind::file_labels: return "file " + path.string() + " (labels)";
  }
  return "?";
}

namespace {

Tokens cap_prompt(Tokens p, int cap, std::size_t index, std::vector<std::string>& warnings) {
  if (cap > 0 && static_cast<int>(p.size()) > cap) {
    warnings.push_back("prompt " + std::to_string(index) + " truncated from " + std::to_string(p.size()) +
                       " to the last " + std::to_string(cap) + " tokens");
    p.erase(p.begin(), p.end() - cap);
  }
  return p;
}

Tokens parse_line(const std::string& line, bool labels, const Vocab& vocab, const std::string& where) {
  std::istringstream in(line);
  std::string word;
  Tokens out;
  while (in >> word) {
    if (labels) {
      auto id = vocab.find(word);
      if (!id) throw Error(ErrorKind::config, where + ": unknown label '" + word + "'");
      out.push_back(*id);
    } else {
      std::size_t used = 0;
      long long v = 0;
      try {
        v = std::stoll(word, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != word.size()) throw Error(ErrorKind::config, where + ": '" + word + "' is not a token id");
      if (v < 0 || v >= vocab.size())
        throw Error(ErrorKind::out_of_vocab, where + ": token id " + word + " outside [0, " +
                                                 std::to_string(vocab.size()) + ")");
      out.push_back(static_cast<TokenId>(v));
    }
  }
  return out;
}

}  // namespace

PromptSet parse_prompt_text(const std::string& text, bool labels, const Vocab& vocab, int cap,
                            const std::string& source) {
  if (labels && !vocab.has_labels()) throw Error(ErrorKind::config, source + ": label mode needs vocabulary labels");
  PromptSet set;
  set.source = source;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Tokens p = parse_line(line, labels, vocab, source + ":" + std::to_string(lineno));
    set.prompts.push_back(cap_prompt(std::move(p), cap, set.prompts.size(), set.warnings));
  }
  if (set.prompts.empty()) throw Error(ErrorKind::config, source + ": no prompts");
  return set;
}

PromptSet load_prompts(const PromptSource& source, const Vocab& vocab, int cap) {
  switch (source.kind) {
    case PromptSource::Kind::inline_ids: {
      PromptSet set;
      set.source = source.describe();
      for (std::size_t i = 0; i < source.ids.size(); ++i) {
        vocab.check(source.ids[i]);
        set.prompts.push_back(cap_prompt(source.ids[i], cap, i, set.warnings));
      }
      if (set.prompts.empty()) throw Error(ErrorKind::config, "prompt list is empty");
      return set;
    }
    case PromptSource::Kind::inline_text: {
      std::string joined;
      for (const auto& t : source.text) joined += t + "\n";
      return parse_prompt_text(joined, true, vocab, cap, source.describe());
    }
    case PromptSource::Kind::file_ids:
    case PromptSource::Kind::file_labels: {
      std::ifstream in(source.path);
      if (!in) throw Error(ErrorKind::config, "cannot read prompt file " + source.path.string());
      std::stringstream ss;
      ss << in.rdbuf();
      return parse_prompt_text(ss.str(), source.kind == PromptSource::Kind::file_labels, vocab, cap,
                               source.path.string());
    }
  }
  throw Error(ErrorKind::contract, "unknown prompt source");
}

// ---------------------------------------------------------------------------
// Strict config reading

namespace {

class Reader {
 public:
  std::vector<std::string> problems;

  void fail(const std::string& path, const std::string& msg) { problems.push_back(path + ": " + msg); }

  bool object(const json& j, const std::string& path, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) {
      fail(path, "expected an object");
      return false;
    }
    for (const auto& [k, v] : j.items()) {
      if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; }))
        fail(path, "unknown key '" + k + "'");
    }
    return true;
  }

  template <typename T>
  void number(const json& j, const char* key, const std::string& path, T& out) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) return fail(path + "." + key, "expected an integer");
      const auto raw = v.get<long long>();
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_unsigned()) {
          out = static_cast<T>(v.get<unsigned long long>());
          return;
        }
        if (raw < 0) return fail(path + "." + key, "must be non-negative");
      } else if (raw < std::numeric_limits<T>::min() || raw > std::numeric_limits<T>::max()) {
        return fail(path + "." + key, "out of range");
      }
      out = static_cast<T>(raw);
    } else {
      if (!v.is_number()) return fail(path + "." + key, "expected a number");
      out = v.get<T>();
    }
  }

  void boolean(const json& j, const char* key, const std::string& path, bool& out) {
    if (!j.contains(key)) return;
    if (!j.at(key).is_boolean()) return fail(path + "." + key, "expected true or false");
    out = j.at(key).get<bool>();
  }

  bool string(const json& j, const char* key, const std::string& path, std::string& out) {
    if (!j.contains(key)) return false;
    if (!j.at(key).is_string()) {
      fail(path + "." + key, "expected a string");
      return false;
    }
    out = j.at(key).get<std::string>();
    return true;
  }

  bool require(const json& j, const char* key, const std::string& path) {
    if (j.is_object() && j.contains(key)) return true;
    fail(path, "missing required key '" + std::string(key) + "'");
    return false;
  }

  /// Token lists: an array of ids and/or labels, or one whitespace-separated string.
  std::optional<Tokens> tokens(const json& v, const std::string& path, const std::optional<Vocab>& vocab) {
    Tokens out;
    auto one = [&](const std::string& word) -> bool {
      if (vocab && vocab->has_labels()) {
        if (auto id = vocab->find(word)) {
          out.push_back(*id);
          return true;
        }
      }
      std::size_t used = 0;
      try {
        const long long x = std::stoll(word, &used);
        if (used == word.size()) {
          out.push_back(static_cast<TokenId>(x));
          return true;
        }
      } catch (const std::exception&) {
      }
      fail(path, "unknown token '" + word + "'");
      return false;
    };
    if (v.is_string()) {
      std::istringstream in(v.get<std::string>());
      std::string w;
      while (in >> w)
        if (!one(w)) return std::nullopt;
    } else if (v.is_array()) {
      for (const auto& t : v) {
        if (t.is_number_integer()) {
          out.push_back(static_cast<TokenId>(t.get<long long>()));
        } else if (t.is_string()) {
          if (!one(t.get<std::string>())) return std::nullopt;
        } else {
          fail(path, "tokens must be ids or labels");
          return std::nullopt;
        }
      }
    } else {
      fail(path, "expected a token list");
      return std::nullopt;
    }
    if (vocab)
      for (TokenId t : out)
        if (!vocab->contains(t)) {
          fail(path, "token id " + std::to_string(t) + " outside the vocabulary");
          return std::nullopt;
        }
    return out;
  }
};

std::pair<int, int> line_col(const std::string& text, std::size_t byte) {
  int line = 1, col = 1;
  for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

void check_endpoint(Reader& r, const json& j, const std::string& path) {
  if (j.is_string()) return;
  if (!r.object(j, path, {"url", "timeout_ms", "attempts", "backoff_ms", "max_in_flight", "auth_token"})) return;
  r.require(j, "url", path);
}

Endpoint endpoint_from(const json& j) {
  Endpoint ep;
  if (j.is_string()) {
    ep.url = j.get<std::string>();
  } else {
    ep.url = j.at("url").get<std::string>();
    if (j.contains("timeout_ms")) ep.timeout_ms = j.at("timeout_ms").get<int>();
    if (j.contains("attempts")) ep.attempts = j.at("attempts").get<int>();
    if (j.contains("backoff_ms")) ep.backoff_ms = j.at("backoff_ms").get<std::vector<int>>();
    if (j.contains("max_in_flight")) ep.max_in_flight = j.at("max_in_flight").get<int>();
    if (j.contains("auth_token")) ep.auth_token = j.at("auth_token").get<std::string>();
  }
  return ep.with_env_auth();
}

void check_reward(Reader& r, const json& j, const std::string& path, const std::optional<Vocab>& vocab, bool& remote) {
  if (!j.is_object()) return r.fail(path, "expected an object");
  std::string type;
  if (!r.require(j, "type", path) || !r.string(j, "type", path, type)) return;
  auto bounds = [&] {
    if (!j.contains("bounds")) return;
    const json& b = j.at("bounds");
    if (!b.is_array() || b.size() != 2 || !b[0].is_number() || !b[1].is_number() ||
        !(b[0].get<double>() <= b[1].get<double>()))
      r.fail(path + ".bounds", "expected [lo, hi] with lo <= hi");
  };
  if (type == "keyword") {
    r.object(j, path, {"type", "tokens", "weight", "bounds"});
    if (r.require(j, "tokens", path)) r.tokens(j.at("tokens"), path + ".tokens", vocab);
    double w = 1.0;
    r.number(j, "weight", path, w);
    bounds();
  } else if (type == "constant") {
    r.object(j, path, {"type", "value"});
    double v = 0.0;
    if (r.require(j, "value", path)) r.number(j, "value", path, v);
  } else if (type == "tabular") {
    r.object(j, path, {"type", "entries", "bounds", "name"});
    bounds();
    if (r.require(j, "entries", path)) {
      if (!j.at("entries").is_array()) return r.fail(path + ".entries", "expected an array");
      for (std::size_t i = 0; i < j.at("entries").size(); ++i) {
        const json& e = j.at("entries")[i];
        const std::string ep = path + ".entries[" + std::to_string(i) + "]";
        if (!r.object(e, ep, {"response", "reward"})) continue;
        if (r.require(e, "response", ep)) r.tokens(e.at("response"), ep + ".response", vocab);
        double v = 0.0;
        if (r.require(e, "reward", ep)) r.number(e, "reward", ep, v);
      }
    }
  } else if (type == "blend") {
    r.object(j, path, {"type", "components"});
    if (r.require(j, "components", path)) {
      const json& cs = j.at("components");
      if (!cs.is_array() || cs.empty()) return r.fail(path + ".components", "expected a non-empty array");
      double total = 0.0;
      for (std::size_t i = 0; i < cs.size(); ++i) {
        const std::string cp = path + ".components[" + std::to_string(i) + "]";
        if (!r.object(cs[i], cp, {"weight", "reward"})) continue;
        double w = 0.0;
        if (r.require(cs[i], "weight", cp)) r.number(cs[i], "weight", cp, w);
        if (w < 0.0) r.fail(cp + ".weight", "must be >= 0");
        total += w;
        if (r.require(cs[i], "reward", cp)) check_reward(r, cs[i].at("reward"), cp + ".reward", vocab, remote);
      }
      if (std::abs(total - 1.0) > 1e-9) r.fail(path + ".components", "weights must sum to 1");
    }
  } else if (type == "remote") {
    r.object(j, path, {"type", "endpoint", "name"});
    remote = true;
    if (r.require(j, "endpoint", path)) check_endpoint(r, j.at("endpoint"), path + ".endpoint");
  } else {
    r.fail(path + ".type", "unknown reward type '" + type + "' (keyword|constant|tabular|blend|remote)");
  }
}

void check_agent(Reader& r, const json& j, const std::string& path, const std::optional<Vocab>& vocab) {
  if (!j.is_object()) return r.fail(path, "expected an object");
  std::string type;
  if (!r.require(j, "type", path) || !r.string(j, "type", path, type)) return;
  std::string name;
  r.string(j, "name", path, name);
  auto row = [&](const json& v, const std::string& p) {
    if (!v.is_array() || !std::all_of(v.begin(), v.end(), [](const json& x) { return x.is_number(); }))
      return r.fail(p, "expected an array of probabilities");
    if (vocab && static_cast<int>(v.size()) != vocab->size())
      r.fail(p, "row has " + std::to_string(v.size()) + " entries, vocabulary has " + std::to_string(vocab->size()));
  };
  if (type == "uniform") {
    r.object(j, path, {"type", "name"});
  } else if (type == "tabular") {
    r.object(j, path, {"type", "name", "rows", "default"});
    if (!j.contains("rows") && !j.contains("default")) r.fail(path, "tabular agent needs 'rows' or 'default'");
    if (j.contains("default")) row(j.at("default"), path + ".default");
    if (j.contains("rows")) {
      if (!j.at("rows").is_array()) return r.fail(path + ".rows", "expected an array");
      for (std::size_t i = 0; i < j.at("rows").size(); ++i) {
        const json& e = j.at("rows")[i];
        const std::string ep = path + ".rows[" + std::to_string(i) + "]";
        if (!r.object(e, ep, {"context", "probs"})) continue;
        if (r.require(e, "context", ep)) r.tokens(e.at("context"), ep + ".context", vocab);
        if (r.require(e, "probs", ep)) row(e.at("probs"), ep + ".probs");
      }
    }
  } else if (type == "ngram") {
    r.object(j, path, {"type", "name", "order", "lambda", "corpus"});
    int order = 2;
    double lambda = 1.0;
    r.number(j, "order", path, order);
    r.number(j, "lambda", path, lambda);
    if (order < 1) r.fail(path + ".order", "must be >= 1");
    if (!(lambda > 0.0)) r.fail(path + ".lambda", "must be > 0");
    if (j.contains("corpus")) {
      if (!j.at("corpus").is_array()) return r.fail(path + ".corpus", "expected an array of token lists");
      for (std::size_t i = 0; i < j.at("corpus").size(); ++i)
        r.tokens(j.at("corpus")[i], path + ".corpus[" + std::to_string(i) + "]", vocab);
    }
  } else if (type == "remote") {
    r.object(j, path, {"type", "name", "endpoint"});
    if (r.require(j, "endpoint", path)) check_endpoint(r, j.at("endpoint"), path + ".endpoint");
  } else {
    r.fail(path + ".type", "unknown agent type '" + type + "' (uniform|tabular|ngram|remote)");
  }
}

}  // namespace

bool ExperimentConfig::has_remote() const {
  if (std::any_of(agents.begin(), agents.end(), [](const AgentSpec& a) { return a.type == "remote"; })) return true;
  return reward.dump().find("\"remote\"") != std::string::npos;
}

MethodSpec parse_method(const std::string& name, const std::vector<AgentSpec>& agents, const RefSelector& ref) {
  if (name == "collab") return {name, MethodKind::collab, 0};
  if (name == "bon") return {name, MethodKind::bon, 0};
  if (name == "single") {
    const int j = ref.kind == RefSelector::Kind::agent ? ref.index : 0;
    return {name, MethodKind::single, j};
  }
  if (name.rfind("single:", 0) == 0) {
    const std::string who = name.substr(7);
    for (std::size_t i = 0; i < agents.size(); ++i)
      if (agents[i].name == who) return {name, MethodKind::single, static_cast<int>(i)};
    std::size_t used = 0;
    int j = -1;
    try {
      j = std::stoi(who, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == who.size() && j >= 0 && j < static_cast<int>(agents.size())) return {name, MethodKind::single, j};
    throw Error(ErrorKind::config, "method '" + name + "' names no agent");
  }
  throw Error(ErrorKind::config, "unknown method '" + name + "' (collab|single|single:<agent>|bon|all)");
}

ExperimentConfig parse_config(const std::string& text, const fs::path& base_dir, const std::string& origin) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    const auto [line, col] = line_col(text, e.byte == 0 ? 0 : e.byte - 1);
    std::string msg = e.what();
    if (auto p = msg.find("parse error"); p != std::string::npos) msg = msg.substr(p);
    throw Error(ErrorKind::config, origin + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + msg);
  }

  Reader r;
  ExperimentConfig cfg;
  cfg.document = doc;
  cfg.base_dir = base_dir;
  if (!r.object(doc, "config", {"vocab", "agents", "reference", "reward", "decoder", "rollout", "methods", "bon",
                                "single", "prompts", "metrics", "output_dir", "workers", "fail_fast"}))
    throw Error(ErrorKind::config, origin + ": top level must be an object");

  if (doc.contains("vocab")) {
    const json& v = doc.at("vocab");
    if (r.object(v, "vocab", {"size", "eos", "labels"})) {
      int size = 0, eos = 0;
      r.require(v, "size", "vocab");
      r.number(v, "size", "vocab", size);
      r.number(v, "eos", "vocab", eos);
      std::vector<std::string> labels;
      if (v.contains("labels")) {
        if (!v.at("labels").is_array() ||
            !std::all_of(v.at("labels").begin(), v.at("labels").end(), [](const json& x) { return x.is_string(); }))
          r.fail("vocab.labels", "expected an array of strings");
        else
          labels = v.at("labels").get<std::vector<std::string>>();
      }
      try {
        if (size > 0) cfg.vocab = Vocab(size, eos, labels);
      } catch (const Error& e) {
        r.fail("vocab", e.detail());
      }
    }
  }

  if (!r.require(doc, "agents", "config")) {
  } else if (!doc.at("agents").is_array() || doc.at("agents").empty()) {
    r.fail("agents", "expected a non-empty array");
  } else {
    std::set<std::string> names;
    for (std::size_t i = 0; i < doc.at("agents").size(); ++i) {
      const json& a = doc.at("agents")[i];
      const std::string path = "agents[" + std::to_string(i) + "]";
      check_agent(r, a, path, cfg.vocab);
      AgentSpec spec;
      spec.spec = a;
      spec.name = "agent" + std::to_string(i);
      if (a.is_object()) {
        if (a.contains("name") && a.at("name").is_string()) spec.name = a.at("name").get<std::string>();
        if (a.contains("type") && a.at("type").is_string()) spec.type = a.at("type").get<std::string>();
      }
      if (!names.insert(spec.name).second) r.fail(path + ".name", "duplicate agent name '" + spec.name + "'");
      if (spec.type != "remote" && !cfg.vocab) r.fail(path, "local agents need a 'vocab' section");
      cfg.agents.push_back(std::move(spec));
    }
  }

  RefSelector ref = RefSelector::agent(0);
  if (doc.contains("reference")) {
    const json& v = doc.at("reference");
    if (v.is_number_integer()) {
      ref = RefSelector::agent(v.get<int>());
    } else if (v.is_string() && v.get<std::string>() == "uniform") {
      ref = RefSelector::uniform();
    } else if (v.is_string()) {
      const std::string who = v.get<std::string>();
      bool found = false;
      for (std::size_t i = 0; i < cfg.agents.size(); ++i)
        if (cfg.agents[i].name == who) {
          ref = RefSelector::agent(static_cast<int>(i));
          found = true;
        }
      if (!found) r.fail("reference", "no agent named '" + who + "'");
    } else {
      r.fail("reference", "expected an agent index, an agent name or \"uniform\"");
    }
    if (ref.kind == RefSelector::Kind::agent && (ref.index < 0 || ref.index >= static_cast<int>(cfg.agents.size())))
      r.fail("reference", "agent index out of range");
    if (ref.kind == RefSelector::Kind::uniform && !cfg.vocab)
      r.fail("reference", "a uniform reference needs a 'vocab' section");
  }
  cfg.decoder.ref = ref;

  bool remote_reward = false;
  if (r.require(doc, "reward", "config")) {
    cfg.reward = doc.at("reward");
    check_reward(r, cfg.reward, "reward", cfg.vocab, remote_reward);
  }

  if (doc.contains("decoder")) {
    const json& d = doc.at("decoder");
    if (r.object(d, "decoder",
                 {"alpha", "beta", "top_k", "max_new_tokens", "seed", "tie_tolerance", "q_method"})) {
      r.number(d, "alpha", "decoder", cfg.decoder.alpha);
      r.number(d, "beta", "decoder", cfg.decoder.beta);
      r.number(d, "top_k", "decoder", cfg.decoder.top_k);
      r.number(d, "max_new_tokens", "decoder", cfg.decoder.max_new_tokens);
      cfg.max_new_tokens_set = d.contains("max_new_tokens");
      r.number(d, "seed", "decoder", cfg.decoder.seed);
      r.number(d, "tie_tolerance", "decoder", cfg.decoder.tie_tolerance);
      std::string qm;
      if (r.string(d, "q_method", "decoder", qm)) {
        try {
          cfg.decoder.q_method = parse_qmethod(qm);
        } catch (const Error& e) {
          r.fail("decoder.q_method", e.detail());
        }
      }
    }
  }
  const bool remote = remote_reward || std::any_of(cfg.agents.begin(), cfg.agents.end(),
                                                   [](const AgentSpec& a) { return a.type == "remote"; });
  if (remote && !cfg.max_new_tokens_set) cfg.decoder.max_new_tokens = 2048;
  try {
    cfg.decoder.validate();
  } catch (const Error& e) {
    r.fail("decoder", e.detail());
  }

  cfg.rollout.seed = cfg.decoder.seed;
  if (doc.contains("rollout")) {
    const json& d = doc.at("rollout");
    if (r.object(d, "rollout", {"n_rollouts", "max_len", "seed"})) {
      r.number(d, "n_rollouts", "rollout", cfg.rollout.n_rollouts);
      if (d.contains("max_len") && !d.at("max_len").is_null()) {
        int m = 0;
        r.number(d, "max_len", "rollout", m);
        cfg.rollout.max_len = m;
      }
      r.number(d, "seed", "rollout", cfg.rollout.seed);
    }
  }
  try {
    cfg.rollout.validate();
  } catch (const Error& e) {
    r.fail("rollout", e.detail());
  }

  std::vector<std::string> method_names{"collab"};
  if (doc.contains("methods")) {
    const json& m = doc.at("methods");
    if (!m.is_array() || m.empty() ||
        !std::all_of(m.begin(), m.end(), [](const json& x) { return x.is_string(); })) {
      r.fail("methods", "expected a non-empty array of method names");
      method_names.clear();
    } else {
      method_names.clear();
      for (const auto& x : m) {
        const std::string name = x.get<std::string>();
        if (name == "all")
          method_names.insert(method_names.end(), {"collab", "single", "bon"});
        else
          method_names.push_back(name);
      }
    }
  }
  std::set<std::string> seen_methods;
  for (const auto& name : method_names) {
    if (!seen_methods.insert(name).second) {
      r.fail("methods", "method '" + name + "' listed twice");
      continue;
    }
    try {
      cfg.methods.push_back(parse_method(name, cfg.agents, ref));
    } catch (const Error& e) {
      r.fail("methods", e.detail());
    }
  }

  if (doc.contains("bon")) {
    const json& b = doc.at("bon");
    if (r.object(b, "bon", {"n"})) r.number(b, "n", "bon", cfg.bon_n);
    if (cfg.bon_n < 1) r.fail("bon.n", "must be >= 1");
  }
  if (doc.contains("single")) {
    const json& s = doc.at("single");
    std::string mode;
    if (r.object(s, "single", {"mode"}) && r.string(s, "mode", "single", mode)) {
      if (mode == "greedy")
        cfg.single_mode = SingleMode::greedy;
      else if (mode == "tilted")
        cfg.single_mode = SingleMode::tilted_sample;
      else
        r.fail("single.mode", "expected \"greedy\" or \"tilted\"");
    }
  }
  if (std::any_of(cfg.methods.begin(), cfg.methods.end(),
                  [](const MethodSpec& m) { return m.kind == MethodKind::single; }) &&
      !(cfg.decoder.alpha > 0.0))
    r.fail("decoder.alpha", "single-agent decoding needs alpha > 0");

  if (r.require(doc, "prompts", "config")) {
    const json& p = doc.at("prompts");
    if (r.object(p, "prompts", {"ids", "text", "file", "format", "max_len", "limit"})) {
      const int sources = static_cast<int>(p.contains("ids")) + static_cast<int>(p.contains("text")) +
                          static_cast<int>(p.contains("file"));
      if (sources != 1) r.fail("prompts", "give exactly one of 'ids', 'text' or 'file'");
      if (p.contains("ids")) {
        cfg.prompts.kind = PromptSource::Kind::inline_ids;
        if (!p.at("ids").is_array()) {
          r.fail("prompts.ids", "expected an array of token lists");
        } else {
          for (std::size_t i = 0; i < p.at("ids").size(); ++i)
            if (auto t = r.tokens(p.at("ids")[i], "prompts.ids[" + std::to_string(i) + "]", cfg.vocab))
              cfg.prompts.ids.push_back(*t);
        }
      } else if (p.contains("text")) {
        cfg.prompts.kind = PromptSource::Kind::inline_text;
        if (!p.at("text").is_array() ||
            !std::all_of(p.at("text").begin(), p.at("text").end(), [](const json& x) { return x.is_string(); }))
          r.fail("prompts.text", "expected an array of strings");
        else
          cfg.prompts.text = p.at("text").get<std::vector<std::string>>();
      } else if (p.contains("file")) {
        std::string file, format = "ids";
        r.string(p, "file", "prompts", file);
        r.string(p, "format", "prompts", format);
        const fs::path fp(file);
        cfg.prompts.path = fp.is_absolute() ? fp : base_dir / fp;
        if (format == "ids")
          cfg.prompts.kind = PromptSource::Kind::file_ids;
        else if (format == "labels")
          cfg.prompts.kind = PromptSource::Kind::file_labels;
        else
          r.fail("prompts.format", "expected \"ids\" or \"labels\"");
      }
      r.number(p, "max_len", "prompts", cfg.max_prompt_len);
      if (cfg.max_prompt_len < 1) r.fail("prompts.max_len", "must be >= 1");
      if (p.contains("limit")) {
        int n = 0;
        r.number(p, "limit", "prompts", n);
        if (n < 1) r.fail("prompts.limit", "must be >= 1");
        cfg.n_prompts = n;
      }
    }
  }

  if (doc.contains("metrics")) {
    const json& m = doc.at("metrics");
    if (r.object(m, "metrics", {"anchor", "r_min"})) {
      r.string(m, "anchor", "metrics", cfg.normalization.anchor);
      std::string mode = "global";
      r.string(m, "r_min", "metrics", mode);
      if (mode == "per_method")
        cfg.normalization.per_method_min = true;
      else if (mode != "global")
        r.fail("metrics.r_min", "expected \"global\" or \"per_method\"");
    }
  }
  std::string out;
  if (r.string(doc, "output_dir", "config", out)) cfg.output_dir = out;
  r.number(doc, "workers", "config", cfg.workers);
  if (cfg.workers < 0) r.fail("workers", "must be >= 0");
  r.boolean(doc, "fail_fast", "config", cfg.fail_fast);

  if (!r.problems.empty()) {
    std::string msg = origin + ": " + std::to_string(r.problems.size()) + " problem(s)";
    for (const auto& p : r.problems) msg += "\n  - " + p;
    throw Error(ErrorKind::config, msg);
  }
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) { return load_config(path, ConfigFlags{}); }

void merge_flags(json& document, const ConfigFlags& flags) {
  if (!document.is_object()) return;
  for (const auto& [path, value] : flags.values) {
    json* node = &document;
    std::string rest = path;
    for (auto dot = rest.find('.'); dot != std::string::npos; dot = rest.find('.')) {
      const std::string head = rest.substr(0, dot);
      if (!node->contains(head)) (*node)[head] = json::object();
      node = &(*node)[head];
      if (!node->is_object()) break;
      rest = rest.substr(dot + 1);
    }
    if (!node->is_object()) continue;
    if (!node->contains(rest) || flags.override_file) (*node)[rest] = value;
  }
}

ExperimentConfig load_config(const fs::path& path, const ConfigFlags& flags) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::config, "cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  std::string text = ss.str();
  if (!flags.values.empty()) {
    json doc;
    try {
      doc = json::parse(text);
    } catch (const json::parse_error&) {
      return parse_config(text, path.parent_path(), path.string());  // reports the position
    }
    merge_flags(doc, flags);
    text = doc.dump(2);
  }
  return parse_config(text, path.parent_path().empty() ? fs::path(".") : path.parent_path(), path.string());
}

// ---------------------------------------------------------------------------
// Building models

namespace {

Tokens tokens_of(const json& v, const std::optional<Vocab>& vocab) {
  Reader r;
  auto t = r.tokens(v, "tokens", vocab);
  if (!t) throw Error(ErrorKind::config, r.problems.front());
  return *t;
}

RewardBounds bounds_of(const json& j, RewardBounds dflt) {
  if (!j.contains("bounds")) return dflt;
  return {j.at("bounds")[0].get<double>(), j.at("bounds")[1].get<double>()};
}

}  // namespace

PolicyPtr build_agent(const AgentSpec& spec, const std::optional<Vocab>& vocab) {
  const json& j = spec.spec;
  if (spec.type == "remote") {
    auto client = std::make_shared<RemoteClient>(endpoint_from(j.at("endpoint")));
    auto agent = std::make_shared<RemoteAgent>(client, spec.name);
    if (vocab && !vocab->same_shape(agent->vocab()))
      throw Error(ErrorKind::config, "agent '" + spec.name + "' serves vocab " + std::to_string(agent->vocab().size()) +
                                         "/eos " + std::to_string(agent->vocab().eos()) +
                                         ", config declares " + std::to_string(vocab->size()) + "/eos " +
                                         std::to_string(vocab->eos()));
    return agent;
  }
  if (!vocab) throw Error(ErrorKind::config, "agent '" + spec.name + "' needs a vocabulary");
  if (spec.type == "uniform") return std::make_shared<UniformPolicy>(*vocab);
  if (spec.type == "tabular") {
    TabularPolicy::Table rows;
    if (j.contains("rows"))
      for (const auto& e : j.at("rows")) rows[tokens_of(e.at("context"), vocab)] = e.at("probs").get<std::vector<double>>();
    std::optional<std::vector<double>> dflt;
    if (j.contains("default")) dflt = j.at("default").get<std::vector<double>>();
    return std::make_shared<TabularPolicy>(*vocab, std::move(rows), std::move(dflt), spec.name);
  }
  if (spec.type == "ngram") {
    auto p = std::make_shared<NGramPolicy>(*vocab, j.value("order", 2), j.value("lambda", 1.0), spec.name);
    if (j.contains("corpus"))
      for (const auto& seq : j.at("corpus")) p->observe(tokens_of(seq, vocab));
    return p;
  }
  throw Error(ErrorKind::config, "unknown agent type '" + spec.type + "'");
}

RewardPtr build_reward(const json& j, const std::optional<Vocab>& vocab) {
  const std::string type = j.at("type").get<std::string>();
  if (type == "keyword") {
    const Tokens t = tokens_of(j.at("tokens"), vocab);
    return std::make_shared<KeywordReward>(std::set<TokenId>(t.begin(), t.end()), j.value("weight", 1.0),
                                           bounds_of(j, {0.0, 1.0}));
  }
  if (type == "constant") return std::make_shared<ConstantReward>(j.at("value").get<double>());
  if (type == "tabular") {
    std::map<Tokens, double> table;
    for (const auto& e : j.at("entries")) table[tokens_of(e.at("response"), vocab)] = e.at("reward").get<double>();
    return std::make_shared<TabularTrajectoryReward>(std::move(table), bounds_of(j, {0.0, 1.0}),
                                                     j.value("name", std::string("tabular")));
  }
  if (type == "blend") {
    std::vector<BlendReward::Component> comps;
    for (const auto& c : j.at("components"))
      comps.emplace_back(c.at("weight").get<double>(), build_reward(c.at("reward"), vocab));
    return std::make_shared<BlendReward>(std::move(comps));
  }
  if (type == "remote") {
    auto client = std::make_shared<RemoteClient>(endpoint_from(j.at("endpoint")));
    const ProtocolInfo& info = client->info();
    if (vocab && (info.vocab_size != vocab->size() || info.eos_id != vocab->eos()))
      throw Error(ErrorKind::config, "reward endpoint vocabulary differs from the agents'");
    return std::make_shared<RemoteReward>(client, j.value("name", std::string()));
  }
  throw Error(ErrorKind::config, "unknown reward type '" + type + "'");
}

Experiment build_experiment(const ExperimentConfig& cfg) {
  Experiment exp;
  std::optional<Vocab> vocab = cfg.vocab;
  std::vector<ProtocolInfo> infos;
  for (const auto& spec : cfg.agents) {
    PolicyPtr p = build_agent(spec, vocab);
    if (!vocab) vocab = p->vocab();
    if (auto remote = std::dynamic_pointer_cast<const RemoteAgent>(p)) infos.push_back(remote->client().info());
    exp.agents.push_back(std::move(p));
  }
  check_pool_compatible(infos);
  exp.vocab = *vocab;
  exp.pool.emplace(exp.agents, cfg.decoder.ref);
  exp.target = build_reward(cfg.reward, vocab);
  exp.decoder = cfg.decoder;
  exp.rollout = cfg.rollout;
  return exp;
}

// ---------------------------------------------------------------------------
// Running

DecodeTrace decode_one(const Experiment& exp, const ExperimentConfig& cfg, const MethodSpec& method,
                       const Tokens& prompt, std::size_t index) {
  DecoderConfig d = exp.decoder;
  d.seed = prompt_seed(exp.decoder.seed, index);
  RolloutConfig r = exp.rollout;
  r.seed = prompt_seed(exp.rollout.seed, index);
  switch (method.kind) {
    case MethodKind::collab:
      return collab_decode(*exp.pool, *exp.target, prompt, d, r);
    case MethodKind::single: {
      DecodeTrace t = single_agent_decode(*exp.agents.at(static_cast<std::size_t>(method.agent)), *exp.target,
                                          prompt, d, r, cfg.single_mode);
      // Attribution is indexed by pool position.
      std::vector<int> attr(exp.agents.size(), 0);
      attr[static_cast<std::size_t>(method.agent)] = static_cast<int>(t.output.size());
      t.attribution = attr;
      for (auto& s : t.steps) {
        s.chosen_agent = method.agent;
        for (auto& c : s.candidates) c.agent = method.agent;
      }
      return t;
    }
    case MethodKind::bon:
      return bon_decode(*exp.pool, *exp.target, prompt, cfg.bon_n, d);
  }
  throw Error(ErrorKind::contract, "unknown method");
}

std::string cell_file_name(const Cell& cell) {
  std::string m = cell.method;
  std::replace(m.begin(), m.end(), ':', '-');
  char buf[32];
  std::snprintf(buf, sizeof buf, "p%04d_", cell.prompt);
  return "traces/" + std::string(buf) + m + ".json";
}

namespace {

void write_canonical(CanonicalWriter& w, const json& j) {
  switch (j.type()) {
    case json::value_t::object:
      w.begin_object();
      for (const auto& [k, v] : j.items()) {
        w.key(k);
        write_canonical(w, v);
      }
      w.end_object();
      break;
    case json::value_t::array:
      if (!j.empty() && std::all_of(j.begin(), j.end(), [](const json& x) { return x.is_number_integer(); }) &&
          std::all_of(j.begin(), j.end(), [](const json& x) {
            const auto v = x.get<long long>();
            return v >= std::numeric_limits<std::int32_t>::min() && v <= std::numeric_limits<std::int32_t>::max();
          })) {
        w.ints(j.get<std::vector<std::int32_t>>());
        break;
      }
      w.begin_array();
      for (const auto& v : j) write_canonical(w, v);
      w.end_array();
      break;
    case json::value_t::string: w.value(j.get<std::string>()); break;
    case json::value_t::boolean: w.value(j.get<bool>()); break;
    case json::value_t::number_integer: w.value(j.get<std::int64_t>()); break;
    case json::value_t::number_unsigned: w.value(j.get<std::uint64_t>()); break;
    case json::value_t::number_float: w.value(j.get<double>()); break;
    default: w.null(); break;
  }
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_file(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::config, "cannot write " + path.string());
  out << content;
}

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

std::string report_json(const RunResult& run, const ExperimentConfig&) { return run.report.summary_json(); }

std::string manifest_json(const RunResult& run, const ExperimentConfig& cfg) {
  json config = cfg.document;
  config.erase("output_dir");
  json prompts = json::object();
  prompts["ids"] = run.prompts;
  if (cfg.document.contains("prompts") && cfg.document.at("prompts").contains("max_len"))
    prompts["max_len"] = cfg.document.at("prompts").at("max_len");
  config["prompts"] = prompts;

  CanonicalWriter w;
  w.begin_object();
  w.key("tool_version").value(kToolVersion);
  w.key("protocol_version").value(kProtocolVersion);
  w.key("config");
  write_canonical(w, config);
  w.key("seeds").begin_object();
  w.key("decoder").value(cfg.decoder.seed);
  w.key("rollout").value(cfg.rollout.seed);
  w.key("per_prompt").begin_array();
  for (std::size_t i = 0; i < run.prompts.size(); ++i) w.value(prompt_seed(cfg.decoder.seed, i));
  w.end_array();
  w.end_object();
  w.key("outputs").begin_array();
  for (const auto& [file, digest] : run.digests) {
    w.begin_object().key("file").value(file).key("fnv1a").value(hex64(digest)).end_object();
  }
  w.end_array();
  w.key("cells").begin_array();
  for (const auto& c : run.cells) {
    w.begin_object();
    w.key("method").value(c.method);
    w.key("prompt").value(c.prompt);
    w.key("status").value(c.status);
    if (!c.error.empty()) w.key("error").value(c.error);
    w.key("wall_ms").value(c.wall_ms);
    w.end_object();
  }
  w.end_array();
  w.key("exit_code").value(run.exit_code);
  w.key("wall_ms").value(run.wall_ms);
  w.end_object();
  return w.str();
}

RunResult run_experiment(const ExperimentConfig& cfg, bool write) {
  const auto t0 = std::chrono::steady_clock::now();
  RunResult run;
  Experiment exp = build_experiment(cfg);
  PromptSet ps = load_prompts(cfg.prompts, exp.vocab, cfg.max_prompt_len);
  if (cfg.n_prompts && static_cast<int>(ps.prompts.size()) > *cfg.n_prompts) ps.prompts.resize(*cfg.n_prompts);
  run.prompts = ps.prompts;
  run.prompt_warnings = ps.warnings;
  for (const auto& w : ps.warnings) log::warn("{}", w);

  const std::size_t n_methods = cfg.methods.size();
  run.cells.resize(run.prompts.size() * n_methods);
  for (std::size_t i = 0; i < run.cells.size(); ++i) {
    run.cells[i].prompt = static_cast<int>(i / n_methods);
    run.cells[i].method = cfg.methods[i % n_methods].name;
    run.cells[i].status = "skipped";
  }

  std::atomic<std::size_t> next{0};
  std::atomic<bool> abort{false};
  auto worker = [&] {
    for (std::size_t i = next++; i < run.cells.size(); i = next++) {
      if (abort.load()) continue;
      Cell& cell = run.cells[i];
      const auto c0 = std::chrono::steady_clock::now();
      try {
        cell.trace = decode_one(exp, cfg, cfg.methods[i % n_methods], run.prompts[static_cast<std::size_t>(cell.prompt)],
                                static_cast<std::size_t>(cell.prompt));
        cell.status = "ok";
      } catch (const DecodeError& e) {
        cell.status = std::string(to_string(e.kind()));
        cell.error = e.detail();
        cell.trace = e.partial();
        log::error("prompt {} method {}: {}", cell.prompt, cell.method, e.what());
        if (cfg.fail_fast) abort = true;
      } catch (const Error& e) {
        cell.status = std::string(to_string(e.kind()));
        cell.error = e.detail();
        log::error("prompt {} method {}: {}", cell.prompt, cell.method, e.what());
        if (cfg.fail_fast) abort = true;
      }
      cell.wall_ms = ms_since(c0);
    }
  };
  int n_workers = cfg.workers > 0 ? cfg.workers : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  n_workers = std::min<int>(n_workers, static_cast<int>(std::max<std::size_t>(run.cells.size(), 1)));
  std::vector<std::thread> pool;
  for (int w = 1; w < n_workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  const TokenCountEmbedder embedder(exp.vocab.size());
  std::vector<PromptRow> rows;
  std::size_t ok = 0;
  for (const auto& cell : run.cells) {
    const Tokens& prompt = run.prompts[static_cast<std::size_t>(cell.prompt)];
    if (cell.status == "ok") {
      ++ok;
      rows.push_back(score_output(cell.method, cell.prompt, prompt, cell.trace->output, cell.trace->reward, embedder));
    } else {
      PromptRow row;
      row.method = cell.method;
      row.prompt = cell.prompt;
      row.status = cell.status;
      rows.push_back(row);
    }
  }
  std::vector<std::string> order;
  for (const auto& m : cfg.methods) order.push_back(m.name);
  run.report = build_report(order, std::move(rows), cfg.normalization);
  run.report.warnings.insert(run.report.warnings.begin(), run.prompt_warnings.begin(), run.prompt_warnings.end());

  if (ok == run.cells.size())
    run.exit_code = exit_ok;
  else if (ok == 0)
    run.exit_code = exit_backend;
  else
    run.exit_code = exit_partial;

  if (write) {
    std::vector<std::pair<std::string, std::string>> files;
    for (const auto& cell : run.cells)
      if (cell.trace) files.emplace_back(cell_file_name(cell), serialize_trace(*cell.trace, &exp.vocab));
    files.emplace_back("report.json", report_json(run, cfg));
    files.emplace_back("report.csv", run.report.csv());
    for (const auto& [name, content] : files) {
      write_file(cfg.output_dir / name, content);
      run.digests.emplace_back(name, fnv1a(content));
    }
    run.wall_ms = ms_since(t0);
    write_file(cfg.output_dir / "manifest.json", manifest_json(run, cfg));
  } else {
    run.wall_ms = ms_since(t0);
  }
  return run;
}

ReplayResult replay(const fs::path& manifest_path, const fs::path& out_dir) {
  std::ifstream in(manifest_path);
  if (!in) throw Error(ErrorKind::config, "cannot read manifest " + manifest_path.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::config, manifest_path.string() + ": " + e.what());
  }
  if (!manifest.contains("config") || !manifest.contains("outputs"))
    throw Error(ErrorKind::config, manifest_path.string() + ": not a run manifest");
  if (manifest.value("tool_version", std::string()) != kToolVersion)
    log::warn("manifest was written by version {}, replaying with {}", manifest.value("tool_version", "?"),
              kToolVersion);
  json config = manifest.at("config");
  config["output_dir"] = out_dir.string();
  ExperimentConfig cfg = parse_config(config.dump(2), manifest_path.parent_path(), manifest_path.string());

  ReplayResult res;
  res.run = run_experiment(cfg, true);
  std::map<std::string, std::string> fresh;
  for (const auto& [file, digest] : res.run.digests) fresh[file] = hex64(digest);
  std::set<std::string> recorded;
  for (const auto& o : manifest.at("outputs")) {
    const std::string file = o.at("file").get<std::string>();
    recorded.insert(file);
    auto it = fresh.find(file);
    if (it == fresh.end())
      res.mismatches.push_back(file + ": missing from the replay");
    else if (it->second != o.at("fnv1a").get<std::string>())
      res.mismatches.push_back(file + ": digest " + it->second + " differs from recorded " +
                               o.at("fnv1a").get<std::string>());
  }
  for (const auto& [file, d] : fresh)
    if (!recorded.count(file)) res.mismatches.push_back(file + ": not in the recorded run");
  res.matched = res.mismatches.empty();
  return res;
}

// ---------------------------------------------------------------------------
// Theory verification

std::string VerifySummary::describe() const {
  auto rate = [](long checks, long bad) {
    return checks == 0 ? std::string("n/a") : format_double(100.0 * static_cast<double>(checks - bad) / checks) + "%";
  };
  std::string s = "theorem: " + std::to_string(theorem_checks) + " checks, pass rate " +
                  rate(theorem_checks, theorem_violations) + ", min slack " + format_double(theorem_min_slack);
  if (lemma_checks > 0)
    s += "\nlemma: " + std::to_string(lemma_checks) + " checks, pass rate " + rate(lemma_checks, lemma_violations) +
         ", min slack " + format_double(lemma_min_slack);
  return s;
}

VerifySummary verify_cmd(const VerifyParams& params, const std::function<void(const std::string&)>& sink) {
  if (params.n <= 0) throw Error(ErrorKind::usage, "verify needs n >= 1 instances");
  VerifySummary sum;
  sum.theorem_min_slack = std::numeric_limits<double>::infinity();
  sum.lemma_min_slack = std::numeric_limits<double>::infinity();
  std::ofstream out;
  if (params.out) {
    if (params.out->has_parent_path()) fs::create_directories(params.out->parent_path());
    out.open(*params.out, std::ios::trunc);
    if (!out) throw Error(ErrorKind::config, "cannot write " + params.out->string());
  }
  auto emit = [&](std::uint64_t seed, const std::string& kind, const std::string& body) {
    const std::string line = "{\"instance\":" + std::to_string(seed) + ",\"check\":\"" + kind + "\",\"report\":" + body + "}";
    if (out) out << line << "\n";
    if (sink) sink(line);
  };
  for (int n = 0; n < params.n; ++n) {
    const std::uint64_t seed = mix_seed(params.seed, static_cast<std::uint64_t>(n));
    InstanceParams ip = random_params(seed);
    ip.corrupt = params.corrupt;
    const SyntheticInstance inst = gen_instance(ip, seed);
    InstanceVerifier v(inst);
    for (const auto& s : inst.states()) {
      for (TokenId z = 0; z < inst.vocab.size(); ++z) {
        std::vector<OptimumKind> kinds{OptimumKind::unregularized};
        if (params.gibbs) kinds.push_back(OptimumKind::gibbs);
        for (OptimumKind k : kinds) {
          const BoundReport rep = v.theorem1(s, z, k);
          ++sum.theorem_checks;
          sum.theorem_min_slack = std::min(sum.theorem_min_slack, rep.slack);
          if (!rep.holds) ++sum.theorem_violations;
          if (out || sink) emit(seed, "theorem1", serialize_bound_report(rep));
        }
        if (!params.lemma) continue;
        for (int i = 0; i < ip.n_agents; ++i)
          for (int j = 0; j < ip.n_agents; ++j) {
            if (i == j) continue;
            const LemmaReport rep = v.lemma1(i, j, s, z);
            ++sum.lemma_checks;
            sum.lemma_min_slack = std::min(sum.lemma_min_slack, rep.slack);
            if (!rep.holds) ++sum.lemma_violations;
            if (out || sink) emit(seed, "lemma1", serialize_lemma_report(rep));
          }
      }
    }
  }
  if (sum.lemma_checks == 0) sum.lemma_min_slack = 0.0;
  return sum;
}

}  // namespace collab
