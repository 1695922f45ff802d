#include "collab/remote.hpp"

#include <httplib.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <json.hpp>
#include <set>

#include "collab/canonical.hpp"
#include "collab/log.hpp"
#include "collab/rng.hpp"

namespace collab {

using nlohmann::json;

bool protocol_version_supported(const std::string& version) {
  return version == "1" || version.rfind("1.", 0) == 0;
}

void Endpoint::validate() const {
  if (url.rfind("http://", 0) != 0) throw Error(ErrorKind::config, "endpoint url must start with http://: " + url);
  if (timeout_ms <= 0) throw Error(ErrorKind::config, "endpoint timeout must be > 0");
  if (attempts < 1) throw Error(ErrorKind::config, "endpoint attempts must be >= 1");
  if (max_in_flight < 1) throw Error(ErrorKind::config, "endpoint max_in_flight must be >= 1");
  for (int b : backoff_ms)
    if (b < 0) throw Error(ErrorKind::config, "endpoint backoff entries must be >= 0");
}

int Endpoint::backoff_for(int attempt) const {
  if (backoff_ms.empty()) return 0;
  const auto i = std::min<std::size_t>(static_cast<std::size_t>(std::max(attempt, 0)), backoff_ms.size() - 1);
  return backoff_ms[i];
}

Endpoint Endpoint::with_env_auth() const {
  Endpoint e = *this;
  if (const char* tok = std::getenv("COLLAB_API_TOKEN"); tok && *tok) e.auth_token = tok;
  return e;
}

// ---------------------------------------------------------------------------
// RemoteClient

namespace {

json parse_body(const std::string& body, const std::string& what) {
  try {
    return json::parse(body);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::malformed, what + ": body is not valid JSON (" + e.what() + ")");
  }
}

const json& field(const json& j, const char* key, const std::string& what) {
  if (!j.is_object() || !j.contains(key)) throw Error(ErrorKind::malformed, what + ": missing field '" + key + "'");
  return j.at(key);
}

std::int64_t int_field(const json& j, const char* key, const std::string& what) {
  const json& v = field(j, key, what);
  if (!v.is_number_integer()) throw Error(ErrorKind::malformed, what + ": field '" + key + "' must be an integer");
  return v.get<std::int64_t>();
}

double num_field(const json& j, const char* key, const std::string& what) {
  const json& v = field(j, key, what);
  if (!v.is_number()) throw Error(ErrorKind::malformed, what + ": field '" + key + "' must be a number");
  return v.get<double>();
}

Tokens token_array(const json& v, const std::string& what) {
  if (!v.is_array()) throw Error(ErrorKind::malformed, what + ": expected an array of token ids");
  Tokens out;
  out.reserve(v.size());
  for (const auto& t : v) {
    if (!t.is_number_integer()) throw Error(ErrorKind::malformed, what + ": token ids must be integers");
    out.push_back(static_cast<TokenId>(t.get<std::int64_t>()));
  }
  return out;
}

std::string error_message(const std::string& body) {
  try {
    const json j = json::parse(body);
    if (j.contains("error") && j["error"].contains("message")) return j["error"]["message"].get<std::string>();
  } catch (...) {
  }
  return body.substr(0, 200);
}

}  // namespace

RemoteClient::RemoteClient(Endpoint ep) : ep_(std::move(ep)) {
  ep_.validate();
  const std::string rest = ep_.url.substr(7);
  const auto slash = rest.find('/');
  host_ = "http://" + rest.substr(0, slash);
  if (slash != std::string::npos) {
    prefix_ = rest.substr(slash);
    while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
  }
}

RemoteClient::~RemoteClient() = default;

std::unique_ptr<httplib::Client> RemoteClient::acquire() const {
  std::unique_lock lock(mu_);
  cv_.wait(lock, [&] { return in_flight_ < ep_.max_in_flight; });
  ++in_flight_;
  if (!idle_.empty()) {
    auto c = std::move(idle_.back());
    idle_.pop_back();
    return c;
  }
  lock.unlock();
  auto c = std::make_unique<httplib::Client>(host_);
  const auto ms = std::chrono::milliseconds(ep_.timeout_ms);
  c->set_connection_timeout(ms);
  c->set_read_timeout(ms);
  c->set_write_timeout(ms);
  c->set_keep_alive(true);
  return c;
}

void RemoteClient::release(std::unique_ptr<httplib::Client> c) const {
  {
    std::lock_guard lock(mu_);
    --in_flight_;
    if (c) idle_.push_back(std::move(c));
  }
  cv_.notify_one();
}

std::string RemoteClient::send(const std::string& method, const std::string& path, const std::string* body) const {
  httplib::Headers headers;
  if (ep_.auth_token) headers.emplace("Authorization", "Bearer " + *ep_.auth_token);
  const std::string target = prefix_ + path;
  std::string last;
  for (int attempt = 0; attempt < ep_.attempts; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(ep_.backoff_for(attempt - 1)));
    ++requests_;
    auto c = acquire();
    httplib::Result res = body ? c->Post(target, headers, *body, "application/json") : c->Get(target, headers);
    const bool ok_transport = static_cast<bool>(res);
    release(ok_transport ? std::move(c) : nullptr);
    if (!ok_transport) {
      last = "transport error: " + httplib::to_string(res.error());
    } else if (res->status >= 200 && res->status < 300) {
      return res->body;
    } else if (res->status >= 500 || res->status == 408 || res->status == 429) {
      last = "HTTP " + std::to_string(res->status) + ": " + error_message(res->body);
    } else {
      throw Error(ErrorKind::backend, method + " " + target + " answered HTTP " + std::to_string(res->status) + ": " +
                                          error_message(res->body));
    }
    log::debug("{} {}{} attempt {}/{} failed: {}", method, host_, target, attempt + 1, ep_.attempts, last);
  }
  throw Error(ErrorKind::network, method + " " + host_ + target + " failed after " + std::to_string(ep_.attempts) +
                                      " attempt(s): " + last);
}

std::string RemoteClient::get(const std::string& path) const { return send("GET", path, nullptr); }

std::string RemoteClient::post(const std::string& path, const std::string& body) const {
  return send("POST", path, &body);
}

ProtocolInfo RemoteClient::fetch_info() const {
  const std::string what = "/v1/info";
  const json j = parse_body(get(what), what);
  ProtocolInfo info;
  const json& ver = field(j, "version", what);
  if (!ver.is_string()) throw Error(ErrorKind::malformed, what + ": version must be a string");
  info.version = ver.get<std::string>();
  if (!protocol_version_supported(info.version))
    throw Error(ErrorKind::version_mismatch,
                "server speaks protocol " + info.version + ", client supports 1.x (" + ep_.url + ")");
  info.vocab_size = static_cast<int>(int_field(j, "vocab_size", what));
  info.eos_id = static_cast<TokenId>(int_field(j, "eos_id", what));
  if (info.vocab_size < 2 || info.eos_id < 0 || info.eos_id >= info.vocab_size)
    throw Error(ErrorKind::malformed, what + ": invalid vocab_size/eos_id");
  if (j.contains("model") && j["model"].is_string()) info.model = j["model"].get<std::string>();
  if (j.contains("reward_bounds") && !j["reward_bounds"].is_null()) {
    const json& b = j["reward_bounds"];
    RewardBounds rb{num_field(b, "lo", what), num_field(b, "hi", what)};
    if (!(rb.lo <= rb.hi)) throw Error(ErrorKind::malformed, what + ": reward_bounds lo > hi");
    info.reward_bounds = rb;
  }
  return info;
}

const ProtocolInfo& RemoteClient::info() const {
  std::call_once(info_once_, [&] { info_ = fetch_info(); });
  return *info_;
}

TokenDistribution RemoteClient::fetch_logprobs(const Tokens& tokens, int k) const {
  if (k < 1) throw Error(ErrorKind::contract, "logprobs k must be >= 1");
  const ProtocolInfo& inf = info();
  Vocab(inf.vocab_size, inf.eos_id).check(tokens);
  CanonicalWriter w(false);
  w.begin_object().key("tokens").ints(tokens).key("k").value(k).end_object();
  const std::string what = "/v1/logprobs";
  const json j = parse_body(post(what, w.str()), what);

  const json& entries = field(j, "entries", what);
  if (!entries.is_array()) throw Error(ErrorKind::malformed, what + ": entries must be an array");
  TokenDistribution d;
  std::set<TokenId> seen;
  double mass = 0.0;
  for (const auto& e : entries) {
    const auto t = static_cast<TokenId>(int_field(e, "token", what));
    const double lp = num_field(e, "logprob", what);
    if (t < 0 || t >= inf.vocab_size) throw Error(ErrorKind::conformance, what + ": token id out of range");
    if (!seen.insert(t).second) throw Error(ErrorKind::conformance, what + ": duplicate token id");
    if (!(lp <= 1e-9)) throw Error(ErrorKind::conformance, what + ": positive logprob");
    d.entries.push_back({t, std::exp(std::min(lp, 0.0))});
    mass += d.entries.back().prob;
  }
  if (static_cast<int>(d.entries.size()) > k)
    throw Error(ErrorKind::conformance, what + ": more than k entries returned");
  if (d.entries.empty()) throw Error(ErrorKind::conformance, what + ": no entries returned");
  double tail = 0.0;
  if (j.contains("tail_logprob") && !j["tail_logprob"].is_null()) {
    const double tl = num_field(j, "tail_logprob", what);
    if (!(tl <= 1e-9)) throw Error(ErrorKind::conformance, what + ": positive tail_logprob");
    tail = std::exp(std::min(tl, 0.0));
  }
  const double total = mass + tail;
  if (std::abs(total - 1.0) > 1e-6)
    throw Error(ErrorKind::conformance, what + ": probabilities sum to " + format_double(total) + " (tolerance 1e-6)");
  for (auto& e : d.entries) e.prob /= total;
  tail /= total;
  if (tail <= 1e-12 || static_cast<int>(d.entries.size()) == inf.vocab_size) {
    d.complete = true;
    d.tail_mass = 0.0;
    double m = 0.0;
    for (const auto& e : d.entries) m += e.prob;
    for (auto& e : d.entries) e.prob /= m;
  } else {
    d.tail_mass = tail;
  }
  d.sort_canonical();
  return d;
}

std::vector<Tokens> RemoteClient::fetch_rollouts(const Tokens& tokens, int n, int max_len, double temperature,
                                                 std::uint64_t seed) const {
  if (n < 1 || max_len < 1) throw Error(ErrorKind::contract, "rollout needs n >= 1 and max_len >= 1");
  if (!(temperature > 0.0)) throw Error(ErrorKind::contract, "rollout temperature must be > 0");
  const ProtocolInfo& inf = info();
  Vocab vocab(inf.vocab_size, inf.eos_id);
  vocab.check(tokens);
  CanonicalWriter w(false);
  w.begin_object()
      .key("tokens")
      .ints(tokens)
      .key("n")
      .value(n)
      .key("max_len")
      .value(max_len)
      .key("temperature")
      .value(temperature)
      .key("seed")
      .value(seed)
      .end_object();
  const std::string what = "/v1/rollout";
  const json j = parse_body(post(what, w.str()), what);
  const json& conts = field(j, "continuations", what);
  if (!conts.is_array()) throw Error(ErrorKind::malformed, what + ": continuations must be an array");
  std::vector<Tokens> out;
  for (const auto& c : conts) out.push_back(token_array(c, what));
  if (static_cast<int>(out.size()) != n)
    throw Error(ErrorKind::conformance, what + ": expected " + std::to_string(n) + " continuations, got " +
                                            std::to_string(out.size()));
  for (const auto& c : out) {
    if (static_cast<int>(c.size()) > max_len)
      throw Error(ErrorKind::conformance, what + ": continuation of length " + std::to_string(c.size()) +
                                              " exceeds max_len " + std::to_string(max_len));
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (!vocab.contains(c[i])) throw Error(ErrorKind::conformance, what + ": token id out of range");
      if (c[i] == vocab.eos() && i + 1 != c.size())
        throw Error(ErrorKind::conformance, what + ": tokens after eos in a continuation");
    }
  }
  return out;
}

double RemoteClient::fetch_reward(const Tokens& prompt, const Tokens& response) const {
  const ProtocolInfo& inf = info();
  Vocab vocab(inf.vocab_size, inf.eos_id);
  vocab.check(prompt);
  vocab.check(response);
  CanonicalWriter w(false);
  w.begin_object().key("prompt").ints(prompt).key("response").ints(response).end_object();
  const std::string what = "/v1/reward";
  const json j = parse_body(post(what, w.str()), what);
  const double r = num_field(j, "reward", what);
  if (!std::isfinite(r)) throw Error(ErrorKind::conformance, what + ": non-finite reward");
  if (inf.reward_bounds && !inf.reward_bounds->contains(r))
    throw Error(ErrorKind::conformance, what + ": reward " + format_double(r) + " outside declared bounds [" +
                                            format_double(inf.reward_bounds->lo) + ", " +
                                            format_double(inf.reward_bounds->hi) + "]");
  return r;
}

// ---------------------------------------------------------------------------
// Adapters

RemoteAgent::RemoteAgent(ClientPtr client, std::string name)
    : client_(std::move(client)),
      vocab_(client_->info().vocab_size, client_->info().eos_id),
      name_(name.empty() ? client_->info().model : std::move(name)) {
  id_ = splitmix64(fnv1a(client_->endpoint().url) ^ fnv1a(client_->info().model));
}

TokenDistribution RemoteAgent::query(const State& state, int want_top) const {
  return client_->fetch_logprobs(state.context(), want_top == kAllTokens ? vocab_.size() : want_top);
}

std::vector<Trajectory> RemoteAgent::continuations(const State& state, int n, int max_len, std::uint64_t seed) const {
  std::vector<Trajectory> out;
  for (auto& c : client_->fetch_rollouts(state.context(), n, max_len, 1.0, seed)) out.push_back({std::move(c), {}});
  return out;
}

RemoteReward::RemoteReward(ClientPtr client, std::string name) : client_(std::move(client)) {
  const ProtocolInfo& inf = client_->info();
  if (!inf.reward_bounds)
    throw Error(ErrorKind::capability, "endpoint " + client_->endpoint().url + " declares no reward_bounds");
  bounds_ = *inf.reward_bounds;
  name_ = name.empty() ? inf.model : std::move(name);
  id_ = splitmix64(fnv1a(client_->endpoint().url) ^ fnv1a(inf.model) ^ 0x726577617264ull);
}

double RemoteReward::score(const Tokens& prompt, const Tokens& response) const {
  return client_->fetch_reward(prompt, response);
}

void check_pool_compatible(const std::vector<ProtocolInfo>& infos) {
  for (std::size_t i = 1; i < infos.size(); ++i) {
    if (infos[i].vocab_size != infos[0].vocab_size || infos[i].eos_id != infos[0].eos_id)
      throw Error(ErrorKind::config, "cannot pool endpoints with different vocabularies: " +
                                         std::to_string(infos[0].vocab_size) + "/eos " +
                                         std::to_string(infos[0].eos_id) + " vs " +
                                         std::to_string(infos[i].vocab_size) + "/eos " +
                                         std::to_string(infos[i].eos_id));
  }
}

// ---------------------------------------------------------------------------
// MockServer

namespace {

void reply_error(httplib::Response& res, int status, std::string_view kind, const std::string& message) {
  CanonicalWriter w(false);
  w.begin_object().key("error").begin_object().key("kind").value(kind).key("message").value(message).end_object();
  w.end_object();
  res.status = status;
  res.set_content(w.str(), "application/json");
}

bool starts_with(const Tokens& tokens, const Tokens& prefix) {
  return prefix.size() <= tokens.size() && std::equal(prefix.begin(), prefix.end(), tokens.begin());
}

std::vector<Tokens> tempered_samples(const AgentPolicy& policy, const Tokens& context, int n, int max_len,
                                     double temperature, std::uint64_t seed) {
  std::vector<Tokens> out;
  for (int i = 0; i < n; ++i) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    State s{context, {}, false};
    Tokens c;
    while (static_cast<int>(c.size()) < max_len) {
      const TokenDistribution d = next_distribution(policy, s);
      std::vector<double> w;
      double total = 0.0;
      for (const auto& e : d.entries) {
        w.push_back(std::pow(e.prob, 1.0 / temperature));
        total += w.back();
      }
      const double u = rng.uniform() * total;
      double acc = 0.0;
      TokenId pick = d.entries.back().token;
      for (std::size_t j = 0; j < w.size(); ++j) {
        acc += w[j];
        if (u < acc) {
          pick = d.entries[j].token;
          break;
        }
      }
      c.push_back(pick);
      if (pick == policy.vocab().eos()) break;
      s.generated.push_back(pick);
    }
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace

MockServer::MockServer(MockOptions opts) : opts_(std::move(opts)), server_(std::make_unique<httplib::Server>()) {
  if (!opts_.policy) throw Error(ErrorKind::contract, "mock server needs a policy");
  install_routes();
}

MockServer::~MockServer() { stop(); }

void MockServer::install_routes() {
  // Handlers throw collab::Error; this maps them to protocol error bodies.
  auto guarded = [this](auto handler) {
    return [this, handler](const httplib::Request& req, httplib::Response& res) {
      const auto n = requests_++;
      if (n < static_cast<std::uint64_t>(opts_.fail_first_n)) {
        reply_error(res, 503, "backend", "injected transient failure");
        return;
      }
      try {
        handler(req, res);
      } catch (const json::exception& e) {
        reply_error(res, 400, "malformed", e.what());
      } catch (const Error& e) {
        const int status = e.kind() == ErrorKind::backend ? 500 : 422;
        reply_error(res, status, to_string(e.kind()), e.detail());
      }
    };
  };
  auto fail_if_prefixed = [this](const Tokens& tokens) {
    if (opts_.fail_prefix && starts_with(tokens, *opts_.fail_prefix))
      throw Error(ErrorKind::backend, "injected failure for this prefix");
  };
  const Vocab& vocab = opts_.policy->vocab();

  server_->Get("/v1/info", guarded([this, &vocab](const httplib::Request&, httplib::Response& res) {
    CanonicalWriter w(false);
    w.begin_object();
    w.key("version").value(opts_.version);
    w.key("vocab_size").value(vocab.size());
    w.key("eos_id").value(vocab.eos());
    w.key("model").value(opts_.model);
    if (opts_.reward) {
      const RewardBounds b = opts_.reward->bounds();
      w.key("reward_bounds").begin_object().key("lo").value(b.lo).key("hi").value(b.hi).end_object();
    }
    w.end_object();
    res.set_content(w.str(), "application/json");
  }));

  server_->Post("/v1/logprobs", guarded([this, &vocab, fail_if_prefixed](const httplib::Request& req,
                                                                         httplib::Response& res) {
    const json j = json::parse(req.body);
    const Tokens tokens = token_array(j.at("tokens"), "/v1/logprobs");
    const int k = j.at("k").get<int>();
    if (k < 1) throw Error(ErrorKind::contract, "k must be >= 1");
    vocab.check(tokens);
    fail_if_prefixed(tokens);
    const TokenDistribution d = next_distribution(*opts_.policy, State{tokens, {}, false}).truncated(k);
    CanonicalWriter w(false);
    w.begin_object().key("entries").begin_array();
    for (const auto& e : d.entries)
      w.begin_object().key("token").value(e.token).key("logprob").value(std::log(e.prob)).end_object();
    w.end_array();
    const double tail = d.tail_mass + opts_.normalization_error;
    w.key("tail_logprob");
    if (tail > 0.0)
      w.value(std::log(tail));
    else
      w.null();
    w.end_object();
    res.set_content(w.str(), "application/json");
  }));

  server_->Post("/v1/rollout", guarded([this, &vocab, fail_if_prefixed](const httplib::Request& req,
                                                                        httplib::Response& res) {
    const json j = json::parse(req.body);
    const Tokens tokens = token_array(j.at("tokens"), "/v1/rollout");
    const int n = j.at("n").get<int>();
    const int max_len = j.at("max_len").get<int>();
    const double temperature = j.at("temperature").get<double>();
    const auto seed = j.at("seed").get<std::uint64_t>();
    if (n < 1 || max_len < 1 || !(temperature > 0.0)) throw Error(ErrorKind::contract, "invalid rollout request");
    vocab.check(tokens);
    fail_if_prefixed(tokens);
    std::vector<Tokens> conts;
    if (auto it = opts_.scripted.find(tokens); it != opts_.scripted.end() && !it->second.empty()) {
      for (int i = 0; i < n; ++i) conts.push_back(it->second[static_cast<std::size_t>(i) % it->second.size()]);
    } else if (temperature == 1.0) {
      for (auto& t : opts_.policy->continuations(State{tokens, {}, false}, n, max_len, seed))
        conts.push_back(std::move(t.tokens));
    } else {
      conts = tempered_samples(*opts_.policy, tokens, n, max_len, temperature, seed);
    }
    if (opts_.overlong_rollouts && !conts.empty()) {
      Tokens& c = conts.front();
      if (!c.empty() && c.back() == vocab.eos()) c.pop_back();
      const TokenId filler = vocab.eos() == 0 ? 1 : 0;
      while (static_cast<int>(c.size()) <= max_len) c.push_back(filler);
    }
    CanonicalWriter w(false);
    w.begin_object().key("continuations").begin_array();
    for (const auto& c : conts) w.ints(c);
    w.end_array().end_object();
    res.set_content(w.str(), "application/json");
  }));

  server_->Post("/v1/reward", guarded([this, &vocab, fail_if_prefixed](const httplib::Request& req,
                                                                       httplib::Response& res) {
    if (!opts_.reward) throw Error(ErrorKind::capability, "this server hosts no reward model");
    const json j = json::parse(req.body);
    const Tokens prompt = token_array(j.at("prompt"), "/v1/reward");
    const Tokens response = token_array(j.at("response"), "/v1/reward");
    vocab.check(prompt);
    vocab.check(response);
    fail_if_prefixed(prompt);
    double r = opts_.reward->score(prompt, response);
    if (opts_.out_of_bounds_reward) r = opts_.reward->bounds().hi + 0.25;
    CanonicalWriter w(false);
    w.begin_object().key("reward").value(r).end_object();
    res.set_content(w.str(), "application/json");
  }));
}

void MockServer::start(int port) {
  if (thread_.joinable()) throw Error(ErrorKind::contract, "mock server already started");
  if (port == 0) {
    port_ = server_->bind_to_any_port("127.0.0.1");
    if (port_ <= 0) throw Error(ErrorKind::network, "mock server could not bind");
  } else {
    if (!server_->bind_to_port("127.0.0.1", port))
      throw Error(ErrorKind::network, "mock server could not bind port " + std::to_string(port));
    port_ = port;
  }
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
}

void MockServer::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

void MockServer::wait() {
  if (thread_.joinable()) thread_.join();
}

std::string MockServer::url() const { return "http://127.0.0.1:" + std::to_string(port_); }

// ---------------------------------------------------------------------------
// Conformance

bool ConformanceReport::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const ConformanceCheck& c) { return c.passed; });
}

const ConformanceCheck* ConformanceReport::find(const std::string& name) const {
  for (const auto& c : checks)
    if (c.name == name) return &c;
  return nullptr;
}

std::string ConformanceReport::serialize() const {
  CanonicalWriter w;
  w.begin_object();
  w.key("url").value(url);
  w.key("passed").value(passed());
  w.key("checks").begin_array();
  for (const auto& c : checks) {
    w.begin_object();
    w.key("name").value(c.name);
    w.key("passed").value(c.passed);
    w.key("error");
    if (c.error)
      w.value(to_string(*c.error));
    else
      w.null();
    w.key("message").value(c.message);
    w.end_object();
  }
  w.end_array();
  w.end_object();
  return w.str();
}

ConformanceReport run_conformance(const Endpoint& ep, const ConformanceOptions& opts) {
  ConformanceReport rep;
  rep.url = ep.url;
  RemoteClient client(ep);
  auto check = [&](const std::string& name, auto&& body) {
    ConformanceCheck c;
    c.name = name;
    try {
      c.message = body();
      c.passed = true;
    } catch (const Error& e) {
      c.error = e.kind();
      c.message = e.detail();
    } catch (const std::exception& e) {
      c.error = ErrorKind::malformed;
      c.message = e.what();
    }
    log::info("conformance {}: {} {}", name, c.passed ? "pass" : "FAIL", c.message);
    rep.checks.push_back(std::move(c));
    return rep.checks.back().passed;
  };

  ProtocolInfo info;
  if (!check("info", [&] {
        info = client.fetch_info();
        return "version " + info.version + ", vocab " + std::to_string(info.vocab_size) + ", eos " +
               std::to_string(info.eos_id);
      }))
    return rep;
  const Vocab vocab(info.vocab_size, info.eos_id);

  check("logprobs_topk", [&] {
    for (const auto& ctx : opts.probe_contexts)
      for (int k : {1, std::min(2, vocab.size())}) {
        const TokenDistribution d = client.fetch_logprobs(ctx, k);
        if (static_cast<int>(d.entries.size()) > k) throw Error(ErrorKind::conformance, "too many entries");
        d.validate(vocab, 1e-6);
      }
    return std::string("top-k reports normalised");
  });
  check("logprobs_complete", [&] {
    for (const auto& ctx : opts.probe_contexts) {
      const TokenDistribution d = client.fetch_logprobs(ctx, vocab.size() + 1);
      if (!d.complete || d.tail_mass != 0.0)
        throw Error(ErrorKind::conformance, "k beyond the vocabulary did not yield a complete distribution");
      d.validate(vocab, 1e-6);
    }
    return std::string("full rows complete");
  });
  check("logprobs_deterministic", [&] {
    for (const auto& ctx : opts.probe_contexts) {
      const auto a = client.fetch_logprobs(ctx, 2);
      const auto b = client.fetch_logprobs(ctx, 2);
      if (a.entries != b.entries || a.tail_mass != b.tail_mass)
        throw Error(ErrorKind::conformance, "identical logprob requests gave different answers");
    }
    return std::string("repeatable");
  });
  check("rollout_shape", [&] {
    for (const auto& ctx : opts.probe_contexts) {
      client.fetch_rollouts(ctx, opts.rollout_n, opts.rollout_max_len, 1.0, 7);
      for (const auto& c : client.fetch_rollouts(ctx, opts.rollout_n, 1, 1.0, 11))
        if (c.size() > 1) throw Error(ErrorKind::conformance, "max_len 1 violated");
    }
    return std::string("lengths within max_len");
  });
  check("rollout_deterministic", [&] {
    for (const auto& ctx : opts.probe_contexts) {
      const auto a = client.fetch_rollouts(ctx, opts.rollout_n, opts.rollout_max_len, 1.0, 42);
      const auto b = client.fetch_rollouts(ctx, opts.rollout_n, opts.rollout_max_len, 1.0, 42);
      if (a != b) throw Error(ErrorKind::conformance, "seeded rollouts are not reproducible");
    }
    return std::string("seeded rollouts reproducible");
  });
  if (info.reward_bounds) {
    check("reward_bounds", [&] {
      for (const auto& ctx : opts.probe_contexts) {
        for (const auto& r : opts.reward_probes) client.fetch_reward(ctx, r);
        for (const auto& c : client.fetch_rollouts(ctx, opts.rollout_n, opts.rollout_max_len, 1.0, 3))
          client.fetch_reward(ctx, c);
      }
      return std::string("scores within declared bounds");
    });
    check("reward_deterministic", [&] {
      for (const auto& ctx : opts.probe_contexts)
        for (const auto& r : opts.reward_probes)
          if (client.fetch_reward(ctx, r) != client.fetch_reward(ctx, r))
            throw Error(ErrorKind::conformance, "reward is not a pure function");
      return std::string("repeatable");
    });
  }
  return rep;
}

}  // namespace collab
