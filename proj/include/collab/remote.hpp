#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "collab/core.hpp"
#include "collab/policy.hpp"
#include "collab/reward.hpp"

namespace httplib {
class Client;
class Server;
}  // namespace httplib

namespace collab {

inline constexpr const char* kProtocolVersion = "1.0";

/// Accepts any "1.x" version string.
bool protocol_version_supported(const std::string& version);

struct Endpoint {
  std::string url;  // http://host:port[/prefix]
  int timeout_ms = 30000;
  int attempts = 3;
  std::vector<int> backoff_ms{100, 400, 1600};  // last entry repeats
  std::optional<std::string> auth_token;
  int max_in_flight = 8;

  void validate() const;
  int backoff_for(int attempt) const;
  /// COLLAB_API_TOKEN, when set, replaces any configured token.
  Endpoint with_env_auth() const;
};

struct ProtocolInfo {
  std::string version;
  int vocab_size = 0;
  TokenId eos_id = 0;
  std::string model;
  std::optional<RewardBounds> reward_bounds;
};

/// Thread-safe client for one endpoint. Idle connections are pooled; at most
/// max_in_flight requests run at once.
class RemoteClient {
 public:
  explicit RemoteClient(Endpoint ep);
  ~RemoteClient();
  RemoteClient(const RemoteClient&) = delete;
  RemoteClient& operator=(const RemoteClient&) = delete;

  const Endpoint& endpoint() const { return ep_; }

  ProtocolInfo fetch_info() const;
  /// Cached after the first successful call.
  const ProtocolInfo& info() const;
  TokenDistribution fetch_logprobs(const Tokens& tokens, int k) const;
  std::vector<Tokens> fetch_rollouts(const Tokens& tokens, int n, int max_len, double temperature,
                                     std::uint64_t seed) const;
  double fetch_reward(const Tokens& prompt, const Tokens& response) const;

  std::uint64_t requests_sent() const { return requests_.load(); }

 private:
  std::string get(const std::string& path) const;
  std::string post(const std::string& path, const std::string& body) const;
  std::string send(const std::string& method, const std::string& path, const std::string* body) const;
  std::unique_ptr<httplib::Client> acquire() const;
  void release(std::unique_ptr<httplib::Client> c) const;

  Endpoint ep_;
  std::string host_;
  std::string prefix_;
  mutable std::mutex mu_;
  mutable std::condition_variable cv_;
  mutable std::vector<std::unique_ptr<httplib::Client>> idle_;
  mutable int in_flight_ = 0;
  mutable std::once_flag info_once_;
  mutable std::optional<ProtocolInfo> info_;
  mutable std::atomic<std::uint64_t> requests_{0};
};

using ClientPtr = std::shared_ptr<const RemoteClient>;

/// Agent served over the wire. Distributions are the server's top-k reports,
/// so complete_distributions() is false and Q defaults to rollouts.
class RemoteAgent final : public AgentPolicy {
 public:
  explicit RemoteAgent(ClientPtr client, std::string name = {});
  const Vocab& vocab() const override { return vocab_; }
  std::string name() const override { return name_; }
  std::uint64_t id() const override { return id_; }
  bool complete_distributions() const override { return false; }
  TokenDistribution query(const State& state, int want_top) const override;
  std::vector<Trajectory> continuations(const State& state, int n, int max_len, std::uint64_t seed) const override;
  const RemoteClient& client() const { return *client_; }

 private:
  ClientPtr client_;
  Vocab vocab_;
  std::string name_;
  std::uint64_t id_;
};

class RemoteReward final : public RewardModel {
 public:
  explicit RemoteReward(ClientPtr client, std::string name = {});
  double score(const Tokens& prompt, const Tokens& response) const override;
  RewardBounds bounds() const override { return bounds_; }
  std::string name() const override { return name_; }
  std::uint64_t id() const override { return id_; }

 private:
  ClientPtr client_;
  RewardBounds bounds_;
  std::string name_;
  std::uint64_t id_;
};

/// Rejects endpoints whose vocabulary size or eos differ from the first.
void check_pool_compatible(const std::vector<ProtocolInfo>& infos);

// ---------------------------------------------------------------------------
// In-process mock server

struct MockOptions {
  std::string version = kProtocolVersion;
  std::string model = "mock";
  PolicyPtr policy;  // queried with the request tokens as the prompt
  RewardPtr reward;  // optional
  std::map<Tokens, std::vector<Tokens>> scripted;  // rollout contexts answered verbatim (cycled)
  double normalization_error = 0.0;  // added to the reported tail mass
  bool out_of_bounds_reward = false;  // scores hi + 0.25
  int fail_first_n = 0;               // first n requests answer 503
  std::optional<Tokens> fail_prefix;  // requests whose tokens start with this answer 500
  bool overlong_rollouts = false;     // continuations one token past max_len
};

class MockServer {
 public:
  explicit MockServer(MockOptions opts);
  ~MockServer();
  MockServer(const MockServer&) = delete;
  MockServer& operator=(const MockServer&) = delete;

  /// Binds 127.0.0.1 (port 0 picks a free one) and serves on a background thread.
  void start(int port = 0);
  void stop();
  /// Blocks until stop() is called from another thread or a signal handler.
  void wait();
  int port() const { return port_; }
  std::string url() const;
  std::uint64_t requests() const { return requests_.load(); }

 private:
  void install_routes();

  MockOptions opts_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<std::uint64_t> requests_{0};
};

// ---------------------------------------------------------------------------
// Conformance suite

struct ConformanceCheck {
  std::string name;
  bool passed = false;
  std::optional<ErrorKind> error;
  std::string message;
};

struct ConformanceOptions {
  std::vector<Tokens> probe_contexts{Tokens{}};
  int rollout_n = 3;
  int rollout_max_len = 4;
  std::vector<Tokens> reward_probes{Tokens{}};  // responses scored against each probe context
};

struct ConformanceReport {
  std::string url;
  std::vector<ConformanceCheck> checks;
  bool passed() const;
  const ConformanceCheck* find(const std::string& name) const;
  std::string serialize() const;
};

ConformanceReport run_conformance(const Endpoint& ep, const ConformanceOptions& opts = {});

}  // namespace collab
