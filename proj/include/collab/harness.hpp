#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "collab/core.hpp"
#include "collab/decoder.hpp"
#include "collab/metrics.hpp"
#include "collab/policy.hpp"
#include "collab/qeval.hpp"
#include "collab/remote.hpp"
#include "collab/reward.hpp"
#include "collab/theory.hpp"

namespace collab {

inline constexpr const char* kToolVersion = "0.1.0";

/// Process exit codes.
enum ExitCode : int {
  exit_ok = 0,
  exit_config = 2,
  exit_backend = 3,
  exit_partial = 4,
  exit_violation = 5,
};

int exit_code_for(ErrorKind kind);

struct PromptSource {
  enum class Kind { inline_ids, inline_text, file_ids, file_labels };
  Kind kind = Kind::inline_ids;
  std::vector<Tokens> ids;
  std::vector<std::string> text;
  std::filesystem::path path;
  std::string describe() const;
};

struct PromptSet {
  std::vector<Tokens> prompts;
  std::string source;
  std::vector<std::string> warnings;
};

inline constexpr int kDefaultPromptCap = 128;

/// Prompts longer than `cap` keep their last `cap` tokens; each cut is
/// recorded in `warnings`. The vocabulary must carry labels for label modes.
PromptSet load_prompts(const PromptSource& source, const Vocab& vocab, int cap = kDefaultPromptCap);
/// One whitespace-separated prompt per non-blank line.
PromptSet parse_prompt_text(const std::string& text, bool labels, const Vocab& vocab, int cap,
                            const std::string& source);

struct AgentSpec {
  std::string name;
  std::string type;  // uniform | tabular | ngram | remote
  nlohmann::json spec;
};

enum class MethodKind { collab, single, bon };

struct MethodSpec {
  std::string name;  // "collab", "single", "single:<j>", "bon"
  MethodKind kind = MethodKind::collab;
  int agent = 0;  // for single
};

struct ExperimentConfig {
  std::optional<Vocab> vocab;  // required unless every model is remote
  std::vector<AgentSpec> agents;
  nlohmann::json reward;
  DecoderConfig decoder;
  bool max_new_tokens_set = false;
  RolloutConfig rollout;
  std::vector<MethodSpec> methods;
  int bon_n = 4;
  SingleMode single_mode = SingleMode::greedy;
  PromptSource prompts;
  int max_prompt_len = kDefaultPromptCap;
  std::optional<int> n_prompts;
  NormalizationOptions normalization;
  std::filesystem::path output_dir = "out";
  int workers = 0;  // 0: hardware concurrency
  bool fail_fast = false;

  /// The document this config was read from, after flag merging.
  nlohmann::json document;
  std::filesystem::path base_dir;

  bool has_remote() const;
};

/// Strict parse: unknown keys and type errors are collected and reported
/// together. JSON syntax errors carry line and column.
ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = ".",
                              const std::string& origin = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);

/// Command-line values for config keys ("decoder.alpha" style paths). Each is
/// applied only where the document lacks the key, unless `override_file`.
struct ConfigFlags {
  std::vector<std::pair<std::string, nlohmann::json>> values;
  bool override_file = false;
  void set(const std::string& path, nlohmann::json v) { values.emplace_back(path, std::move(v)); }
};
void merge_flags(nlohmann::json& document, const ConfigFlags& flags);
ExperimentConfig load_config(const std::filesystem::path& path, const ConfigFlags& flags);

/// Models built from a config (remote endpoints are contacted here).
struct Experiment {
  Vocab vocab{2, 0};
  std::vector<PolicyPtr> agents;
  std::optional<AgentPool> pool;
  RewardPtr target;
  DecoderConfig decoder;
  RolloutConfig rollout;
};

Experiment build_experiment(const ExperimentConfig& cfg);
PolicyPtr build_agent(const AgentSpec& spec, const std::optional<Vocab>& vocab);
RewardPtr build_reward(const nlohmann::json& spec, const std::optional<Vocab>& vocab);

/// Seeds used for prompt `index`: seed XOR splitmix64(index).
std::uint64_t prompt_seed(std::uint64_t seed, std::size_t index);

struct Cell {
  std::string method;
  int prompt = 0;
  std::string status = "ok";  // ok | skipped | <error kind>
  std::string error;
  std::optional<DecodeTrace> trace;
  double wall_ms = 0.0;
};

struct RunResult {
  std::vector<Tokens> prompts;
  std::vector<std::string> prompt_warnings;
  std::vector<Cell> cells;  // prompt-major, methods in config order
  EvalReport report;
  int exit_code = exit_ok;
  std::vector<std::pair<std::string, std::uint64_t>> digests;  // file -> fnv1a of contents
  double wall_ms = 0.0;
};

std::string cell_file_name(const Cell& cell);
std::string report_json(const RunResult& run, const ExperimentConfig& cfg);
std::string manifest_json(const RunResult& run, const ExperimentConfig& cfg);

/// Runs every prompt x method cell on a worker pool. When `write` is set the
/// traces, report.json, report.csv and manifest.json go to cfg.output_dir.
RunResult run_experiment(const ExperimentConfig& cfg, bool write = true);

/// Decodes prompt number `index` with one method, using the per-prompt seeds.
DecodeTrace decode_one(const Experiment& exp, const ExperimentConfig& cfg, const MethodSpec& method,
                       const Tokens& prompt, std::size_t index);

/// Parses a method name ("collab", "single", "single:<index or agent name>", "bon").
MethodSpec parse_method(const std::string& name, const std::vector<AgentSpec>& agents, const RefSelector& ref);

struct ReplayResult {
  bool matched = false;
  std::vector<std::string> mismatches;
  RunResult run;
};

/// Re-executes the run recorded in a manifest into `out_dir` and compares the
/// output digests.
ReplayResult replay(const std::filesystem::path& manifest, const std::filesystem::path& out_dir);

struct VerifyParams {
  int n = 100;
  std::uint64_t seed = 0;
  bool corrupt = false;
  bool lemma = true;
  bool gibbs = true;  // also certify against the regularised optimum
  std::optional<std::filesystem::path> out;  // JSON-lines reports
};

struct VerifySummary {
  long theorem_checks = 0;
  long theorem_violations = 0;
  double theorem_min_slack = 0.0;
  long lemma_checks = 0;
  long lemma_violations = 0;
  double lemma_min_slack = 0.0;
  bool ok() const { return theorem_violations == 0 && lemma_violations == 0; }
  std::string describe() const;
};

VerifySummary verify_cmd(const VerifyParams& params, const std::function<void(const std::string&)>& sink = {});

}  // namespace collab
