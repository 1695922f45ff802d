#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "collab/core.hpp"

namespace collab {

double average_reward(const std::vector<double>& rewards);

/// (r - r_min) / (r_anchor - r_min) for every method; the anchor maps to 1.
std::map<std::string, double> normalize_rewards(const std::map<std::string, double>& means,
                                                const std::string& anchor, double r_min);
/// Variant with a separate floor per method.
std::map<std::string, double> normalize_rewards(const std::map<std::string, double>& means,
                                                const std::string& anchor,
                                                const std::map<std::string, double>& r_min);

/// Product over n = 2..4 of unique/total n-grams. Absent below length 4.
std::optional<double> diversity(const Tokens& tokens);

class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual std::vector<double> embed(const Tokens& tokens) const = 0;
  virtual std::string name() const = 0;
};

/// Bag-of-tokens count vector, L2-normalised.
class TokenCountEmbedder final : public Embedder {
 public:
  explicit TokenCountEmbedder(int vocab_size) : vocab_size_(vocab_size) {}
  std::vector<double> embed(const Tokens& tokens) const override;
  std::string name() const override { return "token_count"; }

 private:
  int vocab_size_;
};

/// Cosine similarity mapped to [0, 1]. Absent for empty inputs or zero vectors.
std::optional<double> coherence(const Tokens& prompt, const Tokens& response, const Embedder& embedder);

struct PromptRow {
  std::string method;
  int prompt = 0;
  std::optional<double> reward;
  std::optional<double> diversity;
  std::optional<double> coherence;
  int length = 0;
  std::string status = "ok";  // "ok" or the error kind of a failed cell
};

PromptRow score_output(std::string method, int prompt_index, const Tokens& prompt, const Tokens& output,
                       std::optional<double> reward, const Embedder& embedder);

struct MethodSummary {
  std::string method;
  std::optional<double> mean_reward;
  std::optional<double> normalized_reward;
  std::optional<double> mean_diversity;
  std::optional<double> mean_coherence;
  int n_prompts = 0;
  int n_failed = 0;
};

struct NormalizationOptions {
  std::string anchor = "collab";
  bool per_method_min = false;  // default: one global floor over every scored cell
};

struct EvalReport {
  std::vector<MethodSummary> methods;
  std::vector<PromptRow> rows;
  NormalizationOptions normalization;
  std::optional<double> r_min;  // global floor, when used
  std::vector<std::string> warnings;

  const MethodSummary* find(const std::string& method) const;
  /// Columns: method,prompt,reward,diversity,coherence,length,status.
  std::string csv() const;
  std::string summary_json() const;
};

/// Aggregates rows in the given method order. Normalisation is skipped with a
/// warning when the anchor is missing or degenerate.
EvalReport build_report(const std::vector<std::string>& method_order, std::vector<PromptRow> rows,
                        const NormalizationOptions& norm = {});

}  // namespace collab
