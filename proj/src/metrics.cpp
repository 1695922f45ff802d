#include "collab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "collab/canonical.hpp"

namespace collab {

double average_reward(const std::vector<double>& rewards) {
  if (rewards.empty()) throw Error(ErrorKind::contract, "average_reward of an empty list");
  return std::accumulate(rewards.begin(), rewards.end(), 0.0) / static_cast<double>(rewards.size());
}

namespace {

double normalize_one(double r, double anchor, double floor) {
  if (!(anchor > floor))
    throw Error(ErrorKind::degenerate, "normalization anchor " + format_double(anchor) + " is not above r_min " +
                                           format_double(floor));
  return (r - floor) / (anchor - floor);
}

}  // namespace

std::map<std::string, double> normalize_rewards(const std::map<std::string, double>& means,
                                                const std::string& anchor, double r_min) {
  auto it = means.find(anchor);
  if (it == means.end()) throw Error(ErrorKind::contract, "anchor method '" + anchor + "' has no mean");
  std::map<std::string, double> out;
  for (const auto& [m, r] : means) out[m] = m == anchor ? 1.0 : normalize_one(r, it->second, r_min);
  normalize_one(it->second, it->second, r_min);
  return out;
}

std::map<std::string, double> normalize_rewards(const std::map<std::string, double>& means,
                                                const std::string& anchor,
                                                const std::map<std::string, double>& r_min) {
  auto it = means.find(anchor);
  if (it == means.end()) throw Error(ErrorKind::contract, "anchor method '" + anchor + "' has no mean");
  std::map<std::string, double> out;
  for (const auto& [m, r] : means) {
    auto f = r_min.find(m);
    if (f == r_min.end()) throw Error(ErrorKind::contract, "no r_min for method '" + m + "'");
    const double v = normalize_one(r, it->second, f->second);
    out[m] = m == anchor ? 1.0 : v;
  }
  return out;
}

std::optional<double> diversity(const Tokens& tokens) {
  if (tokens.size() < 4) return std::nullopt;
  double product = 1.0;
  for (std::size_t n = 2; n <= 4; ++n) {
    std::set<Tokens> unique;
    const std::size_t total = tokens.size() - n + 1;
    for (std::size_t i = 0; i < total; ++i) unique.emplace(tokens.begin() + i, tokens.begin() + i + n);
    product *= static_cast<double>(unique.size()) / static_cast<double>(total);
  }
  return product;
}

std::vector<double> TokenCountEmbedder::embed(const Tokens& tokens) const {
  std::vector<double> v(static_cast<std::size_t>(vocab_size_), 0.0);
  for (TokenId t : tokens) {
    if (t < 0 || t >= vocab_size_) throw Error(ErrorKind::out_of_vocab, "token " + std::to_string(t));
    v[static_cast<std::size_t>(t)] += 1.0;
  }
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm > 0.0)
    for (double& x : v) x /= norm;
  return v;
}

std::optional<double> coherence(const Tokens& prompt, const Tokens& response, const Embedder& embedder) {
  if (prompt.empty() || response.empty()) return std::nullopt;
  const auto a = embedder.embed(prompt);
  const auto b = embedder.embed(response);
  if (a.size() != b.size()) throw Error(ErrorKind::contract, "embedding dimensions differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return std::nullopt;
  if (prompt == response) return 1.0;
  const double cos = std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
  return (cos + 1.0) / 2.0;
}

PromptRow score_output(std::string method, int prompt_index, const Tokens& prompt, const Tokens& output,
                       std::optional<double> reward, const Embedder& embedder) {
  PromptRow row;
  row.method = std::move(method);
  row.prompt = prompt_index;
  row.reward = reward;
  row.diversity = diversity(output);
  row.coherence = coherence(prompt, output, embedder);
  row.length = static_cast<int>(output.size());
  return row;
}

const MethodSummary* EvalReport::find(const std::string& method) const {
  for (const auto& m : methods)
    if (m.method == method) return &m;
  return nullptr;
}

namespace {

std::string cell(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

std::optional<double> mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  return average_reward(v);
}

}  // namespace

std::string EvalReport::csv() const {
  std::string out = "method,prompt,reward,diversity,coherence,length,status\n";
  for (const auto& r : rows) {
    out += r.method + "," + std::to_string(r.prompt) + "," + cell(r.reward) + "," + cell(r.diversity) + "," +
           cell(r.coherence) + "," + std::to_string(r.length) + "," + r.status + "\n";
  }
  return out;
}

std::string EvalReport::summary_json() const {
  CanonicalWriter w;
  w.begin_object();
  w.key("normalization").begin_object();
  w.key("anchor").value(normalization.anchor);
  w.key("r_min_mode").value(normalization.per_method_min ? "per_method" : "global");
  w.key("r_min").value(r_min);
  w.end_object();
  w.key("methods").begin_array();
  for (const auto& m : methods) {
    w.begin_object();
    w.key("method").value(m.method);
    w.key("mean_reward").value(m.mean_reward);
    w.key("normalized_reward").value(m.normalized_reward);
    w.key("diversity").value(m.mean_diversity);
    w.key("coherence").value(m.mean_coherence);
    w.key("n_prompts").value(m.n_prompts);
    w.key("n_failed").value(m.n_failed);
    w.end_object();
  }
  w.end_array();
  w.key("warnings").begin_array();
  for (const auto& s : warnings) w.value(s);
  w.end_array();
  w.end_object();
  return w.str();
}

EvalReport build_report(const std::vector<std::string>& method_order, std::vector<PromptRow> rows,
                        const NormalizationOptions& norm) {
  EvalReport rep;
  rep.normalization = norm;
  std::stable_sort(rows.begin(), rows.end(), [&](const PromptRow& a, const PromptRow& b) {
    auto rank = [&](const std::string& m) {
      return std::find(method_order.begin(), method_order.end(), m) - method_order.begin();
    };
    if (rank(a.method) != rank(b.method)) return rank(a.method) < rank(b.method);
    return a.prompt < b.prompt;
  });
  rep.rows = std::move(rows);

  std::map<std::string, double> means, mins;
  std::optional<double> global_min;
  for (const auto& name : method_order) {
    MethodSummary s;
    s.method = name;
    std::vector<double> rewards, div, coh;
    for (const auto& r : rep.rows) {
      if (r.method != name) continue;
      ++s.n_prompts;
      if (r.status != "ok") {
        ++s.n_failed;
        continue;
      }
      if (r.reward) rewards.push_back(*r.reward);
      if (r.diversity) div.push_back(*r.diversity);
      if (r.coherence) coh.push_back(*r.coherence);
    }
    s.mean_reward = mean_of(rewards);
    s.mean_diversity = mean_of(div);
    s.mean_coherence = mean_of(coh);
    if (s.mean_reward) {
      means[name] = *s.mean_reward;
      const double lo = *std::min_element(rewards.begin(), rewards.end());
      mins[name] = lo;
      global_min = global_min ? std::min(*global_min, lo) : lo;
    }
    rep.methods.push_back(std::move(s));
  }

  if (!means.count(norm.anchor)) {
    rep.warnings.push_back("normalization skipped: anchor method '" + norm.anchor + "' has no rewards");
    return rep;
  }
  try {
    std::map<std::string, double> normalized;
    if (norm.per_method_min) {
      normalized = normalize_rewards(means, norm.anchor, mins);
    } else {
      rep.r_min = global_min;
      normalized = normalize_rewards(means, norm.anchor, *global_min);
    }
    for (auto& s : rep.methods)
      if (auto it = normalized.find(s.method); it != normalized.end()) s.normalized_reward = it->second;
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::degenerate) throw;
    rep.warnings.push_back(std::string("normalization skipped: ") + e.what());
  }
  return rep;
}

}  // namespace collab
