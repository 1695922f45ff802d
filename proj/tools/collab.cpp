#include <CLI11.hpp>

#include <pthread.h>

#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

#include "collab/harness.hpp"
#include "collab/log.hpp"

using namespace collab;

namespace {

struct Mirrors {
  std::optional<double> alpha, beta, tie_tolerance;
  std::optional<int> top_k, max_new_tokens, n_rollouts, workers, bon_n;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> q_method, out, reference;
  std::vector<std::string> methods;
  bool fail_fast = false;
  bool override_file = false;

  void add(CLI::App* app, bool run_flags) {
    app->add_option("--alpha", alpha, "decoder.alpha");
    app->add_option("--beta", beta, "decoder.beta");
    app->add_option("--top-k", top_k, "decoder.top_k");
    app->add_option("--max-new-tokens", max_new_tokens, "decoder.max_new_tokens");
    app->add_option("--seed", seed, "decoder.seed");
    app->add_option("--tie-tolerance", tie_tolerance, "decoder.tie_tolerance");
    app->add_option("--q-method", q_method, "decoder.q_method (auto|mc|prefix_proxy|exact_dp)");
    app->add_option("--n-rollouts", n_rollouts, "rollout.n_rollouts");
    app->add_option("--reference", reference, "reference (agent index, agent name or uniform)");
    app->add_option("--bon-n", bon_n, "bon.n");
    if (run_flags) {
      app->add_option("--methods", methods, "methods");
      app->add_option("--out", out, "output_dir");
      app->add_option("--workers", workers, "workers");
      app->add_flag("--fail-fast", fail_fast, "stop scheduling after the first failed cell");
    }
    app->add_flag("--override", override_file, "command-line values win over the config file");
  }

  ConfigFlags flags() const {
    ConfigFlags f;
    f.override_file = override_file;
    if (alpha) f.set("decoder.alpha", *alpha);
    if (beta) f.set("decoder.beta", *beta);
    if (top_k) f.set("decoder.top_k", *top_k);
    if (max_new_tokens) f.set("decoder.max_new_tokens", *max_new_tokens);
    if (seed) f.set("decoder.seed", *seed);
    if (tie_tolerance) f.set("decoder.tie_tolerance", *tie_tolerance);
    if (q_method) f.set("decoder.q_method", *q_method);
    if (n_rollouts) f.set("rollout.n_rollouts", *n_rollouts);
    if (bon_n) f.set("bon.n", *bon_n);
    if (reference) {
      try {
        f.set("reference", std::stoi(*reference));
      } catch (const std::exception&) {
        f.set("reference", *reference);
      }
    }
    if (!methods.empty()) f.set("methods", methods);
    if (out) f.set("output_dir", *out);
    if (workers) f.set("workers", *workers);
    if (fail_fast) f.set("fail_fast", true);
    return f;
  }
};

Tokens parse_prompt_arg(const std::string& text, const Vocab& vocab) {
  bool all_ints = true;
  std::istringstream in(text);
  std::string w;
  while (in >> w) all_ints = all_ints && w.find_first_not_of("0123456789") == std::string::npos;
  return parse_prompt_text(text, !all_ints, vocab, kDefaultPromptCap, "--prompt").prompts.front();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-agent switching decoder"};
  app.require_subcommand(1);
  int verbosity = 0;
  app.add_flag("-v,--verbose", verbosity, "more logging (repeat for debug)");

  // decode
  auto* decode = app.add_subcommand("decode", "decode one prompt and print its trace");
  std::string decode_config, decode_prompt, decode_method = "collab";
  int decode_index = 0;
  Mirrors decode_flags;
  decode->add_option("-c,--config", decode_config, "experiment config")->required();
  decode->add_option("-p,--prompt", decode_prompt, "prompt as token ids or labels (default: first config prompt)");
  decode->add_option("--prompt-index", decode_index, "index into the config's prompts");
  decode->add_option("-m,--method", decode_method, "collab | single | single:<agent> | bon");
  decode_flags.add(decode, false);

  // run
  auto* run = app.add_subcommand("run", "run an experiment");
  std::string run_config;
  Mirrors run_flags;
  run->add_option("-c,--config", run_config, "experiment config")->required();
  run_flags.add(run, true);

  // verify
  auto* verify = app.add_subcommand("verify", "certify the sub-optimality bounds on synthetic instances");
  VerifyParams vp;
  std::string verify_out;
  bool no_lemma = false, no_gibbs = false;
  verify->add_option("-n,--instances", vp.n, "number of seeded instances");
  verify->add_option("--seed", vp.seed, "base seed");
  verify->add_flag("--corrupt", vp.corrupt, "negative control: agents not aligned to their rewards");
  verify->add_flag("--no-lemma", no_lemma, "skip the pairwise agent bound");
  verify->add_flag("--no-gibbs", no_gibbs, "skip the regularised optimum");
  verify->add_option("-o,--out", verify_out, "write every report as JSON lines");

  // conformance
  auto* conf = app.add_subcommand("conformance", "run the wire-protocol suite against an endpoint");
  Endpoint conf_ep;
  std::vector<std::string> probes;
  conf->add_option("-u,--url", conf_ep.url, "endpoint base url")->required();
  conf->add_option("--timeout-ms", conf_ep.timeout_ms, "request timeout");
  conf->add_option("--attempts", conf_ep.attempts, "attempts per request");
  conf->add_option("--probe", probes, "probe context as space-separated token ids (repeatable)");

  // replay
  auto* rep = app.add_subcommand("replay", "re-execute a run from its manifest and compare outputs");
  std::string manifest, replay_out = "replay-out";
  rep->add_option("-m,--manifest", manifest, "manifest.json of a previous run")->required();
  rep->add_option("-o,--out", replay_out, "output directory for the replay");

  // serve-mock
  auto* serve = app.add_subcommand("serve-mock", "serve a config-defined toy agent over the wire protocol");
  std::string serve_config, serve_agent = "0", serve_version = kProtocolVersion;
  int serve_port = 8080;
  bool serve_reward = false;
  MockOptions mock;
  serve->add_option("-c,--config", serve_config, "experiment config with local agents")->required();
  serve->add_option("--agent", serve_agent, "agent index or name");
  serve->add_option("--port", serve_port, "port on 127.0.0.1");
  serve->add_flag("--with-reward", serve_reward, "also serve the config's reward");
  serve->add_option("--protocol-version", serve_version, "version string to announce");
  serve->add_option("--normalization-error", mock.normalization_error, "extra tail mass (fault injection)");
  serve->add_flag("--oob-reward", mock.out_of_bounds_reward, "score outside the declared bounds");
  serve->add_option("--fail-first", mock.fail_first_n, "answer 503 to the first n requests");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : exit_config;
  }
  if (verbosity == 1) log::set_level(spdlog::level::info);
  if (verbosity >= 2) log::set_level(spdlog::level::debug);

  try {
    if (*decode) {
      ExperimentConfig cfg = load_config(decode_config, decode_flags.flags());
      Experiment exp = build_experiment(cfg);
      Tokens prompt;
      if (!decode_prompt.empty()) {
        prompt = parse_prompt_arg(decode_prompt, exp.vocab);
      } else {
        PromptSet ps = load_prompts(cfg.prompts, exp.vocab, cfg.max_prompt_len);
        if (decode_index < 0 || decode_index >= static_cast<int>(ps.prompts.size()))
          throw Error(ErrorKind::usage, "--prompt-index out of range");
        prompt = ps.prompts[static_cast<std::size_t>(decode_index)];
      }
      const MethodSpec m = parse_method(decode_method, cfg.agents, cfg.decoder.ref);
      try {
        const DecodeTrace t = decode_one(exp, cfg, m, prompt, static_cast<std::size_t>(std::max(decode_index, 0)));
        std::cout << serialize_trace(t, &exp.vocab);
      } catch (const DecodeError& e) {
        std::cout << serialize_trace(e.partial(), &exp.vocab);
        throw;
      }
      return exit_ok;
    }
    if (*run) {
      ExperimentConfig cfg = load_config(run_config, run_flags.flags());
      RunResult r = run_experiment(cfg, true);
      std::cout << r.report.summary_json();
      std::cerr << "wrote " << r.cells.size() << " cells to " << cfg.output_dir.string() << "\n";
      return r.exit_code;
    }
    if (*verify) {
      vp.lemma = !no_lemma;
      vp.gibbs = !no_gibbs;
      if (!verify_out.empty()) vp.out = verify_out;
      const VerifySummary s = verify_cmd(vp);
      std::cout << s.describe() << "\n";
      return s.ok() ? exit_ok : exit_violation;
    }
    if (*conf) {
      ConformanceOptions opts;
      if (!probes.empty()) {
        opts.probe_contexts.clear();
        for (const auto& p : probes) {
          Tokens t;
          std::istringstream in(p);
          int x;
          while (in >> x) t.push_back(x);
          opts.probe_contexts.push_back(t);
        }
      }
      const ConformanceReport r = run_conformance(conf_ep.with_env_auth(), opts);
      std::cout << r.serialize();
      return r.passed() ? exit_ok : exit_violation;
    }
    if (*rep) {
      const ReplayResult r = replay(manifest, replay_out);
      for (const auto& m : r.mismatches) std::cerr << "mismatch: " << m << "\n";
      std::cout << (r.matched ? "replay matched" : "replay differs") << " (" << r.run.digests.size()
                << " files)\n";
      if (!r.matched) return exit_violation;
      return r.run.exit_code;
    }
    if (*serve) {
      ExperimentConfig cfg = load_config(serve_config);
      const MethodSpec m = parse_method("single:" + serve_agent, cfg.agents, cfg.decoder.ref);
      const AgentSpec& spec = cfg.agents.at(static_cast<std::size_t>(m.agent));
      if (spec.type == "remote") throw Error(ErrorKind::config, "serve-mock needs a local agent");
      mock.policy = build_agent(spec, cfg.vocab);
      mock.model = spec.name;
      mock.version = serve_version;
      if (serve_reward) mock.reward = build_reward(cfg.reward, cfg.vocab);
      // Server threads inherit the blocked mask; the main thread waits for the signal.
      sigset_t signals;
      sigemptyset(&signals);
      sigaddset(&signals, SIGINT);
      sigaddset(&signals, SIGTERM);
      pthread_sigmask(SIG_BLOCK, &signals, nullptr);
      MockServer server(mock);
      server.start(serve_port);
      std::cerr << "serving '" << spec.name << "' at " << server.url() << "\n";
      int sig = 0;
      sigwait(&signals, &sig);
      server.stop();
      return exit_ok;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_backend;
  }
  return exit_ok;
}
