#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "collab/harness.hpp"
#include "support.hpp"

using namespace collab;
using namespace collab::test;
namespace fs = std::filesystem;

namespace {

struct ScratchRoot {
  fs::path dir = fs::temp_directory_path() / ("collab-test-" + std::to_string(::getpid()));
  ~ScratchRoot() {
    std::error_code ec;
    fs::remove_all(dir, ec);
  }
};

fs::path scratch(const std::string& name) {
  static ScratchRoot root;
  const fs::path p = root.dir / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

const char* kMinimal = R"({
  "vocab": {"size": 3, "eos": 0},
  "agents": [{"type": "uniform"}],
  "reward": {"type": "constant", "value": 0.5},
  "prompts": {"ids": [[1]]}
})";

std::string config_error(const std::string& text) {
  try {
    parse_config(text);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::config);
    return e.what();
  }
  FAIL("expected a config error");
  return {};
}

ExperimentConfig toy(const fs::path& out) {
  ExperimentConfig cfg = load_config(fs::path(COLLAB_SOURCE_DIR) / "configs" / "toy.json");
  cfg.output_dir = out;
  cfg.document["output_dir"] = out.string();
  return cfg;
}

}  // namespace

TEST_CASE("config parsing") {
  const auto cfg = parse_config(kMinimal);
  CHECK(cfg.agents.size() == 1);
  CHECK(cfg.methods.size() == 1);
  CHECK(cfg.methods[0].kind == MethodKind::collab);
  CHECK(cfg.decoder.alpha == DecoderConfig{}.alpha);
  CHECK_FALSE(cfg.has_remote());

  SUBCASE("unknown key names itself") {
    const auto msg = config_error(R"({"vocab": {"size": 3, "eos": 0}, "agents": [{"type": "uniform"}],
      "reward": {"type": "constant", "value": 0.5}, "prompts": {"ids": [[1]]}, "decoder": {"alpa": 0.1}})");
    CHECK(msg.find("alpa") != std::string::npos);
  }
  SUBCASE("top_k 0") {
    const auto msg = config_error(R"({"vocab": {"size": 3, "eos": 0}, "agents": [{"type": "uniform"}],
      "reward": {"type": "constant", "value": 0.5}, "prompts": {"ids": [[1]]}, "decoder": {"top_k": 0}})");
    CHECK(msg.find("top_k") != std::string::npos);
  }
  SUBCASE("several problems are reported together") {
    const auto msg = config_error(R"({"vocab": {"size": 3, "eos": 0}, "agents": [{"type": "uniform"}],
      "reward": {"type": "constant", "value": 0.5}, "prompts": {"ids": [[1]]}, "bogus": 1, "workers": -1})");
    CHECK(msg.find("2 problem(s)") != std::string::npos);
  }
  SUBCASE("syntax error position") {
    const auto msg = config_error("{\n  \"vocab\": ,\n}");
    CHECK(msg.find("<config>:2:") != std::string::npos);
  }
  SUBCASE("out of vocabulary prompt") {
    config_error(R"({"vocab": {"size": 3, "eos": 0}, "agents": [{"type": "uniform"}],
      "reward": {"type": "constant", "value": 0.5}, "prompts": {"ids": [[5]]}})");
  }
  SUBCASE("single needs alpha > 0") {
    config_error(R"({"vocab": {"size": 3, "eos": 0}, "agents": [{"type": "uniform"}],
      "reward": {"type": "constant", "value": 0.5}, "prompts": {"ids": [[1]]},
      "decoder": {"alpha": 0}, "methods": ["single"]})");
  }
  SUBCASE("all expands to three methods") {
    const auto t = toy(scratch("parse"));
    REQUIRE(t.methods.size() == 3);
    CHECK(t.methods[0].name == "collab");
    CHECK(t.methods[1].kind == MethodKind::single);
    CHECK(t.methods[2].kind == MethodKind::bon);
  }
}

TEST_CASE("flag merging") {
  nlohmann::json doc = nlohmann::json::parse(kMinimal);
  doc["decoder"] = {{"alpha", 0.3}};
  ConfigFlags f;
  f.set("decoder.alpha", 0.9);
  f.set("decoder.top_k", 2);
  auto merged = doc;
  merge_flags(merged, f);
  CHECK(merged["decoder"]["alpha"] == 0.3);
  CHECK(merged["decoder"]["top_k"] == 2);
  f.override_file = true;
  merged = doc;
  merge_flags(merged, f);
  CHECK(merged["decoder"]["alpha"] == 0.9);
}

TEST_CASE("prompt loading") {
  const Vocab v(10, 0);
  const auto ps = parse_prompt_text("1 5 9\n\n2 2\n", false, v, kDefaultPromptCap, "mem");
  REQUIRE(ps.prompts.size() == 2);
  CHECK(ps.prompts[0] == Tokens{1, 5, 9});
  CHECK(ps.prompts[1] == Tokens{2, 2});
  CHECK(ps.warnings.empty());

  const auto cut = parse_prompt_text("1 2 3 4 5", false, v, 3, "mem");
  CHECK(cut.prompts[0] == Tokens{3, 4, 5});
  CHECK(cut.warnings.size() == 1);

  const Vocab lv = abc();
  CHECK(parse_prompt_text("A B\nB", true, lv, 8, "mem").prompts[0] == Tokens{A, B});
  CHECK_THROWS_AS(parse_prompt_text("A C", true, lv, 8, "mem"), Error);
  CHECK_THROWS_AS(parse_prompt_text("1 x", false, v, 8, "mem"), Error);
  CHECK_THROWS_AS(parse_prompt_text("1 10", false, v, 8, "mem"), Error);

  const fs::path dir = scratch("prompts");
  std::ofstream(dir / "p.txt") << "1 5 9\n2 2\n";
  PromptSource src;
  src.kind = PromptSource::Kind::file_ids;
  src.path = dir / "p.txt";
  CHECK(load_prompts(src, v).prompts.size() == 2);
  src.path = dir / "missing.txt";
  CHECK_THROWS_AS(load_prompts(src, v), Error);
}

TEST_CASE("exit codes") {
  CHECK(exit_code_for(ErrorKind::config) == exit_config);
  CHECK(exit_code_for(ErrorKind::usage) == exit_config);
  CHECK(exit_code_for(ErrorKind::network) == exit_backend);
  CHECK(exit_code_for(ErrorKind::backend) == exit_backend);
  CHECK(exit_code_for(ErrorKind::conformance) == exit_backend);
}

TEST_CASE("toy run") {
  const fs::path out = scratch("toy");
  const auto cfg = toy(out);
  const RunResult r = run_experiment(cfg, true);
  CHECK(r.exit_code == exit_ok);
  CHECK(r.cells.size() == 9);
  for (const auto& c : r.cells) CHECK_MESSAGE(c.status == "ok", c.method << " " << c.error);
  CHECK(r.report.methods.size() == 3);
  for (const char* f : {"report.json", "report.csv", "manifest.json"}) CHECK(fs::exists(out / f));
  for (const auto& c : r.cells) CHECK(fs::exists(out / cell_file_name(c)));

  SUBCASE("a second run is byte-identical") {
    const fs::path out2 = scratch("toy2");
    const RunResult r2 = run_experiment(toy(out2), true);
    CHECK(r2.digests == r.digests);
    for (const auto& c : r.cells) CHECK(slurp(out / cell_file_name(c)) == slurp(out2 / cell_file_name(c)));
  }
  SUBCASE("worker count does not change outputs") {
    auto one = toy(scratch("toy1"));
    one.workers = 1;
    CHECK(run_experiment(one, true).digests == r.digests);
  }
  SUBCASE("replay matches") {
    const auto rep = replay(out / "manifest.json", scratch("replay"));
    CHECK(rep.matched);
    CHECK(rep.mismatches.empty());
  }
  SUBCASE("replay notices a changed output") {
    const fs::path m = out / "manifest.json";
    auto doc = nlohmann::json::parse(slurp(m));
    doc["outputs"][0]["fnv1a"] = "0000000000000000";
    std::ofstream(m) << doc.dump(2);
    const auto rep = replay(m, scratch("replay2"));
    CHECK_FALSE(rep.matched);
    CHECK(rep.mismatches.size() == 1);
  }
}

TEST_CASE("a failing endpoint gives a partial run") {
  MockOptions o;
  o.policy = constant_row(abc(), {0.3, 0.4, 0.3});
  o.fail_prefix = Tokens{B};
  MockServer s(o);
  s.start();
  const std::string text = R"({
    "vocab": {"size": 3, "eos": 0},
    "agents": [{"name": "r", "type": "remote",
                "endpoint": {"url": ")" + s.url() + R"(", "attempts": 1, "backoff_ms": [1]}},
               {"type": "uniform"}],
    "reward": {"type": "constant", "value": 0.5},
    "decoder": {"max_new_tokens": 2, "top_k": 2},
    "rollout": {"n_rollouts": 2},
    "prompts": {"ids": [[1], [2]]},
    "workers": 1
  })";
  auto cfg = parse_config(text);
  CHECK(cfg.has_remote());
  const RunResult r = run_experiment(cfg, false);
  CHECK(r.exit_code == exit_partial);
  REQUIRE(r.cells.size() == 2);
  CHECK(r.cells[0].status == "ok");
  CHECK(r.cells[1].status == "network");
  REQUIRE(r.cells[1].trace);
  CHECK(r.cells[1].trace->output.empty());
}

TEST_CASE("verify command") {
  const auto s = verify_cmd({.n = 100});
  CHECK(s.ok());
  CHECK(s.theorem_checks > 0);
  CHECK(s.lemma_checks > 0);
  CHECK(s.theorem_min_slack >= -1e-9);

  const auto bad = verify_cmd({.n = 30, .corrupt = true});
  CHECK_FALSE(bad.ok());

  CHECK_THROWS_AS(verify_cmd({.n = 0}), Error);

  const fs::path out = scratch("verify") / "r.jsonl";
  int lines = 0;
  verify_cmd({.n = 3, .out = out}, [&](const std::string&) { ++lines; });
  std::ifstream in(out);
  std::string line;
  int written = 0;
  while (std::getline(in, line)) written += !line.empty();
  CHECK(written >= 3);
}

TEST_CASE("toy run matches the checked-in golden outputs") {
  const fs::path golden = fs::path(COLLAB_SOURCE_DIR) / "tests" / "golden" / "toy";
  const fs::path out = scratch("golden");
  const RunResult r = run_experiment(toy(out), true);
  int compared = 0;
  for (const auto& entry : fs::recursive_directory_iterator(golden)) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), golden);
    CHECK_MESSAGE(slurp(out / rel) == slurp(entry.path()), rel.string());
    ++compared;
  }
  CHECK(compared == 11);
  CHECK(r.exit_code == exit_ok);
}
