#include <doctest.h>

#include "esr/errors.hpp"
#include "esr/runner/runner.hpp"

#include <json.hpp>

#include <fstream>

using namespace esr;
using namespace esr::runner;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("esr_runner_" + name);
  fs::remove_all(p);
  return p;
}

/// A run small enough for unit tests.
const char* kTiny = R"({
  "seed": 4,
  "student": {"width": 16, "max_context": 128},
  "task": {"train_problems": 30, "eval_problems": 6},
  "distill": {"steps": 4, "checkpoint_interval": 2, "batch_size": 3, "cutoff": 5, "max_length": 24,
              "regime": "full-finetune", "optimizer": "adam", "learning_rate": 0.001},
  "eval": {"max_tokens": 12},
  "probes": {"prompts": 12, "max_length": 16}
})";

}  // namespace

TEST_CASE("minimal config gets every default") {
  const auto c = parse_config(R"({"seed": 7, "task": {"kind": "digit-sort"}})");
  CHECK(c.seed == 7);
  CHECK(c.task.kind == tasks::TaskKind::DigitSort);
  CHECK(c.distill.cutoff == 16);
  CHECK(c.distill.max_length == 512);
  CHECK(c.distill.steps == 200);
  CHECK(c.distill.batch_size == 16);
  CHECK(c.distill.temperature == 0.7);
  CHECK(c.distill.seed == 7);
  CHECK(c.teacher.seed == 7);
  CHECK(c.task.train_seed == 7);
  CHECK(c.task.eval_seed == 1007);
  CHECK(c.eval.k == 4);
  CHECK(c.probes.at == std::vector<std::uint64_t>{0, 200});

  const auto doc = nlohmann::json::parse(dump_config(c));
  for (const char* section : {"student", "teacher", "task", "distill", "eval", "probes"}) {
    CHECK(doc.contains(section));
  }
  CHECK(doc["distill"].size() == 20);
  CHECK(doc["version"] == kConfigVersion);
}

TEST_CASE("config round trip is exact") {
  auto c = parse_config(kTiny);
  c.distill.optimizer.lr = 0.1 + 0.2;
  c.teacher.trap_chars = "#@\"\\";
  const std::string once = dump_config(c);
  CHECK(dump_config(parse_config(once)) == once);
}

TEST_CASE("config errors name the field") {
  CHECK_THROWS_AS(parse_config(R"({"distill": {"cutoff": 0}})"), ConfigError);
  CHECK(message_of([] { parse_config(R"({"distill": {"cutoff": 0}})"); }).rfind("distill.cutoff", 0) == 0);
  CHECK(message_of([] { parse_config(R"({"distill": {"cutof": 3}})"); }) == "distill.cutof: unknown key");
  CHECK(message_of([] { parse_config(R"({"colour": 3})"); }) == "colour: unknown key");
  CHECK(message_of([] { parse_config(R"({"eval": {"k": "four"}})"); }).rfind("eval.k:", 0) == 0);
  CHECK(message_of([] { parse_config(R"({"seed": -1})"); }).rfind("seed:", 0) == 0);
  CHECK(message_of([] { parse_config(R"({"distill": {"strategy": "random"}})"); }).rfind("distill.strategy", 0) == 0);
  CHECK(message_of([] { parse_config(R"({"version": 2})"); }).rfind("version", 0) == 0);
  CHECK(message_of([] { parse_config(R"({"student": {"width": 10, "heads": 3}})"); }).rfind("student.width", 0) == 0);
  CHECK(message_of([] { parse_config(R"({"probes": {"at": [3]}})"); }).rfind("probes.at", 0) == 0);
  CHECK(message_of([] { parse_config(R"({"student": {"max_context": 90}})"); }).rfind("student.max_context", 0) ==
        0);
  try {
    parse_config("{\n  \"seed\": 1,\n  \"distill\": {\"cutoff\": 3,\n}\n");
    FAIL("expected a parse error");
  } catch (const ConfigParseError& e) {
    CHECK(e.line() == 4);
  }
  CHECK_THROWS_AS(load_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("overrides") {
  const auto text = apply_overrides(R"({"distill": {"cutoff": 4}})",
                                    {"distill.cutoff=8", "name=\"x\"", "task.kind=digit-sort", "eval.k=2"});
  const auto c = parse_config(text);
  CHECK(c.distill.cutoff == 8);
  CHECK(c.name == "x");
  CHECK(c.task.kind == tasks::TaskKind::DigitSort);
  CHECK(c.eval.k == 2);
  CHECK_THROWS_AS(apply_overrides("{}", {"novalue"}), ConfigError);
  CHECK_THROWS_AS(apply_overrides(R"({"seed": 1})", {"seed.x=1"}), ConfigError);
}

TEST_CASE("run_experiment writes the documented artifacts") {
  const auto dir = scratch("run");
  const auto cfg = parse_config(kTiny);
  const auto s = run_experiment(cfg, dir);
  for (const char* a : {"config.json", "tasks/train.jsonl", "tasks/eval.jsonl", "metrics.jsonl", "timing.jsonl",
                        "evals.jsonl", "evals/baseline.json", "evals/teacher.json", "evals/trained.json",
                        "probes/step-000000.json", "probes/step-000004.json", "result.json"}) {
    CHECK_MESSAGE(fs::exists(dir / a), a);
  }
  CHECK(fs::exists(distill::checkpoint_path(dir, 2)));
  CHECK(fs::exists(distill::checkpoint_path(dir, 4)));
  CHECK_FALSE(fs::exists(dir / "failure.json"));
  CHECK(slurp(dir / "config.json") == dump_config(cfg));
  CHECK(s.teacher.avg_at_k > 0.8);
  CHECK(s.trained.avg_at_k <= s.trained.pass_at_k);

  std::ifstream metrics(dir / "metrics.jsonl");
  std::string line;
  std::size_t n = 0;
  while (std::getline(metrics, line)) {
    const auto m = nlohmann::json::parse(line);
    CHECK(m["supervised_tokens"].get<std::size_t>() <= cfg.distill.cutoff * cfg.distill.batch_size);
    CHECK(m["generated_tokens"].get<std::size_t>() <= cfg.distill.cutoff * cfg.distill.batch_size);
    ++n;
  }
  CHECK(n == 4);
  const auto probe = nlohmann::json::parse(slurp(dir / "probes/step-000004.json"));
  CHECK(probe.contains("cascade"));
  CHECK(probe["profile"]["buckets"].size() == 16);

  CHECK_THROWS_AS(run_experiment(cfg, dir), ConfigError);
  CHECK_THROWS_AS(run_experiment(cfg, dir, true), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("identical runs are byte-identical and resume matches") {
  const auto a = scratch("det_a"), b = scratch("det_b"), c = scratch("det_c");
  const auto cfg = parse_config(kTiny);
  run_experiment(cfg, a);
  run_experiment(cfg, b);
  for (const char* f : {"metrics.jsonl", "evals.jsonl", "probes/step-000004.json", "evals/trained.json"}) {
    CHECK_MESSAGE(slurp(a / f) == slurp(b / f), f);
  }
  CHECK(slurp(distill::checkpoint_path(a, 4)) == slurp(distill::checkpoint_path(b, 4)));

  // Interrupted after the step-2 checkpoint, with a stray record past it.
  fs::copy(a, c, fs::copy_options::recursive);
  fs::remove(c / "result.json");
  fs::remove(distill::checkpoint_path(c, 4));
  fs::remove(c / "probes/step-000004.json");
  {
    std::ofstream m(c / "metrics.jsonl", std::ios::app);
    m << "{\"step\":99}\n";
  }
  run_experiment(cfg, c, true);
  for (const char* f : {"metrics.jsonl", "evals.jsonl", "probes/step-000004.json"}) {
    CHECK_MESSAGE(slurp(a / f) == slurp(c / f), f);
  }
  CHECK(slurp(distill::checkpoint_path(a, 4)) == slurp(distill::checkpoint_path(c, 4)));

  auto other = parse_config(apply_overrides(kTiny, {"seed=5"}));
  const auto d = scratch("det_d");
  fs::copy(a, d, fs::copy_options::recursive);
  fs::remove(d / "result.json");
  CHECK_THROWS_AS(run_experiment(other, d, true), ConfigError);
  for (const auto& p : {a, b, c, d}) fs::remove_all(p);
}

TEST_CASE("a failing run leaves a failure record") {
  const auto dir = scratch("fail");
  const auto cfg = parse_config(apply_overrides(kTiny, {"teacher.kind=markov", "teacher.table=/nonexistent.json"}));
  CHECK_THROWS(run_experiment(cfg, dir));
  REQUIRE(fs::exists(dir / "failure.json"));
  const auto f = nlohmann::json::parse(slurp(dir / "failure.json"));
  CHECK(f["status"] == "failed");
  CHECK(fs::exists(dir / "config.json"));
  CHECK_FALSE(fs::exists(dir / "result.json"));
  fs::remove_all(dir);
}

TEST_CASE("reports list absent figures and are idempotent") {
  const auto dir = scratch("report");
  CHECK_THROWS_AS(emit_report(dir), ReportError);
  fs::create_directories(dir);
  try {
    emit_report(dir);
    FAIL("expected ReportError");
  } catch (const ReportError& e) {
    CHECK(std::string(e.what()).find("result.json") != std::string::npos);
  }
  fs::remove_all(dir);

  run_experiment(parse_config(apply_overrides(kTiny, {"probes.at=[]"})), dir);
  const auto files = emit_report(dir);
  std::map<fs::path, std::string> first;
  for (const auto& f : files) first[f] = slurp(f);
  CHECK(first.count(dir / "report" / "evals.tsv"));
  CHECK_FALSE(fs::exists(dir / "report" / "decay.tsv"));
  CHECK_FALSE(fs::exists(dir / "report" / "position_profile.tsv"));
  const std::string summary = slurp(dir / "report" / "summary.txt");
  CHECK(summary.find("decay.tsv") != std::string::npos);
  CHECK(summary.find("position_profile.tsv") != std::string::npos);
  const auto again = emit_report(dir);
  CHECK(again == files);
  for (const auto& f : again) CHECK(slurp(f) == first[f]);

  // Every table has a header and rectangular rows.
  for (const auto& f : files) {
    if (f.extension() != ".tsv") continue;
    std::ifstream in(f);
    std::string line;
    std::getline(in, line);
    const auto cols = std::count(line.begin(), line.end(), '\t');
    while (std::getline(in, line)) CHECK(std::count(line.begin(), line.end(), '\t') == cols);
  }
  fs::remove_all(dir);
}

TEST_CASE("sweeps expand to one run per variant and seed") {
  const auto cfg = parse_sweep_config(R"({"name": "s", "base": {"distill": {"steps": 10}},
      "cutoffs": [8, 16], "strategies": ["rkl*hs"], "full_opd": true, "seeds": [1, 2]})");
  const auto runs = expand_sweep(cfg);
  REQUIRE(runs.size() == 8);
  CHECK(runs[0].variant == "n8");
  CHECK(runs[0].config.distill.cutoff == 8);
  CHECK(runs[0].config.seed == 1);
  CHECK(runs[1].config.seed == 2);
  CHECK(runs[1].config.task.train_seed == 2);
  CHECK(runs[4].variant == "rklxhs");
  CHECK(runs[4].config.distill.strategy == distill::Strategy::RklHs);
  CHECK(runs[6].variant == "full-opd");
  CHECK(runs[6].config.distill.steps == 10);
  CHECK(dump_sweep_config(parse_sweep_config(dump_sweep_config(cfg))) == dump_sweep_config(cfg));
  CHECK_THROWS_AS(parse_sweep_config(R"({"seeds": [1]})"), ConfigError);
  CHECK(message_of([] { parse_sweep_config(R"({"cutoffs": [0]})"); }).rfind("base.distill.cutoff", 0) == 0);
  CHECK(message_of([] { parse_sweep_config(R"({"cutoffs": [8], "extra": 1})"); }) == "extra: unknown key");
}

TEST_CASE("sweep report has one row per variant") {
  const auto dir = scratch("sweep");
  auto cfg = parse_sweep_config(R"({"name": "s", "cutoffs": [3, 6], "full_opd": true, "seeds": [0, 1]})");
  cfg.base = apply_overrides(kTiny, {"probes.at=[]", "distill.steps=2", "distill.checkpoint_interval=1"});
  run_sweep(cfg, dir);
  const std::string table = slurp(dir / "report" / "comparison.tsv");
  CHECK(std::count(table.begin(), table.end(), '\n') == 4);
  CHECK(table.find("n3\tposition-esr\t3\t2\t") != std::string::npos);
  CHECK(table.find("full-opd\tfull-opd\tn/a\t2\t") != std::string::npos);
  const std::string runs = slurp(dir / "report" / "runs.tsv");
  CHECK(std::count(runs.begin(), runs.end(), '\n') == 7);
  // A second invocation skips finished runs and rewrites the same report.
  run_sweep(cfg, dir);
  CHECK(slurp(dir / "report" / "comparison.tsv") == table);
  fs::remove_all(dir);
}

TEST_CASE("output root comes from the environment") {
  setenv(kOutputRootEnv, "/tmp/somewhere", 1);
  CHECK(output_root() == fs::path("/tmp/somewhere"));
  unsetenv(kOutputRootEnv);
  CHECK(output_root() == fs::path("runs"));
}

TEST_CASE("shipped configs load") {
  const fs::path dir = fs::path(ESR_DATA_DIR).parent_path() / "configs";
  std::size_t seen = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    CAPTURE(e.path().string());
    if (nlohmann::json::parse(slurp(e.path()), nullptr, true, true).contains("base")) {
      const auto sweep = load_sweep_config(e.path());
      CHECK_FALSE(expand_sweep(sweep).empty());
    } else {
      CHECK_NOTHROW(load_config(e.path()));
    }
    ++seen;
  }
  CHECK(seen >= 4);
}
