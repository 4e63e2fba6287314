// Command-line front end: train, sweep, probe, eval, report.
#include "esr/errors.hpp"
#include "esr/runner/runner.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace esr;
using namespace esr::runner;

namespace {

constexpr int kConfigExit = 1;
constexpr int kRuntimeExit = 2;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void emit(const std::string& text, const std::string& out) {
  if (out.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(out, std::ios::binary | std::ios::trunc);
  f << text;
  if (!f) throw IoError("cannot write " + out);
}

/// Experiment for an existing run directory, with the student at `step`.
std::unique_ptr<Experiment> open_run(const fs::path& run, std::uint64_t step) {
  auto exp = std::make_unique<Experiment>(load_config(run / "config.json"));
  if (step > 0) {
    const auto ckpt = distill::checkpoint_path(run, step);
    if (!fs::exists(ckpt)) throw ConfigError("--step: no checkpoint " + ckpt.string());
    exp->restore(ckpt);
  }
  return exp;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Early-stopping rollout distillation experiments"};
  app.require_subcommand(1);
  app.footer(std::string("Output root: $") + kOutputRootEnv + " (default ./runs).");

  // train
  auto* train = app.add_subcommand("train", "train one experiment");
  std::string config_path, out_dir;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed, cutoff, steps, max_length;
  std::optional<std::string> name, strategy, regime;
  std::optional<double> lr;
  bool resume = false, print_config = false;
  train->add_option("-c,--config", config_path, "experiment config (JSON)");
  train->add_option("--set", overrides, "override a field, e.g. distill.cutoff=8")->take_all();
  train->add_option("--name", name, "run name");
  train->add_option("--seed", seed, "global seed");
  train->add_option("--cutoff", cutoff, "rollout cutoff N");
  train->add_option("--strategy", strategy, "token selection strategy");
  train->add_option("--steps", steps, "training steps");
  train->add_option("--max-length", max_length, "full rollout length");
  train->add_option("--regime", regime, "adapter or full-finetune");
  train->add_option("--lr", lr, "learning rate");
  train->add_option("-o,--out", out_dir, "run directory (default <output root>/<name>)");
  train->add_flag("--resume", resume, "continue from the latest checkpoint");
  train->add_flag("--print-config", print_config, "print the effective config and exit");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "run a cutoff or strategy sweep");
  std::string sweep_config, sweep_out;
  sweep->add_option("-c,--config", sweep_config, "sweep config (JSON)")->required();
  sweep->add_option("-o,--out", sweep_out, "sweep directory (default <output root>/<name>)");

  // probe
  auto* probe = app.add_subcommand("probe", "run the probes on a checkpoint of a run");
  std::string probe_run, probe_out;
  std::uint64_t probe_step = 0;
  probe->add_option("run", probe_run, "run directory")->required();
  probe->add_option("--step", probe_step, "checkpoint step (0 = untrained)");
  probe->add_option("-o,--out", probe_out, "output file (default stdout)");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint of a run");
  std::string eval_run, eval_out, eval_model = "student";
  std::uint64_t eval_step = 0;
  eval->add_option("run", eval_run, "run directory")->required();
  eval->add_option("--step", eval_step, "checkpoint step (0 = untrained)");
  eval->add_option("--model", eval_model, "student or teacher")->check(CLI::IsMember({"student", "teacher"}));
  eval->add_option("-o,--out", eval_out, "output file (default stdout)");

  // report
  auto* report = app.add_subcommand("report", "write tables and a summary for a run or sweep");
  std::string report_dir;
  report->add_option("dir", report_dir, "run or sweep directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kConfigExit;
  }

  try {
    if (*train) {
      std::vector<std::string> all = overrides;
      auto put = [&](const char* key, const std::string& v) { all.push_back(std::string(key) + "=" + v); };
      auto quoted = [](const std::string& s) { return nlohmann::json(s).dump(); };
      if (name) put("name", quoted(*name));
      if (seed) put("seed", std::to_string(*seed));
      if (cutoff) put("distill.cutoff", std::to_string(*cutoff));
      if (strategy) put("distill.strategy", quoted(*strategy));
      if (steps) put("distill.steps", std::to_string(*steps));
      if (max_length) put("distill.max_length", std::to_string(*max_length));
      if (regime) put("distill.regime", quoted(*regime));
      if (lr) put("distill.learning_rate", nlohmann::json(*lr).dump());
      const std::string text = config_path.empty() ? "{}" : read_file(config_path);
      const auto cfg = parse_config(apply_overrides(text, all));
      if (print_config) {
        std::cout << dump_config(cfg);
        return 0;
      }
      const fs::path dir = out_dir.empty() ? output_root() / cfg.name : fs::path(out_dir);
      const auto s = run_experiment(cfg, dir, resume);
      std::printf("run %s complete: baseline avg@%d %.4f, trained %.4f, best %.4f at step %llu\n",
                  dir.string().c_str(), s.trained.k, s.baseline.avg_at_k, s.trained.avg_at_k, s.best_avg_at_k,
                  static_cast<unsigned long long>(s.best_step));
    } else if (*sweep) {
      const auto cfg = load_sweep_config(sweep_config);
      const fs::path dir = sweep_out.empty() ? output_root() / cfg.name : fs::path(sweep_out);
      run_sweep(cfg, dir);
      std::printf("sweep %s complete, report in %s\n", dir.string().c_str(), (dir / "report").string().c_str());
    } else if (*probe) {
      auto exp = open_run(probe_run, probe_step);
      emit(run_probes(*exp, probe_step), probe_out);
    } else if (*eval) {
      auto exp = open_run(eval_run, eval_step);
      const auto r = eval_model == "teacher" ? exp->evaluate(exp->teacher()) : exp->evaluate(exp->student_policy());
      emit(eval_json(r) + "\n", eval_out);
    } else if (*report) {
      for (const auto& f : emit_report(report_dir)) std::printf("%s\n", f.string().c_str());
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigExit;
  } catch (const ConfigParseError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigExit;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntimeExit;
  }
  return 0;
}
