#include "esr/runner/runner.hpp"

#include "esr/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

namespace esr::runner {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const fs::path& path, std::string_view text) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw IoError("cannot write " + path.string());
  }
  fs::rename(tmp, path);
}

void append_line(const fs::path& path, std::string_view line) {
  std::ofstream out(path, std::ios::binary | std::ios::app);
  out << line << '\n';
  if (!out) throw IoError("cannot append to " + path.string());
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::vector<json> out;
  if (!fs::exists(path)) return out;
  std::istringstream in(read_text(path));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(json::parse(line));
  }
  return out;
}

std::string step_name(std::uint64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step-%06llu", static_cast<unsigned long long>(step));
  return buf;
}

fs::path probe_path(const fs::path& dir, std::uint64_t step) { return dir / "probes" / (step_name(step) + ".json"); }

lm::StudentModel build_student(const ExperimentConfig& cfg, int vocab) {
  lm::StudentConfig sc;
  sc.layers = cfg.student.layers;
  sc.heads = cfg.student.heads;
  sc.width = cfg.student.width;
  sc.mlp_multiplier = cfg.student.mlp_multiplier;
  sc.max_context = cfg.student.max_context;
  sc.vocab = vocab;
  sc.seed = cfg.seed;
  lm::StudentModel base(sc);
  if (cfg.distill.regime == lm::Regime::Adapter) {
    base = lm::apply_adapters(base, lm::make_adapters(base, cfg.distill.adapter_rank, cfg.distill.adapter_alpha,
                                                      lm::default_adapter_targets(sc), cfg.seed));
  }
  base.set_regime(cfg.distill.regime);
  return base;
}

std::unique_ptr<lm::LanguageModel> build_teacher(const TeacherSpec& t) {
  if (t.kind == "scripted") {
    return std::make_unique<lm::ScriptedTaskTeacher>(resolve_tokenizer(t.tokenizer), t.epsilon, t.trap_chars);
  }
  if (!t.table.empty()) return std::make_unique<lm::MarkovTeacher>(lm::MarkovTeacher::load(t.table));
  return std::make_unique<lm::MarkovTeacher>(lm::MarkovTeacher::random_stationary(
      resolve_tokenizer(t.tokenizer), t.seed, t.concentration, t.smoothing, t.include_eos));
}

std::vector<tasks::Task> probe_suite(const ExperimentConfig& cfg, std::size_t count, std::uint64_t stream) {
  return tasks::generate_suite(cfg.task.kind, cfg.task.difficulty, count, derive_seed(cfg.probes.seed, {stream}));
}

ordered_json profile_json(const probes::PositionProfile& p) {
  ordered_json buckets = ordered_json::array();
  for (const auto& b : p.buckets) {
    buckets.push_back({{"begin", b.begin},
                       {"end", b.end},
                       {"count", b.count},
                       {"mean_kl", b.mean_kl},
                       {"mean_student_entropy", b.mean_student_entropy},
                       {"mean_teacher_entropy", b.mean_teacher_entropy}});
  }
  return buckets;
}

template <typename J>
probes::PositionProfile parse_profile(const J& buckets) {
  probes::PositionProfile p;
  for (const auto& b : buckets) {
    p.buckets.push_back({b.at("begin").template get<std::size_t>(), b.at("end").template get<std::size_t>(),
                         b.at("count").template get<std::size_t>(), b.at("mean_kl").template get<double>(),
                         b.at("mean_student_entropy").template get<double>(),
                         b.at("mean_teacher_entropy").template get<double>()});
  }
  return p;
}

ordered_json optional_json(const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); }

}  // namespace

fs::path output_root() {
  const char* env = std::getenv(kOutputRootEnv);
  return env && *env ? fs::path(env) : fs::path("runs");
}

tok::Tokenizer resolve_tokenizer(const std::string& spec) {
  if (spec == "char") return tok::Tokenizer::default_char();
  if (spec == "merge") return tok::Tokenizer::default_merge();
  return tok::Tokenizer::load(spec);
}

Experiment::Experiment(ExperimentConfig cfg)
    : cfg_((cfg.validate(), std::move(cfg))),
      student_tok_(resolve_tokenizer(cfg_.student.tokenizer)),
      teacher_(build_teacher(cfg_.teacher)),
      student_(build_student(cfg_, static_cast<int>(student_tok_.vocab_size()))),
      policy_(student_, student_tok_),
      trainer_(cfg_.distill, student_, student_tok_, *teacher_),
      train_(tasks::generate_suite(cfg_.task.kind, cfg_.task.difficulty, cfg_.task.train_problems,
                                   cfg_.task.train_seed)),
      eval_(tasks::generate_suite(cfg_.task.kind, cfg_.task.difficulty, cfg_.task.eval_problems,
                                  cfg_.task.eval_seed)) {}

tasks::EvalReport Experiment::evaluate(const lm::LanguageModel& model) const {
  tasks::EvalOptions o;
  o.k = cfg_.eval.k;
  o.temperature = cfg_.eval.temperature;
  o.max_tokens = cfg_.eval.max_tokens;
  o.seed = cfg_.eval.seed;
  return tasks::evaluate(model, eval_, o);
}

void Experiment::restore(const fs::path& checkpoint) { trainer_.restore(lm::load_checkpoint(checkpoint)); }

std::string eval_json(const tasks::EvalReport& r) {
  ordered_json j = {{"avg_at_k", r.avg_at_k}, {"pass_at_k", r.pass_at_k}, {"maj_at_k", r.maj_at_k},
                    {"k", r.k},               {"temperature", r.temperature}, {"problems", r.problems},
                    {"mean_length", r.mean_length}};
  return j.dump();
}

tasks::EvalReport parse_eval_json(std::string_view text) {
  const json j = json::parse(text);
  tasks::EvalReport r;
  r.avg_at_k = j.at("avg_at_k").get<double>();
  r.pass_at_k = j.at("pass_at_k").get<double>();
  r.maj_at_k = j.at("maj_at_k").get<double>();
  r.k = j.at("k").get<int>();
  r.temperature = j.at("temperature").get<double>();
  r.problems = j.at("problems").get<std::size_t>();
  r.mean_length = j.at("mean_length").get<double>();
  return r;
}

std::string run_probes(Experiment& exp, std::uint64_t step, const probes::PositionProfile* before,
                       std::optional<double> reference_length) {
  const auto& cfg = exp.config();
  const auto& pc = cfg.probes;
  ordered_json out;
  out["step"] = step;

  if (pc.profile || pc.commitment || pc.lengths || pc.categories) {
    std::vector<std::string> prompts;
    for (const auto& t : probe_suite(cfg, pc.prompts, 1)) prompts.push_back(t.prompt);
    probes::SampleOptions so;
    so.max_length = pc.max_length;
    so.samples = pc.samples;
    so.temperature = pc.temperature;
    so.allow_eos = pc.allow_eos;
    so.seed = pc.seed;
    const auto rollouts = probes::sample_scored(exp.student_policy(), exp.teacher(), prompts, so);

    if (pc.profile) {
      const auto prof = probes::profile_from(rollouts, pc.max_length, pc.bucket_width);
      out["profile"] = {{"max_length", pc.max_length}, {"bucket_width", pc.bucket_width},
                        {"buckets", profile_json(prof)}};
      if (before) {
        const auto c = probes::cascade_report(*before, prof, cfg.distill.cutoff);
        out["cascade"] = {{"cutoff", c.cutoff},
                          {"in_before", c.in_before},
                          {"in_after", c.in_after},
                          {"in_window_drop_pct", optional_json(c.in_window_drop)},
                          {"out_before", c.out_before},
                          {"out_after", c.out_after},
                          {"out_window_drop_pct", optional_json(c.out_window_drop)}};
      }
    }
    if (pc.commitment) {
      try {
        const auto c = probes::mode_commitment(rollouts, pc.top_fraction);
        out["commitment"] = {{"top_fraction", c.top_fraction},
                             {"top1_pct", c.top1_pct},
                             {"top2to5_pct", c.top2to5_pct},
                             {"outside_top5_pct", c.outside_top5_pct},
                             {"mean_top1_prob", c.mean_top1_prob},
                             {"n", c.n}};
      } catch (const InsufficientDataError& e) {
        out["commitment"] = {{"unavailable", e.what()}};
      }
    }
    if (pc.lengths) {
      std::vector<std::size_t> lengths;
      for (const auto& r : rollouts) lengths.push_back(r.rollout.length());
      const auto s = probes::length_stats(lengths, reference_length);
      out["lengths"] = {{"p10", s.p10},   {"p50", s.p50},   {"p90", s.p90},
                        {"mean", s.mean}, {"ratio_to_untrained", optional_json(s.ratio_to_reference)}};
    }
    if (pc.categories) {
      const auto rules = pc.category_rules.empty() ? probes::CategoryRules::builtin()
                                                   : probes::CategoryRules::load(pc.category_rules);
      ordered_json cats = ordered_json::array();
      for (const auto& c : probes::category_profile(rollouts, exp.student_tokenizer(), rules)) {
        cats.push_back({{"category", probes::to_string(c.category)}, {"count", c.count}, {"mean_kl", c.mean_kl}});
      }
      out["categories"] = cats;
    }
  }
  if (pc.decay) {
    probes::DecayOptions d;
    d.t_grid = pc.decay_t;
    d.k = pc.decay_k;
    d.prefix_temperature = pc.temperature;
    d.teacher_temperature = cfg.eval.temperature;
    d.seed = pc.seed;
    const auto curve = probes::teacher_decay_curve(exp.teacher(), exp.student_policy(),
                                                   probe_suite(cfg, pc.decay_problems, 2), d);
    std::vector<double> t(curve.t.begin(), curve.t.end());
    out["decay"] = {{"t", curve.t},
                    {"accuracy", curve.accuracy},
                    {"delta", curve.delta},
                    {"samples_per_point", curve.samples_per_point},
                    {"spearman_t_delta", t.size() >= 2 ? ordered_json(probes::spearman(t, curve.delta))
                                                       : ordered_json(nullptr)}};
  }
  return out.dump(2) + "\n";
}

RunSummary run_experiment(const ExperimentConfig& cfg_in, const fs::path& dir, bool resume) {
  cfg_in.validate();
  if (fs::exists(dir / "result.json")) throw ConfigError("run directory " + dir.string() + " holds a completed run");
  if (!resume && fs::exists(dir) && !fs::is_empty(dir)) {
    throw ConfigError("run directory " + dir.string() + " is not empty; resume it or choose another");
  }
  const std::string effective = dump_config(cfg_in);
  if (resume && fs::exists(dir / "config.json") && read_text(dir / "config.json") != effective) {
    throw ConfigError("config differs from the run being resumed in " + dir.string());
  }
  fs::create_directories(dir);
  fs::remove(dir / "failure.json");

  try {
    write_text(dir / "config.json", effective);
    Experiment exp(cfg_in);
    const auto& cfg = exp.config();
    const std::set<std::uint64_t> probe_steps(cfg.probes.at.begin(), cfg.probes.at.end());
    const std::uint64_t steps = cfg.distill.steps;
    fs::create_directories(dir / "tasks");
    tasks::save_suite(exp.train_suite(), dir / "tasks" / "train.jsonl");
    tasks::save_suite(exp.eval_suite(), dir / "tasks" / "eval.jsonl");

    RunSummary summary;
    summary.dir = dir;
    summary.baseline = exp.evaluate(exp.student_policy());
    summary.teacher = exp.evaluate(exp.teacher());
    write_text(dir / "evals" / "baseline.json", eval_json(summary.baseline) + "\n");
    write_text(dir / "evals" / "teacher.json", eval_json(summary.teacher) + "\n");

    // The untrained student's profile anchors the cascade reports.
    std::optional<probes::PositionProfile> before;
    std::optional<double> untrained_length;
    const bool any_probes = !probe_steps.empty();
    if (any_probes) {
      const std::string p0 = run_probes(exp, 0);
      const json j = json::parse(p0);
      if (j.contains("profile")) before = parse_profile(j["profile"]["buckets"]);
      if (j.contains("lengths")) untrained_length = j["lengths"]["mean"].get<double>();
      if (probe_steps.count(0)) write_text(probe_path(dir, 0), p0);
    }

    std::optional<fs::path> resume_from;
    if (resume && fs::exists(dir / "checkpoints")) {
      std::vector<fs::path> ckpts;
      for (const auto& e : fs::directory_iterator(dir / "checkpoints")) {
        if (e.path().extension() == ".ckpt") ckpts.push_back(e.path());
      }
      if (!ckpts.empty()) resume_from = *std::max_element(ckpts.begin(), ckpts.end());
    }
    std::uint64_t resume_step = 0;
    if (resume_from) resume_step = lm::load_checkpoint(*resume_from).step;
    {
      std::string kept;
      for (const auto& r : read_jsonl(dir / "evals.jsonl")) {
        if (r.at("step").get<std::uint64_t>() <= resume_step) kept += r.dump() + "\n";
      }
      write_text(dir / "evals.jsonl", kept);
      for (auto s : probe_steps) {
        if (s > resume_step) fs::remove(probe_path(dir, s));
      }
    }

    distill::TrainingHooks hooks;
    hooks.on_checkpoint = [&](std::uint64_t step, lm::StudentModel&) {
      if (cfg.eval.at_checkpoints || step == steps) {
        const auto r = exp.evaluate(exp.student_policy());
        json rec = json::parse(eval_json(r));
        rec["step"] = step;
        append_line(dir / "evals.jsonl", rec.dump());
      }
      if (step > 0 && probe_steps.count(step)) {
        write_text(probe_path(dir, step), run_probes(exp, step, before ? &*before : nullptr, untrained_length));
      }
    };
    distill::run_training(exp.trainer(), exp.train_suite(), dir, resume_from, hooks);

    bool found = false;
    for (const auto& r : read_jsonl(dir / "evals.jsonl")) {
      const auto step = r.at("step").get<std::uint64_t>();
      const auto report = parse_eval_json(r.dump());
      if (step == steps) summary.trained = report;
      if (!found || report.avg_at_k > summary.best_avg_at_k) {
        summary.best_avg_at_k = report.avg_at_k;
        summary.best_step = step;
        found = true;
      }
    }
    write_text(dir / "evals" / "trained.json", eval_json(summary.trained) + "\n");

    double gen = 0, sup = 0, gen_s = 0, score_s = 0, train_s = 0;
    const auto metrics = read_jsonl(dir / "metrics.jsonl");
    const auto timing = read_jsonl(dir / "timing.jsonl");
    for (const auto& m : metrics) {
      gen += m.at("generated_tokens").get<double>();
      sup += m.at("supervised_tokens").get<double>();
    }
    for (const auto& t : timing) {
      gen_s += t.at("generate_s").get<double>();
      score_s += t.at("score_s").get<double>();
      train_s += t.at("train_s").get<double>();
    }
    const double nm = std::max<double>(1, static_cast<double>(metrics.size()));
    const double nt = std::max<double>(1, static_cast<double>(timing.size()));
    ordered_json result = {{"status", "complete"},
                           {"name", cfg.name},
                           {"strategy", distill::to_string(cfg.distill.strategy)},
                           {"cutoff", cfg.distill.cutoff},
                           {"max_length", cfg.distill.max_length},
                           {"seed", cfg.seed},
                           {"steps", steps},
                           {"best_avg_at_k", summary.best_avg_at_k},
                           {"best_step", summary.best_step},
                           {"baseline", ordered_json::parse(eval_json(summary.baseline))},
                           {"teacher", ordered_json::parse(eval_json(summary.teacher))},
                           {"trained", ordered_json::parse(eval_json(summary.trained))},
                           {"mean_generated_tokens_per_step", gen / nm},
                           {"mean_supervised_tokens_per_step", sup / nm},
                           {"mean_generate_s_per_step", gen_s / nt},
                           {"mean_score_s_per_step", score_s / nt},
                           {"mean_train_s_per_step", train_s / nt}};
    write_text(dir / "result.json", result.dump(2) + "\n");
    return summary;
  } catch (const std::exception& e) {
    const bool config = dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ConfigParseError*>(&e);
    const ordered_json failure = {{"status", "failed"}, {"kind", config ? "config" : "runtime"}, {"error", e.what()}};
    try {
      write_text(dir / "failure.json", failure.dump(2) + "\n");
    } catch (...) {
    }
    throw;
  }
}

void run_sweep(const SweepConfig& cfg, const fs::path& dir) {
  const auto runs = expand_sweep(cfg);
  fs::create_directories(dir);
  write_text(dir / "sweep.json", dump_sweep_config(cfg));
  std::vector<std::string> failed;
  for (const auto& r : runs) {
    const fs::path run_dir = dir / r.variant / ("seed-" + std::to_string(r.seed));
    if (fs::exists(run_dir / "result.json")) continue;
    try {
      run_experiment(r.config, run_dir, fs::exists(run_dir));
    } catch (const std::exception& e) {
      failed.push_back(r.variant + "/seed-" + std::to_string(r.seed) + ": " + e.what());
    }
  }
  emit_report(dir);
  if (!failed.empty()) {
    std::string msg = std::to_string(failed.size()) + " sweep run(s) failed:";
    for (const auto& f : failed) msg += "\n  " + f;
    throw Error(msg);
  }
}

}  // namespace esr::runner
