#include "esr/distill/trainer.hpp"

#include "esr/errors.hpp"

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>

namespace esr::distill {

using nlohmann::json;

void DistillConfig::validate() const {
  if (cutoff < 1) throw ConfigError("cutoff: N must be >= 1");
  if (max_length < 1) throw ConfigError("max_length: must be >= 1");
  if (!(temperature >= 0)) throw ConfigError("temperature: must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size: must be >= 1");
  if (rollouts_per_problem < 1) throw ConfigError("rollouts_per_problem: must be >= 1");
  if (checkpoint_interval < 1) throw ConfigError("checkpoint_interval: must be >= 1");
  if (regime == lm::Regime::Adapter && adapter_rank < 1) throw ConfigError("adapter_rank: must be >= 1");
  if (!(optimizer.lr >= 0)) throw ConfigError("learning_rate: must be >= 0");
  if (optimizer.clip < 0) throw ConfigError("grad_clip: must be >= 0");
  if (!(teacher_floor > 0)) throw ConfigError("teacher_floor: must be > 0");
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

}  // namespace

Trainer::Trainer(DistillConfig cfg, lm::StudentModel& student, const tok::Tokenizer& student_tok,
                 const lm::LanguageModel& teacher)
    : cfg_(cfg),
      student_(&student),
      student_tok_(&student_tok),
      teacher_(&teacher),
      bridge_(VocabBridge::build(student_tok, teacher.tokenizer())),
      optimizer_(cfg.optimizer) {
  cfg_.validate();
  if (static_cast<int>(student_tok.vocab_size()) != student.config().vocab) {
    throw ConfigError("student tokenizer does not match the student vocabulary");
  }
}

std::vector<std::size_t> batch_indices(const DistillConfig& cfg, std::uint64_t step, std::size_t suite_size) {
  if (suite_size == 0) throw ConfigError("task suite is empty");
  std::vector<std::size_t> out;
  for (std::size_t b = 0; b < cfg.batch_size; ++b) {
    Rng rng(derive_seed(cfg.seed, {0xba7cULL, step, b}));
    out.push_back(static_cast<std::size_t>(uniform_index(rng, suite_size)));
  }
  return out;
}

StepMetrics Trainer::step(const std::vector<tasks::Task>& suite, PhaseTiming* timing) {
  std::vector<std::string> prompts;
  for (std::size_t i : batch_indices(cfg_, step_ + 1, suite.size())) prompts.push_back(suite[i].prompt);
  return train_step(prompts, timing);
}

StepMetrics Trainer::train_step(const std::vector<std::string>& prompts, PhaseTiming* timing) {
  const std::uint64_t step = step_ + 1;
  StepMetrics m;
  m.step = step;
  PhaseTiming t;

  // Generate.
  auto t0 = Clock::now();
  lm::StudentPolicy policy(*student_, *student_tok_);
  RolloutOptions ro;
  ro.max_tokens = cfg_.generation_limit();
  ro.temperature = cfg_.temperature;
  ro.allow_eos = cfg_.allow_eos;
  ro.limit_reason = truncates_generation(cfg_.strategy) ? StopReason::Cutoff : StopReason::MaxLength;
  std::vector<Rollout> rollouts;
  for (std::size_t b = 0; b < prompts.size(); ++b) {
    const auto prompt = student_tok_->encode(prompts[b]);
    for (std::size_t j = 0; j < cfg_.rollouts_per_problem; ++j) {
      Rng rng(derive_seed(cfg_.seed, {step, b, j}));
      rollouts.push_back(generate_rollout(policy, prompt, ro, rng));
      const Rollout& r = rollouts.back();
      m.generated_tokens += r.length();
      m.stop_eos += r.stop == StopReason::Eos;
      m.stop_cutoff += r.stop == StopReason::Cutoff;
      m.stop_max_length += r.stop == StopReason::MaxLength;
    }
  }
  t.generate_s = seconds_since(t0);

  // Score and select.
  t0 = Clock::now();
  std::vector<ScoredRollout> scored;
  std::vector<std::vector<bool>> masks;
  for (Rollout& r : rollouts) {
    scored.push_back(score_rollout(std::move(r), *student_tok_, *teacher_, bridge_, cfg_.teacher_floor));
    const ScoredRollout& s = scored.back();
    m.coverage += s.alignment.coverage;
    std::vector<bool> mask;
    if (cfg_.strategy == Strategy::PositionEsr) {
      mask = xtok::project_window_mask(s.alignment, cfg_.cutoff, s.rollout.length());
    } else {
      std::vector<PerTokenStats> aligned;
      for (const auto& st : s.stats) {
        if (st.aligned) aligned.push_back(st);
      }
      mask.assign(s.rollout.length(), false);
      if (!aligned.empty()) {
        const auto pick = select_tokens(cfg_.strategy, aligned, cfg_.cutoff);
        for (std::size_t i = 0; i < aligned.size(); ++i) mask[aligned[i].position] = pick[i];
      }
    }
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (!mask[i]) continue;
      ++m.supervised_tokens;
      m.mean_kl += s.stats[i].kl;
      m.mean_student_entropy += s.stats[i].student_entropy;
      m.mean_teacher_entropy += s.stats[i].teacher_entropy;
      m.floored_tokens += s.stats[i].floored;
    }
    masks.push_back(std::move(mask));
  }
  m.coverage /= static_cast<double>(std::max<std::size_t>(scored.size(), 1));
  t.score_s = seconds_since(t0);

  // Train.
  t0 = Clock::now();
  if (m.supervised_tokens == 0) {
    m.skipped = true;
    m.empty_windows = scored.size();
  } else {
    const double n = static_cast<double>(m.supervised_tokens);
    m.mean_kl /= n;
    m.mean_student_entropy /= n;
    m.mean_teacher_entropy /= n;
    const double weight = cfg_.reduction == Reduction::Mean ? 1.0 / n : 1.0;
    const auto params = student_->named_trainable();
    for (auto& [_, p] : params) p->zero_grad();
    for (std::size_t e = 0; e < scored.size(); ++e) {
      if (std::find(masks[e].begin(), masks[e].end(), true) == masks[e].end()) {
        ++m.empty_windows;
        continue;
      }
      grad::Graph g;
      grad::Var loss = masked_kl(g, *student_, scored[e], masks[e], weight);
      m.loss += loss.value()(0, 0);
      g.backward(loss);
    }
    m.grad_norm = optimizer_.step(params);
  }
  t.train_s = seconds_since(t0);
  step_ = step;
  if (timing) *timing = t;
  return m;
}

lm::Checkpoint Trainer::checkpoint() const {
  lm::Checkpoint c;
  c.seed = cfg_.seed;
  c.step = step_;
  for (const auto& [name, p] : student_->parameters()) c.tensors["model." + name] = p.value;
  if (student_->adapters()) {
    for (const auto& [name, p] : student_->adapters()->params) c.tensors["adapter." + name] = p.value;
  }
  for (auto& [name, s] : optimizer_.state()) c.tensors["opt." + name] = s;
  return c;
}

void Trainer::restore(const lm::Checkpoint& ckpt) {
  if (ckpt.seed != cfg_.seed) throw ConfigError("checkpoint seed does not match the config seed");
  std::map<std::string, grad::Matrix> opt;
  std::size_t matched = 0;
  for (const auto& [name, value] : ckpt.tensors) {
    grad::Parameter* target = nullptr;
    if (name.starts_with("model.")) {
      auto it = student_->parameters().find(name.substr(6));
      if (it != student_->parameters().end()) target = &it->second;
    } else if (name.starts_with("adapter.") && student_->adapters()) {
      auto it = student_->adapters()->params.find(name.substr(8));
      if (it != student_->adapters()->params.end()) target = &it->second;
    } else if (name.starts_with("opt.")) {
      opt[name.substr(4)] = value;
      continue;
    }
    if (!target) throw ConfigError("checkpoint tensor '" + name + "' does not belong to this model");
    if (target->value.rows() != value.rows() || target->value.cols() != value.cols()) {
      throw ConfigError("checkpoint tensor '" + name + "' has the wrong shape");
    }
    target->value = value;
    ++matched;
  }
  const std::size_t expected =
      student_->parameters().size() + (student_->adapters() ? student_->adapters()->params.size() : 0);
  if (matched != expected) throw ConfigError("checkpoint is missing model tensors");
  optimizer_.load_state(opt);
  step_ = ckpt.step;
}

std::string metrics_json(const StepMetrics& m) {
  json j = {{"step", m.step},
            {"loss", m.loss},
            {"mean_kl", m.mean_kl},
            {"mean_student_entropy", m.mean_student_entropy},
            {"mean_teacher_entropy", m.mean_teacher_entropy},
            {"coverage", m.coverage},
            {"supervised_tokens", m.supervised_tokens},
            {"generated_tokens", m.generated_tokens},
            {"floored_tokens", m.floored_tokens},
            {"stop_eos", m.stop_eos},
            {"stop_cutoff", m.stop_cutoff},
            {"stop_max_length", m.stop_max_length},
            {"empty_windows", m.empty_windows},
            {"skipped", m.skipped},
            {"grad_norm", m.grad_norm}};
  return j.dump();
}

std::string timing_json(std::uint64_t step, const PhaseTiming& t) {
  return json{{"step", step}, {"generate_s", t.generate_s}, {"score_s", t.score_s}, {"train_s", t.train_s}}.dump();
}

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::uint64_t step) {
  char name[32];
  std::snprintf(name, sizeof name, "step-%06llu.ckpt", static_cast<unsigned long long>(step));
  return dir / "checkpoints" / name;
}

namespace {

/// Keeps only records with step <= `last` in a line-delimited JSON file.
void truncate_records(const std::filesystem::path& path, std::uint64_t last) {
  std::ifstream in(path);
  if (!in) return;
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (json::parse(line).at("step").get<std::uint64_t>() <= last) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

}  // namespace

void run_training(Trainer& trainer, const std::vector<tasks::Task>& suite, const std::filesystem::path& dir,
                  const std::optional<std::filesystem::path>& resume, const TrainingHooks& hooks) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "checkpoints", ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  const auto metrics_path = dir / "metrics.jsonl";
  const auto timing_path = dir / "timing.jsonl";
  if (resume) {
    trainer.restore(lm::load_checkpoint(*resume));
    truncate_records(metrics_path, trainer.steps_done());
    truncate_records(timing_path, trainer.steps_done());
  } else {
    std::ofstream(metrics_path, std::ios::trunc);
    std::ofstream(timing_path, std::ios::trunc);
  }
  std::ofstream metrics(metrics_path, std::ios::app), timing(timing_path, std::ios::app);
  if (!metrics || !timing) throw IoError("cannot write metrics under " + dir.string());

  const auto& cfg = trainer.config();
  while (trainer.steps_done() < cfg.steps) {
    PhaseTiming t;
    const StepMetrics m = trainer.step(suite, &t);
    metrics << metrics_json(m) << '\n';
    timing << timing_json(m.step, t) << '\n';
    metrics.flush();
    timing.flush();
    if (!metrics || !timing) throw IoError("failed writing metrics under " + dir.string());
    if (m.step % cfg.checkpoint_interval == 0 || m.step == cfg.steps) {
      lm::save_checkpoint(trainer.checkpoint(), checkpoint_path(dir, m.step));
      if (hooks.on_checkpoint) hooks.on_checkpoint(m.step, trainer.student());
    }
  }
}

}  // namespace esr::distill
