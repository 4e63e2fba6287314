#pragma once

#include "esr/distill/loss.hpp"
#include "esr/distill/optimizer.hpp"
#include "esr/distill/selection.hpp"
#include "esr/lm/checkpoint.hpp"
#include "esr/lm/student.hpp"
#include "esr/tasks/task.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace esr::distill {

struct DistillConfig {
  std::size_t cutoff = 16;  // N
  std::size_t max_length = 512;
  double temperature = 0.7;
  bool allow_eos = true;
  std::size_t batch_size = 16;
  std::size_t rollouts_per_problem = 1;
  std::size_t steps = 200;
  std::size_t checkpoint_interval = 50;
  lm::Regime regime = lm::Regime::Adapter;
  int adapter_rank = 32;
  double adapter_alpha = 64;
  Strategy strategy = Strategy::PositionEsr;
  Reduction reduction = Reduction::Mean;
  OptimizerConfig optimizer;
  double teacher_floor = kTeacherFloor;
  std::uint64_t seed = 0;

  /// ConfigError naming the first offending field.
  void validate() const;
  /// Tokens generated per rollout at most.
  std::size_t generation_limit() const { return truncates_generation(strategy) ? cutoff : max_length; }
};

struct StepMetrics {
  std::uint64_t step = 0;
  double loss = 0;
  double mean_kl = 0;       // over supervised positions
  double mean_student_entropy = 0;
  double mean_teacher_entropy = 0;
  double coverage = 0;      // mean alignment coverage over the batch
  std::size_t supervised_tokens = 0;
  std::size_t generated_tokens = 0;
  std::size_t floored_tokens = 0;
  std::size_t stop_eos = 0, stop_cutoff = 0, stop_max_length = 0;
  std::size_t empty_windows = 0;
  bool skipped = false;
  double grad_norm = 0;
};

struct PhaseTiming {
  double generate_s = 0;
  double score_s = 0;
  double train_s = 0;
};

/// Owns the optimizer and the step counter for one student. The student must
/// already carry its adapters (adapter regime) and have its regime set.
class Trainer {
 public:
  Trainer(DistillConfig cfg, lm::StudentModel& student, const tok::Tokenizer& student_tok,
          const lm::LanguageModel& teacher);

  /// One update on an explicit batch of prompt texts, with rollout streams derived
  /// from (seed, step). Elements whose window is empty contribute nothing; when all
  /// are empty the step is skipped and no parameter changes.
  StepMetrics train_step(const std::vector<std::string>& prompts, PhaseTiming* timing = nullptr);
  /// Next step on problems drawn from `suite` by (seed, step, element).
  StepMetrics step(const std::vector<tasks::Task>& suite, PhaseTiming* timing = nullptr);

  std::uint64_t steps_done() const { return step_; }
  const DistillConfig& config() const { return cfg_; }
  lm::StudentModel& student() { return *student_; }

  lm::Checkpoint checkpoint() const;
  /// Restores parameters, optimizer state and step. ConfigError on a seed or
  /// tensor mismatch.
  void restore(const lm::Checkpoint& ckpt);

 private:
  DistillConfig cfg_;
  lm::StudentModel* student_;
  const tok::Tokenizer* student_tok_;
  const lm::LanguageModel* teacher_;
  VocabBridge bridge_;
  Optimizer optimizer_;
  std::uint64_t step_ = 0;
};

/// Indices into `suite` for the batch of step `step`.
std::vector<std::size_t> batch_indices(const DistillConfig& cfg, std::uint64_t step, std::size_t suite_size);

std::string metrics_json(const StepMetrics& m);
std::string timing_json(std::uint64_t step, const PhaseTiming& t);

struct TrainingHooks {
  /// Called after every checkpoint is written.
  std::function<void(std::uint64_t step, lm::StudentModel&)> on_checkpoint;
};

/// Runs the trainer to cfg.steps, appending to <dir>/metrics.jsonl and
/// <dir>/timing.jsonl and writing <dir>/checkpoints/step-XXXXXX.ckpt every interval
/// and at the last step. With `resume`, training continues from that checkpoint and
/// metrics records after its step are discarded first. IoError when `dir` is unwritable.
void run_training(Trainer& trainer, const std::vector<tasks::Task>& suite, const std::filesystem::path& dir,
                  const std::optional<std::filesystem::path>& resume = std::nullopt, const TrainingHooks& hooks = {});

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::uint64_t step);

}  // namespace esr::distill
