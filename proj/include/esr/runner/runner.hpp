#pragma once

#include "esr/lm/teacher.hpp"
#include "esr/probes/probes.hpp"
#include "esr/runner/config.hpp"
#include "esr/tasks/eval.hpp"

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace esr::runner {

/// Environment variable holding the default output root.
inline constexpr const char* kOutputRootEnv = "ESR_OUTPUT_ROOT";

/// $ESR_OUTPUT_ROOT, or "runs" when unset or empty.
std::filesystem::path output_root();

/// "char", "merge" or a tokenizer definition file.
tok::Tokenizer resolve_tokenizer(const std::string& spec);

/// Everything a config describes, built and ready to train.
class Experiment {
 public:
  explicit Experiment(ExperimentConfig cfg);

  const ExperimentConfig& config() const { return cfg_; }
  const tok::Tokenizer& student_tokenizer() const { return student_tok_; }
  const lm::LanguageModel& teacher() const { return *teacher_; }
  lm::StudentModel& student() { return student_; }
  const lm::LanguageModel& student_policy() const { return policy_; }
  distill::Trainer& trainer() { return trainer_; }
  const std::vector<tasks::Task>& train_suite() const { return train_; }
  const std::vector<tasks::Task>& eval_suite() const { return eval_; }

  tasks::EvalReport evaluate(const lm::LanguageModel& model) const;
  /// Loads trained parameters from a checkpoint of this experiment.
  void restore(const std::filesystem::path& checkpoint);

 private:
  ExperimentConfig cfg_;
  tok::Tokenizer student_tok_;
  std::unique_ptr<lm::LanguageModel> teacher_;
  lm::StudentModel student_;
  lm::StudentPolicy policy_;
  distill::Trainer trainer_;
  std::vector<tasks::Task> train_, eval_;
};

/// Probe results for the current student as a JSON document. With `before`, the
/// position profile of the untrained student, the cascade report is included.
std::string run_probes(Experiment& exp, std::uint64_t step, const probes::PositionProfile* before = nullptr,
                       std::optional<double> reference_length = std::nullopt);

std::string eval_json(const tasks::EvalReport& r);
tasks::EvalReport parse_eval_json(std::string_view text);

struct RunSummary {
  std::filesystem::path dir;
  tasks::EvalReport baseline, teacher, trained;
  double best_avg_at_k = 0;
  std::uint64_t best_step = 0;
};

/// Trains one experiment into `dir`: effective config, task suites, metrics and
/// timing streams, checkpoints, per-checkpoint evals, scheduled probe reports, the
/// final baseline/teacher/trained evals and result.json. On failure a failure.json
/// is written, artifacts so far are kept and the error is rethrown. ConfigError when
/// `dir` already holds artifacts and `resume` is false; with `resume` training
/// continues from the latest checkpoint.
RunSummary run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& dir, bool resume = false);

/// All runs of the sweep under dir/<variant>/seed-<s>, then the merged report.
/// Completed runs are skipped; failed runs are recorded and reported at the end
/// with an Error once every other run has finished.
void run_sweep(const SweepConfig& cfg, const std::filesystem::path& dir);

/// Writes dir/report/*.tsv and dir/report/summary.txt for a run or sweep directory and
/// returns the files written. ReportError listing the absent artifacts when no
/// completed run is found.
std::vector<std::filesystem::path> emit_report(const std::filesystem::path& dir);

}  // namespace esr::runner
