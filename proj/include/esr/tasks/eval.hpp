#pragma once

#include "esr/lm/sampling.hpp"
#include "esr/tasks/task.hpp"

#include <optional>
#include <string>
#include <vector>

namespace esr::tasks {

struct EvalReport {
  double avg_at_k = 0;
  double pass_at_k = 0;
  double maj_at_k = 0;
  int k = 0;
  double temperature = 0;
  std::size_t problems = 0;
  double mean_length = 0;  // response tokens per sample
};

struct SampleOutcome {
  std::optional<std::string> answer;
  bool correct = false;
  std::size_t length = 0;
};

/// Metrics from per-task sample outcomes. maj@k needs a unique modal answer equal
/// to gold; ties count as incorrect.
EvalReport aggregate(const std::vector<Task>& tasks, const std::vector<std::vector<SampleOutcome>>& samples,
                     double temperature);

struct EvalOptions {
  int k = 4;
  double temperature = 0.7;
  std::size_t max_tokens = 64;
  std::uint64_t seed = 0;
};

/// k samples per task, sample j of task i drawn from derive_seed(seed, {i, j}).
/// ConfigError when k < 1.
EvalReport evaluate(const lm::LanguageModel& model, const std::vector<Task>& tasks, const EvalOptions& options);

}  // namespace esr::tasks
