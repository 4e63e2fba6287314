#pragma once

#include "esr/distill/trainer.hpp"
#include "esr/tasks/task.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace esr::runner {

inline constexpr int kConfigVersion = 1;

struct StudentSpec {
  int layers = 2;
  int heads = 2;
  int width = 64;
  int mlp_multiplier = 4;
  int max_context = 1024;
  /// "char", "merge" or a tokenizer definition file.
  std::string tokenizer = "merge";
};

struct TeacherSpec {
  /// "scripted" or "markov".
  std::string kind = "scripted";
  std::string tokenizer = "merge";
  // scripted
  double epsilon = 0.02;
  std::string trap_chars;
  // markov: a saved table, or a random stationary chain
  std::string table;
  std::uint64_t seed = 0;
  double concentration = 0.1;
  double smoothing = 0.01;
  bool include_eos = false;
};

struct TaskSpec {
  tasks::TaskKind kind = tasks::TaskKind::Addition;
  tasks::Difficulty difficulty;
  std::size_t train_problems = 1000;
  std::size_t eval_problems = 100;
  std::uint64_t train_seed = 0;
  std::uint64_t eval_seed = 1000;
};

struct EvalSpec {
  int k = 4;
  double temperature = 0.7;
  std::size_t max_tokens = 64;
  std::uint64_t seed = 0;
  /// Evaluate the student at every checkpoint, not only at the end.
  bool at_checkpoints = true;
};

struct ProbeSpec {
  /// Steps at which probes run; 0 is the untrained student.
  std::vector<std::uint64_t> at;
  bool profile = true;
  bool commitment = true;
  bool lengths = true;
  bool categories = true;
  bool decay = false;
  std::size_t prompts = 64;
  std::size_t max_length = 64;
  int samples = 1;
  double temperature = 0.7;
  bool allow_eos = true;
  std::size_t bucket_width = 1;
  double top_fraction = 0.1;
  /// Empty selects the built-in rules.
  std::string category_rules;
  std::vector<std::size_t> decay_t = {0, 4, 8, 16, 32};
  std::size_t decay_problems = 50;
  int decay_k = 4;
  std::uint64_t seed = 99;
};

struct ExperimentConfig {
  int version = kConfigVersion;
  std::string name = "run";
  std::uint64_t seed = 0;
  StudentSpec student;
  TeacherSpec teacher;
  TaskSpec task;
  distill::DistillConfig distill;
  EvalSpec eval;
  ProbeSpec probes;

  /// ConfigError naming the offending field.
  void validate() const;
};

/// Parses a config document. Missing fields take their defaults; seeds that are not
/// given derive from the global seed. ConfigParseError (with line) on malformed text,
/// ConfigError naming the field for unknown keys, wrong types or invalid values.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// The effective config with every field present.
std::string dump_config(const ExperimentConfig& cfg);
void save_config(const ExperimentConfig& cfg, const std::filesystem::path& path);

/// Applies "section.field=value" overrides to a config document before parsing.
std::string apply_overrides(std::string_view text, const std::vector<std::string>& overrides);

/// Runs of a sweep: cutoffs (position ESR), strategies, optional full-OPD reference,
/// each repeated over seeds.
struct SweepConfig {
  int version = kConfigVersion;
  std::string name = "sweep";
  /// Experiment document shared by every run; per-run seed, cutoff and strategy are
  /// written into it before it is parsed, so derived seeds follow the run seed.
  std::string base;
  std::vector<std::size_t> cutoffs;
  std::vector<distill::Strategy> strategies;
  bool full_opd = false;
  std::vector<std::uint64_t> seeds = {0};
};

struct SweepRun {
  std::string variant;  // "n8", "full-opd", "top-rkl", ...
  std::uint64_t seed = 0;
  ExperimentConfig config;
};

SweepConfig parse_sweep_config(std::string_view text);
SweepConfig load_sweep_config(const std::filesystem::path& path);
std::string dump_sweep_config(const SweepConfig& cfg);
/// Every run of the sweep in a fixed order, each config validated.
std::vector<SweepRun> expand_sweep(const SweepConfig& cfg);

}  // namespace esr::runner
