#pragma once

#include "esr/util/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace esr::tasks {

inline constexpr std::string_view kAnswerDelimiter = "answer:";

enum class TaskKind { Addition, DigitSort, BracketBalance };

std::string_view to_string(TaskKind kind);
/// Throws ConfigError on an unknown name.
TaskKind parse_task_kind(std::string_view name);

struct Difficulty {
  int operand_digits = 1;  // addition, 1..4
  int list_length = 4;     // digit-sort and bracket-balance, 1..12

  friend bool operator==(const Difficulty&, const Difficulty&) = default;
};

struct Task {
  TaskKind kind = TaskKind::Addition;
  std::string prompt;
  std::string gold;
  Difficulty difficulty;
  std::uint64_t seed = 0;

  friend bool operator==(const Task&, const Task&) = default;
};

/// Prompts: "12+7=", "sort:3142=", "bal:(()=". Gold answers are computed exactly.
/// Throws ConfigError when the difficulty is outside the declared ranges.
Task generate_task(TaskKind kind, const Difficulty& difficulty, Rng& rng);

/// `count` tasks, task i drawn from its own stream derive_seed(seed, {i}).
std::vector<Task> generate_suite(TaskKind kind, const Difficulty& difficulty, std::size_t count,
                                 std::uint64_t seed);

/// Gold answer for a rendered prompt, or nullopt when the prompt is not a task prompt.
std::optional<std::string> solve_prompt(std::string_view prompt);

/// Text after the last answer delimiter, whitespace-normalised; nullopt without a delimiter.
std::optional<std::string> extract_answer(std::string_view response);

/// Total: never throws, malformed responses are simply incorrect.
bool verify_response(const Task& task, std::string_view response);

/// Line-delimited JSON, one task per line.
void save_suite(const std::vector<Task>& tasks, const std::filesystem::path& path);
std::vector<Task> load_suite(const std::filesystem::path& path);

}  // namespace esr::tasks
