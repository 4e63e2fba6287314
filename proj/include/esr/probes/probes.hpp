#pragma once

#include "esr/distill/rollout.hpp"
#include "esr/tasks/task.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace esr::probes {

using distill::ScoredRollout;
using tok::TokenId;

// ---------------------------------------------------------------------------
// Teacher decay

struct DecayOptions {
  std::vector<std::size_t> t_grid = {0, 4, 8, 16, 32};
  int k = 4;
  double prefix_temperature = 0.7;
  double teacher_temperature = 0.7;
  /// Teacher tokens generated after the prefix.
  std::size_t continuation_tokens = 32;
  std::uint64_t seed = 0;
};

struct DecayCurve {
  std::vector<std::size_t> t;
  std::vector<double> accuracy;  // A_T(x | y_<t); accuracy[0] is A_T(x) when t[0] == 0
  std::vector<double> delta;     // A_T(x) - accuracy
  std::size_t samples_per_point = 0;
};

/// One EOS-free prefix of length max(t) per (task, sample), truncated to each t,
/// re-encoded for the teacher, then continued by the teacher and verified.
/// ConfigError unless the grid is ascending and starts at 0, or when k < 1.
DecayCurve teacher_decay_curve(const lm::LanguageModel& teacher, const lm::LanguageModel& prefix_source,
                               const std::vector<tasks::Task>& tasks, const DecayOptions& options);

// ---------------------------------------------------------------------------
// Rollout sampling shared by the profile and commitment probes

struct SampleOptions {
  std::size_t max_length = 64;
  int samples = 1;
  double temperature = 0.7;
  bool allow_eos = true;
  std::uint64_t seed = 0;
};

/// `samples` scored rollouts per prompt from the student, scored exactly by the teacher.
std::vector<ScoredRollout> sample_scored(const lm::LanguageModel& student, const lm::LanguageModel& teacher,
                                         const std::vector<std::string>& prompts, const SampleOptions& options);

// ---------------------------------------------------------------------------
// Position profile and cascade

struct PositionBucket {
  std::size_t begin = 0, end = 0;  // response positions [begin, end), 0-based
  std::size_t count = 0;           // aligned tokens; 0 marks an empty bucket
  double mean_kl = 0;
  double mean_student_entropy = 0;
  double mean_teacher_entropy = 0;
};

struct PositionProfile {
  std::vector<PositionBucket> buckets;
};

/// Buckets of `bucket_width` positions over [0, max_length).
PositionProfile profile_from(const std::vector<ScoredRollout>& rollouts, std::size_t max_length,
                             std::size_t bucket_width = 1);
/// Samples rollouts and profiles them. ConfigError when max_length < 1.
PositionProfile position_profile(const lm::LanguageModel& student, const lm::LanguageModel& teacher,
                                 const std::vector<std::string>& prompts, const SampleOptions& options,
                                 std::size_t bucket_width = 1);

struct CascadeReport {
  std::size_t cutoff = 0;
  std::optional<double> in_window_drop;   // percent, positions < N
  std::optional<double> out_window_drop;  // percent, positions >= N
  double in_before = 0, in_after = 0, out_before = 0, out_after = 0;
};

/// Count-weighted KL per region, drop = 100 (before - after) / before; not applicable
/// (nullopt) when a region's before-mean is 0 or empty. ConfigError on differing buckets.
CascadeReport cascade_report(const PositionProfile& before, const PositionProfile& after, std::size_t cutoff);

// ---------------------------------------------------------------------------
// Mode commitment

struct CommitmentStats {
  double top_fraction = 0.1;
  double top1_pct = 0, top2to5_pct = 0, outside_top5_pct = 0;
  double mean_top1_prob = 0;
  std::size_t n = 0;
};

/// Top `top_fraction` of aligned tokens by KL (ceil, ties to earlier tokens), bucketed by
/// the teacher rank of the student argmax. ConfigError for a fraction outside (0, 1];
/// InsufficientDataError with fewer than 10 selected tokens.
CommitmentStats mode_commitment(const std::vector<ScoredRollout>& rollouts, double top_fraction = 0.1);

// ---------------------------------------------------------------------------
// Length statistics

struct LengthStats {
  double p10 = 0, p50 = 0, p90 = 0, mean = 0;
  std::optional<double> ratio_to_reference;
};

/// Linear-interpolation percentiles. ConfigError on an empty input.
LengthStats length_stats(std::span<const std::size_t> lengths, std::optional<double> reference_mean = std::nullopt);
double percentile(std::vector<double> values, double q);

// ---------------------------------------------------------------------------
// Token categories

enum class Category { Planning, Structural, MathNumber, MathOperator, MathLatex, Continuation };
inline constexpr std::array<Category, 6> kCategories = {Category::Planning,     Category::Structural,
                                                        Category::MathNumber,   Category::MathOperator,
                                                        Category::MathLatex,    Category::Continuation};
const char* to_string(Category c);
Category parse_category(std::string_view name);

/// Plain-text rule table. Each line is `<category> <matcher> <args...>` with matchers
/// `keyword` (whole token, surrounding whitespace ignored), `all_in` (every byte in the
/// set), `contains` (substring) and `blank` (empty or whitespace). Arguments are
/// separated by spaces; \s \t \n and \\ escape those bytes. '#' starts a comment line.
struct CategoryRules {
  struct Rule {
    Category category;
    std::string matcher;
    std::vector<std::string> args;
  };
  std::vector<Rule> rules;

  static CategoryRules parse(std::string_view text);
  static CategoryRules load(const std::filesystem::path& path);
  /// The rule set shipped as data/token_categories.txt.
  static CategoryRules builtin();
  static std::string_view builtin_text();
};

/// First category in the fixed priority order with a matching rule; continuation
/// otherwise. Empty text (control tokens) is structural.
Category classify_token(std::string_view text, const CategoryRules& rules);

struct CategoryStat {
  Category category;
  std::size_t count = 0;
  double mean_kl = 0;
};

/// Per-category mean KL over aligned response tokens.
std::vector<CategoryStat> category_profile(const std::vector<ScoredRollout>& rollouts, const tok::Tokenizer& tok,
                                           const CategoryRules& rules);

// ---------------------------------------------------------------------------

/// Spearman rank correlation with average ranks for ties. ConfigError for fewer than
/// two points or unequal lengths; 0 when either side is constant.
double spearman(std::span<const double> x, std::span<const double> y);

}  // namespace esr::probes
