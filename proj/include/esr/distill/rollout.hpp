#pragma once

#include "esr/lm/sampling.hpp"
#include "esr/xtok/alignment.hpp"

#include <vector>

namespace esr::distill {

using grad::Matrix;
using grad::Vector;
using lm::StopReason;
using tok::TokenId;

inline constexpr double kTeacherFloor = 1e-12;

struct Rollout {
  std::vector<TokenId> prompt;
  std::vector<TokenId> response;  // ends with EOS when stop == Eos
  /// Student log-probabilities over its vocabulary; student_logp[t] produced response[t].
  std::vector<Vector> student_logp;
  StopReason stop = StopReason::MaxLength;

  std::size_t length() const { return response.size(); }
};

struct RolloutOptions {
  std::size_t max_tokens = 0;
  double temperature = 0.7;
  bool allow_eos = true;
  /// Cutoff labels a truncated ESR window; MaxLength a capped full rollout.
  StopReason limit_reason = StopReason::MaxLength;
};

/// Samples up to max_tokens response tokens. ConfigError for max_tokens < 1;
/// ContextError when the prompt does not fit the model.
Rollout generate_rollout(const lm::LanguageModel& student, std::span<const TokenId> prompt,
                         const RolloutOptions& options, Rng& rng);

/// Student token id -> teacher token id with the same surface text, or -1.
/// Control tokens map to the same control token.
struct VocabBridge {
  std::vector<int> to_teacher;
  std::size_t teacher_vocab = 0;
  bool identity = false;

  static VocabBridge build(const tok::Tokenizer& student, const tok::Tokenizer& teacher);
  /// Teacher log-probabilities (floored) re-indexed over the student vocabulary.
  Vector project_logq(const Vector& teacher_probs, double floor = kTeacherFloor) const;
};

struct PerTokenStats {
  std::size_t position = 0;
  bool aligned = false;
  double kl = 0;
  double student_entropy = 0;
  double teacher_entropy = 0;
  /// 1-based rank under the teacher of the sampled token and of the student argmax;
  /// teacher_vocab + 1 when the token has no teacher counterpart.
  std::size_t teacher_rank = 0;
  std::size_t argmax_teacher_rank = 0;
  double student_top1 = 0;
  bool floored = false;
};

/// Full-distribution reverse KL sum_v p_s(v) (log p_s(v) - log max(p_t(v), floor)).
/// Both vectors index the same vocabulary. Sets *floored when the floor was needed
/// where the student has mass.
double reverse_kl(const Vector& student_logp, const Vector& teacher_probs, double floor = kTeacherFloor,
                  bool* floored = nullptr);

/// A rollout scored by the teacher at every aligned response position.
struct ScoredRollout {
  Rollout rollout;
  xtok::AlignmentMap alignment;
  std::vector<PerTokenStats> stats;  // one per response position
  /// Floored teacher log-probabilities over the student vocabulary, aligned positions only.
  std::vector<Vector> teacher_logq;
  std::size_t teacher_tokens = 0;

  std::vector<bool> aligned_mask() const;
};

/// Decode the response, re-encode prompt and response under the teacher tokenizer,
/// align by exact spans (a trailing EOS is paired with the teacher's EOS) and score
/// each aligned position with the teacher's untempered next-token distribution.
ScoredRollout score_rollout(Rollout rollout, const tok::Tokenizer& student_tok, const lm::LanguageModel& teacher,
                            const VocabBridge& bridge, double floor = kTeacherFloor);

}  // namespace esr::distill
