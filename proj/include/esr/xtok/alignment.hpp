#pragma once

#include "esr/tok/tokenizer.hpp"

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

namespace esr::xtok {

/// Student/teacher token pairs whose byte spans coincide exactly.
struct AlignmentMap {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (student index, teacher index)
  std::size_t student_tokens = 0;
  /// Fraction of student tokens that are aligned; 1.0 for an empty student side.
  double coverage = 1.0;

  friend bool operator==(const AlignmentMap&, const AlignmentMap&) = default;
};

/// Single merged sweep over both span lists, advancing whichever side ends first.
/// Both lists must tile the same text length (TextMismatchError otherwise).
/// Indices in the result are the spans' token_index fields.
AlignmentMap align_tokenizations(std::span<const tok::TokenSpan> student,
                                 std::span<const tok::TokenSpan> teacher);

/// True at student response positions that are inside the first `cutoff` positions
/// and aligned. ConfigError when cutoff < 1.
std::vector<bool> project_window_mask(const AlignmentMap& alignment, std::size_t cutoff,
                                      std::size_t rollout_length);

}  // namespace esr::xtok
