#include "esr/xtok/alignment.hpp"

#include "esr/errors.hpp"

#include <string>

namespace esr::xtok {

namespace {

std::size_t tiled_length(std::span<const tok::TokenSpan> spans, const char* side) {
  std::size_t at = 0;
  for (const auto& s : spans) {
    if (s.begin != at || s.end < s.begin) {
      throw TextMismatchError(std::string(side) + " spans do not tile the text contiguously");
    }
    at = s.end;
  }
  return at;
}

}  // namespace

AlignmentMap align_tokenizations(std::span<const tok::TokenSpan> student,
                                 std::span<const tok::TokenSpan> teacher) {
  const std::size_t ls = tiled_length(student, "student");
  const std::size_t lt = tiled_length(teacher, "teacher");
  if (ls != lt) {
    throw TextMismatchError("span lists tile different lengths: " + std::to_string(ls) + " vs " +
                            std::to_string(lt));
  }
  AlignmentMap out;
  out.student_tokens = student.size();
  std::size_t i = 0, j = 0;
  while (i < student.size() && j < teacher.size()) {
    const auto& s = student[i];
    const auto& t = teacher[j];
    if (s.begin == t.begin && s.end == t.end) {
      out.pairs.emplace_back(s.token_index, t.token_index);
      ++i;
      ++j;
    } else if (s.end <= t.end) {
      ++i;
    } else {
      ++j;
    }
  }
  out.coverage = student.empty() ? 1.0
                                 : static_cast<double>(out.pairs.size()) / static_cast<double>(student.size());
  return out;
}

std::vector<bool> project_window_mask(const AlignmentMap& alignment, std::size_t cutoff,
                                      std::size_t rollout_length) {
  if (cutoff < 1) throw ConfigError("window cutoff N must be >= 1");
  std::vector<bool> mask(rollout_length, false);
  for (const auto& [s, _] : alignment.pairs) {
    if (s < cutoff && s < rollout_length) mask[s] = true;
  }
  return mask;
}

}  // namespace esr::xtok
