#pragma once

#include "esr/distill/rollout.hpp"
#include "esr/grad/graph.hpp"
#include "esr/lm/student.hpp"

#include <vector>

namespace esr::distill {

enum class Reduction { Mean, Sum };
const char* to_string(Reduction r);
Reduction parse_reduction(std::string_view name);

/// Reduction of per-token KL values over the masked positions.
/// ShapeError on a length mismatch, EmptyWindowError on an all-false mask.
double window_loss(std::span<const double> kl, const std::vector<bool>& mask, Reduction reduction = Reduction::Mean);

/// Mean KL over every aligned position of the rollout (the untruncated objective).
double full_opd_loss(const ScoredRollout& scored);

/// Differentiable sum over masked positions of KL(student || teacher), times `weight`.
/// The student is re-run on BOS + prompt + response; the teacher side is constant.
/// Only rows up to the last masked position are computed.
grad::Var masked_kl(grad::Graph& g, lm::StudentModel& student, const ScoredRollout& scored,
                    const std::vector<bool>& mask, double weight);

/// Same objective from a logits node whose row prompt + t scores response position t.
grad::Var masked_kl_from_logits(grad::Graph& g, grad::Var logits, const ScoredRollout& scored,
                                const std::vector<bool>& mask, double weight);

}  // namespace esr::distill
