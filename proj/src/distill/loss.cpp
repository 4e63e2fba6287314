#include "esr/distill/loss.hpp"

#include "esr/errors.hpp"

namespace esr::distill {

const char* to_string(Reduction r) { return r == Reduction::Mean ? "mean" : "sum"; }

Reduction parse_reduction(std::string_view name) {
  if (name == "mean") return Reduction::Mean;
  if (name == "sum") return Reduction::Sum;
  throw ConfigError("loss reduction must be 'mean' or 'sum'");
}

double window_loss(std::span<const double> kl, const std::vector<bool>& mask, Reduction reduction) {
  if (kl.size() != mask.size()) throw ShapeError("window_loss: mask length differs from rollout length");
  double total = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < kl.size(); ++i) {
    if (!mask[i]) continue;
    total += kl[i];
    ++n;
  }
  if (n == 0) throw EmptyWindowError("window_loss: no supervised positions");
  return reduction == Reduction::Mean ? total / static_cast<double>(n) : total;
}

double full_opd_loss(const ScoredRollout& scored) {
  double total = 0;
  std::size_t n = 0;
  for (const auto& s : scored.stats) {
    if (!s.aligned) continue;
    total += s.kl;
    ++n;
  }
  if (n == 0) throw EmptyWindowError("full_opd_loss: no aligned positions");
  return total / static_cast<double>(n);
}

namespace {

struct Selection {
  std::vector<int> rows;
  Matrix logq;
};

Selection select_rows(const ScoredRollout& scored, const std::vector<bool>& mask) {
  const Rollout& r = scored.rollout;
  if (mask.size() != r.length()) throw ShapeError("masked_kl: mask length differs from rollout length");
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] && !scored.stats[i].aligned) throw ConfigError("masked_kl: mask selects an unaligned position");
  }
  Selection sel;
  std::vector<const Vector*> targets;
  std::size_t k = 0;
  for (const auto& [s, t] : scored.alignment.pairs) {
    if (mask[s]) {
      sel.rows.push_back(static_cast<int>(r.prompt.size() + s));
      targets.push_back(&scored.teacher_logq[k]);
    }
    ++k;
  }
  if (sel.rows.empty()) throw EmptyWindowError("masked_kl: no supervised positions");
  sel.logq.resize(static_cast<Eigen::Index>(targets.size()), targets.front()->size());
  for (std::size_t i = 0; i < targets.size(); ++i) sel.logq.row(static_cast<Eigen::Index>(i)) = targets[i]->transpose();
  return sel;
}

grad::Var kl_of_rows(grad::Graph& g, grad::Var logits, Selection sel, double weight) {
  grad::Var logp = grad::log_softmax(grad::gather_rows(logits, sel.rows));
  grad::Var p = grad::exp(logp);
  grad::Var kl = grad::sum(grad::mul(p, logp - g.constant(std::move(sel.logq))));
  return grad::scale(kl, weight);
}

}  // namespace

grad::Var masked_kl_from_logits(grad::Graph& g, grad::Var logits, const ScoredRollout& scored,
                                const std::vector<bool>& mask, double weight) {
  return kl_of_rows(g, logits, select_rows(scored, mask), weight);
}

grad::Var masked_kl(grad::Graph& g, lm::StudentModel& student, const ScoredRollout& scored,
                    const std::vector<bool>& mask, double weight) {
  Selection sel = select_rows(scored, mask);
  const Rollout& r = scored.rollout;
  // Logit row j predicts input token j + 1, so row prompt + s predicts response[s].
  const std::size_t needed = static_cast<std::size_t>(sel.rows.back()) + 1;
  std::vector<TokenId> input;
  input.reserve(needed + 1);
  input.push_back(tok::Tokenizer::kBos);
  input.insert(input.end(), r.prompt.begin(), r.prompt.end());
  input.insert(input.end(), r.response.begin(), r.response.end());
  input.resize(needed);
  return kl_of_rows(g, student.forward(g, input), std::move(sel), weight);
}

}  // namespace esr::distill
