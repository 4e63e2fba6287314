#include "esr/distill/selection.hpp"

#include "esr/errors.hpp"

#include <algorithm>
#include <numeric>

namespace esr::distill {

const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::PositionEsr: return "position-esr";
    case Strategy::FullOpd: return "full-opd";
    case Strategy::TopRkl: return "top-rkl";
    case Strategy::TopHs: return "top-hs";
    case Strategy::TopHt: return "top-ht";
    case Strategy::RklHs: return "rkl*hs";
    case Strategy::HtHs: return "ht*hs";
    case Strategy::RklHtHs: return "rkl*ht*hs";
  }
  return "?";
}

Strategy parse_strategy(std::string_view name) {
  for (Strategy s : kAllStrategies) {
    if (name == to_string(s)) return s;
  }
  throw ConfigError("unknown selection strategy '" + std::string(name) + "'");
}

double strategy_score(Strategy s, const PerTokenStats& t) {
  switch (s) {
    case Strategy::TopRkl: return t.kl;
    case Strategy::TopHs: return t.student_entropy;
    case Strategy::TopHt: return t.teacher_entropy;
    case Strategy::RklHs: return t.kl * t.student_entropy;
    case Strategy::HtHs: return t.teacher_entropy * t.student_entropy;
    case Strategy::RklHtHs: return t.kl * t.teacher_entropy * t.student_entropy;
    default: throw ConfigError(std::string("strategy ") + to_string(s) + " has no score");
  }
}

std::vector<bool> select_tokens(Strategy strategy, std::span<const PerTokenStats> stats, std::size_t k) {
  if (k < 1) throw ConfigError("select_tokens: K must be >= 1");
  const std::size_t n = stats.size();
  std::vector<bool> mask(n, false);
  if (strategy == Strategy::FullOpd) {
    mask.assign(n, true);
    return mask;
  }
  if (strategy == Strategy::PositionEsr) {
    for (std::size_t i = 0; i < std::min(k, n); ++i) mask[i] = true;
    return mask;
  }
  std::vector<double> score(n);
  for (std::size_t i = 0; i < n; ++i) score[i] = strategy_score(strategy, stats[i]);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t take = std::min(k, n);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                    [&](std::size_t a, std::size_t b) { return score[a] > score[b] || (score[a] == score[b] && a < b); });
  for (std::size_t i = 0; i < take; ++i) mask[order[i]] = true;
  return mask;
}

}  // namespace esr::distill
