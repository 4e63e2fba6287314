#pragma once

#include "esr/distill/rollout.hpp"

#include <string_view>
#include <vector>

namespace esr::distill {

enum class Strategy { PositionEsr, FullOpd, TopRkl, TopHs, TopHt, RklHs, HtHs, RklHtHs };

inline constexpr Strategy kAllStrategies[] = {Strategy::PositionEsr, Strategy::FullOpd, Strategy::TopRkl,
                                              Strategy::TopHs,       Strategy::TopHt,   Strategy::RklHs,
                                              Strategy::HtHs,        Strategy::RklHtHs};

/// "position-esr", "full-opd", "top-rkl", "top-hs", "top-ht", "rkl*hs", "ht*hs", "rkl*ht*hs".
const char* to_string(Strategy s);
/// ConfigError on an unknown name.
Strategy parse_strategy(std::string_view name);

/// Only position-ESR truncates generation; every other strategy needs full rollouts.
inline bool truncates_generation(Strategy s) { return s == Strategy::PositionEsr; }

/// Selection score of one position for the score-based strategies.
double strategy_score(Strategy s, const PerTokenStats& stats);

/// Mask over the stats positions. position-ESR keeps the first min(K, T) entries,
/// full-OPD keeps all of them, score strategies keep the top K scores with ties going
/// to the earlier position. ConfigError when K < 1.
std::vector<bool> select_tokens(Strategy strategy, std::span<const PerTokenStats> stats, std::size_t k);

}  // namespace esr::distill
