#include "esr/lm/sampling.hpp"

#include "esr/errors.hpp"
#include "esr/grad/numerics.hpp"

#include <algorithm>
#include <cmath>

namespace esr::lm {

Vector TokenScores::probs() const {
  if (kind == Kind::Probabilities) return values;
  return grad::softmax(values);
}

const char* to_string(StopReason r) {
  switch (r) {
    case StopReason::Eos: return "eos";
    case StopReason::Cutoff: return "cutoff";
    case StopReason::MaxLength: return "max-length";
  }
  return "?";
}

TokenId sample_token(const TokenScores& scores, double temperature, Rng& rng,
                     std::span<const TokenId> banned) {
  if (temperature < 0) throw ConfigError("sampling temperature must be >= 0");
  const Vector& v = scores.values;
  const Eigen::Index n = v.size();
  std::vector<bool> allowed(static_cast<std::size_t>(n), true);
  for (TokenId b : banned) {
    if (b >= 0 && b < n) allowed[static_cast<std::size_t>(b)] = false;
  }
  const bool probs = scores.kind == TokenScores::Kind::Probabilities;
  if (!probs && !v.allFinite()) throw NumericError("sample_token: non-finite logits");

  // Work in log space: log-probabilities for distributions, logits otherwise.
  Vector logw(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!allowed[static_cast<std::size_t>(i)] || (probs && !(v(i) > 0))) {
      logw(i) = -std::numeric_limits<double>::infinity();
    } else {
      logw(i) = probs ? std::log(v(i)) : v(i);
    }
  }
  Eigen::Index best = -1;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (std::isfinite(logw(i)) && (best < 0 || logw(i) > logw(best))) best = i;
  }
  if (best < 0) throw ConfigError("sample_token: no admissible token");
  if (temperature == 0) return static_cast<TokenId>(best);

  const double top = logw(best);
  Vector w(n);
  double total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    w(i) = std::isfinite(logw(i)) ? std::exp((logw(i) - top) / temperature) : 0.0;
    total += w(i);
  }
  const double u = uniform01(rng) * total;
  double acc = 0;
  TokenId last = static_cast<TokenId>(best);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (w(i) <= 0) continue;
    acc += w(i);
    last = static_cast<TokenId>(i);
    if (u < acc) return last;
  }
  return last;
}

Generation generate(const LanguageModel& model, std::span<const TokenId> prompt,
                    const GenerationOptions& options, Rng& rng, std::span<const TokenId> prefix) {
  Generation out;
  auto session = model.start(prompt);
  std::vector<TokenId> banned = {tok::Tokenizer::kBos, tok::Tokenizer::kPad};
  if (!options.allow_eos) banned.push_back(tok::Tokenizer::kEos);
  for (std::size_t i = 0; i < options.max_tokens; ++i) {
    TokenId next;
    if (i < prefix.size()) {
      next = prefix[i];
      if (options.record_scores) out.scores.push_back(session->next());
    } else {
      TokenScores s = session->next();
      next = sample_token(s, options.temperature, rng, banned);
      if (options.record_scores) out.scores.push_back(std::move(s));
    }
    out.tokens.push_back(next);
    if (next == tok::Tokenizer::kEos) {
      out.stop = StopReason::Eos;
      return out;
    }
    if (i + 1 < options.max_tokens) session->push(next);
  }
  out.stop = options.limit_reason;
  return out;
}

}  // namespace esr::lm
