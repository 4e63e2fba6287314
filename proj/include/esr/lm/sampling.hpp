#pragma once

#include "esr/grad/tensor.hpp"
#include "esr/tok/tokenizer.hpp"
#include "esr/util/rng.hpp"

#include <memory>
#include <span>
#include <vector>

namespace esr::lm {

using grad::Matrix;
using grad::Vector;
using tok::TokenId;

/// Next-token scores: raw logits (student) or an exact probability vector (teacher).
struct TokenScores {
  enum class Kind { Logits, Probabilities };
  Kind kind = Kind::Logits;
  Vector values;

  static TokenScores logits(Vector v) { return {Kind::Logits, std::move(v)}; }
  static TokenScores probabilities(Vector v) { return {Kind::Probabilities, std::move(v)}; }
  /// Untempered probabilities.
  Vector probs() const;
};

/// Temperature 0 is argmax with ties to the lowest id; otherwise a draw from the
/// temperature-scaled distribution. Banned ids are never returned.
/// ConfigError on negative temperature or when every id is banned / has zero mass.
TokenId sample_token(const TokenScores& scores, double temperature, Rng& rng,
                     std::span<const TokenId> banned = {});

/// Incremental decoding state of one sequence.
class DecodeSession {
 public:
  virtual ~DecodeSession() = default;
  virtual TokenScores next() = 0;
  virtual void push(TokenId id) = 0;
};

/// Anything that can continue a prompt token by token: the student and every teacher.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;
  virtual const tok::Tokenizer& tokenizer() const = 0;
  /// `prompt` is the tokenizer's encoding of the prompt text (no BOS).
  virtual std::unique_ptr<DecodeSession> start(std::span<const TokenId> prompt) const = 0;
};

enum class StopReason { Eos, Cutoff, MaxLength };
const char* to_string(StopReason r);

struct GenerationOptions {
  std::size_t max_tokens = 0;
  double temperature = 1.0;
  bool allow_eos = true;
  /// Label used when max_tokens is reached: Cutoff for ESR windows, MaxLength otherwise.
  StopReason limit_reason = StopReason::MaxLength;
  bool record_scores = true;
};

struct Generation {
  std::vector<TokenId> tokens;  // includes the trailing EOS when stop == Eos
  std::vector<TokenScores> scores;  // scores[i] produced tokens[i]
  StopReason stop = StopReason::MaxLength;
};

/// Autoregressive sampling from any model. `prefix` tokens are forced before sampling
/// starts and count toward max_tokens (used to continue someone else's partial response).
Generation generate(const LanguageModel& model, std::span<const TokenId> prompt,
                    const GenerationOptions& options, Rng& rng, std::span<const TokenId> prefix = {});

}  // namespace esr::lm
