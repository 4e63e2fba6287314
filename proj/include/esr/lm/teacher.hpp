#pragma once

#include "esr/lm/sampling.hpp"

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace esr::lm {

/// Exact tabular teacher. The context is the response so far (the prompt only
/// selects the tokenizer-level start); rows are keyed by the last `order` tokens.
class MarkovTeacher : public LanguageModel {
 public:
  using Context = std::vector<TokenId>;

  /// Every row must have tokenizer.vocab_size() entries, be non-negative and sum to
  /// 1 within 1e-12; ConfigError otherwise.
  MarkovTeacher(tok::Tokenizer tokenizer, int order, Vector initial, Vector fallback,
                std::map<Context, Vector> rows);

  /// Contexts holding any trap token are answered from the degraded table instead.
  void set_trap(std::set<TokenId> trap_tokens, Vector degraded_fallback,
                std::map<Context, Vector> degraded_rows = {});

  /// Order-1 chain over the text tokens with Dirichlet(concentration) rows mixed
  /// with `smoothing` of the uniform row; the initial row is the chain's stationary
  /// distribution. Control tokens get zero mass unless include_eos is set.
  static MarkovTeacher random_stationary(tok::Tokenizer tokenizer, std::uint64_t seed,
                                         double concentration = 0.1, double smoothing = 0.01,
                                         bool include_eos = false);

  const Vector& next_distribution(std::span<const TokenId> context) const;
  bool trapped(std::span<const TokenId> context) const;

  int order() const { return order_; }
  const Vector& initial() const { return initial_; }
  const Vector& fallback() const { return fallback_; }
  const std::map<Context, Vector>& rows() const { return rows_; }
  const std::set<TokenId>& trap_tokens() const { return trap_; }

  const tok::Tokenizer& tokenizer() const override { return tokenizer_; }
  std::unique_ptr<DecodeSession> start(std::span<const TokenId> prompt) const override;

  void save(const std::filesystem::path& path) const;
  static MarkovTeacher load(const std::filesystem::path& path);

 private:
  void check_row(const Vector& row, const char* what) const;

  tok::Tokenizer tokenizer_;
  int order_;
  Vector initial_, fallback_;
  std::map<Context, Vector> rows_;
  std::set<TokenId> trap_;
  Vector degraded_fallback_;
  std::map<Context, Vector> degraded_rows_;
};

/// Teacher that solves the synthetic tasks: it writes the answer delimiter, then the
/// gold answer, then EOS, each step mixed with `epsilon` of the uniform row over text
/// tokens and EOS. With a trap alphabet set, any trap character in the response makes
/// the answer part uniformly random (digits for numeric answers, yes/no for balance).
class ScriptedTaskTeacher : public LanguageModel {
 public:
  explicit ScriptedTaskTeacher(tok::Tokenizer tokenizer, double epsilon = 0.02,
                               std::string trap_chars = "");

  /// Exact next-token distribution for a prompt and response text.
  Vector next_distribution(std::string_view prompt, std::string_view response) const;
  bool trapped(std::string_view response) const;

  double epsilon() const { return epsilon_; }
  const std::string& trap_chars() const { return trap_chars_; }

  const tok::Tokenizer& tokenizer() const override { return tokenizer_; }
  std::unique_ptr<DecodeSession> start(std::span<const TokenId> prompt) const override;

 private:
  Vector script_row(std::string_view prompt, std::string_view response) const;

  tok::Tokenizer tokenizer_;
  double epsilon_;
  std::string trap_chars_;
  Vector uniform_;
};

}  // namespace esr::lm
