#pragma once

#include "esr/grad/graph.hpp"
#include "esr/lm/sampling.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace esr::lm {

struct StudentConfig {
  int layers = 2;
  int heads = 2;
  int width = 64;
  int vocab = 0;
  int max_context = 1024;
  int mlp_multiplier = 4;
  std::uint64_t seed = 0;
};

enum class Regime { Adapter, FullFinetune };
const char* to_string(Regime r);
Regime parse_regime(std::string_view name);

/// Low-rank factors for a set of base matrices: W_eff = W + (alpha / rank) * down * up.
struct AdapterSet {
  int rank = 32;
  double alpha = 64.0;
  std::vector<std::string> targets;
  /// "<target>.down" (d_in x rank) and "<target>.up" (rank x d_out).
  grad::ParameterSet params;

  double scale() const { return alpha / rank; }
};

/// Names of the matrices adapters attach to by default: attention and MLP projections.
std::vector<std::string> default_adapter_targets(const StudentConfig& cfg);

/// Decoder-only pre-LN transformer with fixed sinusoidal positions.
class StudentModel {
 public:
  /// Scaled Gaussian init (std = width^-1/2) from cfg.seed. ConfigError on bad dims.
  explicit StudentModel(const StudentConfig& cfg);

  const StudentConfig& config() const { return cfg_; }
  grad::ParameterSet& parameters() { return params_; }
  const grad::ParameterSet& parameters() const { return params_; }
  const std::optional<AdapterSet>& adapters() const { return adapters_; }
  std::optional<AdapterSet>& adapters() { return adapters_; }

  /// Adapter regime freezes base weights and trains adapter factors; full fine-tune
  /// trains base weights. ConfigError when the adapter regime has no adapters.
  void set_regime(Regime regime);
  /// Trainable parameters, base first, each group in name order.
  std::vector<grad::Parameter*> trainable();
  std::vector<std::pair<std::string, grad::Parameter*>> named_trainable();

  /// L x vocab logits; row t depends only on tokens[0..t].
  /// VocabError on an out-of-range id, ContextError past max_context.
  grad::Var forward(grad::Graph& g, std::span<const TokenId> tokens);
  /// Inference-only logits from constant weights.
  Matrix logits(std::span<const TokenId> tokens) const;

  /// KV-cached incremental decoding over the effective (adapted) weights.
  class Decoder {
   public:
    explicit Decoder(const StudentModel& model);
    /// Feeds one token; returns logits for the following position.
    const Vector& push(TokenId id);
    const Vector& logits() const { return logits_; }
    std::size_t length() const { return length_; }

   private:
    const StudentModel* model_;
    std::vector<Matrix> weights_;  // per layer: q, k, v, o, fc1, fc2 effective weights
    std::vector<Matrix> keys_, values_;
    std::size_t length_ = 0;
    Vector logits_;
  };

 private:
  friend class Decoder;
  template <typename Leaf>
  grad::Var build(grad::Graph& g, std::span<const TokenId> tokens, Leaf leaf) const;
  void check_tokens(std::span<const TokenId> tokens) const;
  Matrix effective_weight(const std::string& name) const;

  StudentConfig cfg_;
  grad::ParameterSet params_;
  std::optional<AdapterSet> adapters_;
  Matrix positions_;  // max_context x width
};

/// Zero-initialised up factors, Gaussian down factors. ConfigError for rank < 1,
/// ShapeError for an unknown target.
AdapterSet make_adapters(const StudentModel& model, int rank, double alpha,
                         std::vector<std::string> targets, std::uint64_t seed);
/// Copy of `model` with `adapters` attached. ShapeError if any factor shape does not
/// match its target matrix; ConfigError for rank < 1.
StudentModel apply_adapters(const StudentModel& model, AdapterSet adapters);

/// The student as a LanguageModel: BOS + prompt, then sampled tokens.
class StudentPolicy : public LanguageModel {
 public:
  StudentPolicy(const StudentModel& model, const tok::Tokenizer& tokenizer);
  const tok::Tokenizer& tokenizer() const override { return *tokenizer_; }
  std::unique_ptr<DecodeSession> start(std::span<const TokenId> prompt) const override;
  const StudentModel& model() const { return *model_; }

 private:
  const StudentModel* model_;
  const tok::Tokenizer* tokenizer_;
};

}  // namespace esr::lm
