#pragma once

#include "esr/grad/tensor.hpp"

#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace esr::distill {

enum class OptimizerKind { Sgd, Adam };
const char* to_string(OptimizerKind k);
OptimizerKind parse_optimizer(std::string_view name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Sgd;
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global gradient-norm clip; 0 disables.
  double clip = 0;
};

class Optimizer {
 public:
  using Named = std::vector<std::pair<std::string, grad::Parameter*>>;

  explicit Optimizer(OptimizerConfig cfg);
  /// One update from the accumulated gradients; returns the pre-clip gradient norm.
  double step(const Named& params);

  const OptimizerConfig& config() const { return cfg_; }
  std::uint64_t updates() const { return t_; }

  /// Moment buffers as "m.<name>" / "v.<name>" plus "t".
  std::map<std::string, grad::Matrix> state() const;
  void load_state(const std::map<std::string, grad::Matrix>& state);

 private:
  OptimizerConfig cfg_;
  std::uint64_t t_ = 0;
  std::map<std::string, grad::Matrix> m_, v_;
};

}  // namespace esr::distill
