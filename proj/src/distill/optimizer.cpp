#include "esr/distill/optimizer.hpp"

#include "esr/errors.hpp"

#include <cmath>

namespace esr::distill {

const char* to_string(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "sgd") return OptimizerKind::Sgd;
  if (name == "adam") return OptimizerKind::Adam;
  throw ConfigError("optimizer must be 'sgd' or 'adam'");
}

Optimizer::Optimizer(OptimizerConfig cfg) : cfg_(cfg) {
  if (!(cfg_.lr >= 0)) throw ConfigError("learning rate must be >= 0");
  if (cfg_.clip < 0) throw ConfigError("gradient clip must be >= 0");
}

double Optimizer::step(const Named& params) {
  double sq = 0;
  for (const auto& [_, p] : params) sq += p->grad.squaredNorm();
  const double norm = std::sqrt(sq);
  const double factor = cfg_.clip > 0 && norm > cfg_.clip ? cfg_.clip / norm : 1.0;
  ++t_;
  for (const auto& [name, p] : params) {
    if (cfg_.kind == OptimizerKind::Sgd) {
      p->value -= (cfg_.lr * factor) * p->grad;
      continue;
    }
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.size() == 0) {
      m = grad::Matrix::Zero(p->value.rows(), p->value.cols());
      v = m;
    }
    const grad::Matrix g = factor * p->grad;
    m = cfg_.beta1 * m + (1 - cfg_.beta1) * g;
    v = cfg_.beta2 * v + (1 - cfg_.beta2) * g.cwiseProduct(g);
    const double c1 = 1 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1 - std::pow(cfg_.beta2, static_cast<double>(t_));
    p->value.array() -= cfg_.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg_.eps);
  }
  return norm;
}

std::map<std::string, grad::Matrix> Optimizer::state() const {
  std::map<std::string, grad::Matrix> out;
  out["t"] = grad::Matrix::Constant(1, 1, static_cast<double>(t_));
  for (const auto& [k, m] : m_) out["m." + k] = m;
  for (const auto& [k, v] : v_) out["v." + k] = v;
  return out;
}

void Optimizer::load_state(const std::map<std::string, grad::Matrix>& state) {
  m_.clear();
  v_.clear();
  t_ = 0;
  for (const auto& [k, m] : state) {
    if (k == "t") {
      t_ = static_cast<std::uint64_t>(m(0, 0));
    } else if (k.starts_with("m.")) {
      m_[k.substr(2)] = m;
    } else if (k.starts_with("v.")) {
      v_[k.substr(2)] = m;
    } else {
      throw ConfigError("optimizer state: unexpected entry '" + k + "'");
    }
  }
}

}  // namespace esr::distill
