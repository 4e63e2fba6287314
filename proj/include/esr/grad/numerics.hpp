#pragma once

#include "esr/errors.hpp"
#include "esr/grad/tensor.hpp"

#include <cmath>

namespace esr::grad {

/// Log-softmax of a single score vector (max-subtracted).
template <typename Derived>
VectorT<typename Derived::Scalar> log_softmax(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  if (logits.size() < 1) throw ShapeError("log_softmax: empty input");
  if (!logits.allFinite()) throw NumericError("log_softmax: non-finite input");
  const Scalar m = logits.maxCoeff();
  const Scalar lse = m + std::log((logits.array() - m).exp().sum());
  return (logits.array() - lse).matrix();
}

template <typename Derived>
VectorT<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits) {
  return log_softmax(logits).array().exp().matrix();
}

/// Shannon entropy in nats of a distribution given as log-probabilities.
template <typename Derived>
typename Derived::Scalar entropy_from_logprobs(const Eigen::MatrixBase<Derived>& logprobs) {
  using Scalar = typename Derived::Scalar;
  Scalar h = 0;
  for (Index i = 0; i < logprobs.size(); ++i) {
    const Scalar lp = logprobs(i);
    if (std::isfinite(lp)) h -= std::exp(lp) * lp;
  }
  return h;
}

/// Shannon entropy in nats of a probability vector; zero entries contribute 0.
template <typename Derived>
typename Derived::Scalar entropy(const Eigen::MatrixBase<Derived>& probs) {
  using Scalar = typename Derived::Scalar;
  Scalar h = 0;
  for (Index i = 0; i < probs.size(); ++i) {
    const Scalar p = probs(i);
    if (p > 0) h -= p * std::log(p);
  }
  return h;
}

/// log(max(p, floor)) elementwise. log(0) is never evaluated.
template <typename Derived>
VectorT<typename Derived::Scalar> floored_log(const Eigen::MatrixBase<Derived>& probs,
                                              typename Derived::Scalar floor) {
  return probs.array().max(floor).log().matrix();
}

}  // namespace esr::grad
