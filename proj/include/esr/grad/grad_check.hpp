#pragma once

#include "esr/grad/graph.hpp"

#include <functional>
#include <span>

namespace esr::grad {

/// A scalar function built on a fresh graph from one input node.
using ScalarFn = std::function<Var(Graph&, Var)>;

/// Max over the checked coordinates of |analytic - central difference| / max(1, |analytic|).
/// An empty `coords` checks every coordinate. Non-finite differences report +infinity.
double grad_check(const ScalarFn& fn, const Matrix& point, double eps,
                  std::span<const Index> coords = {});

/// Same check over model parameters. `loss` rebuilds the scalar loss on a fresh graph
/// from the current parameter values; each entry of `coords` is (parameter name, flat index).
struct ParamCoord {
  std::string name;
  Index index;
};
double grad_check_parameters(const std::function<Var(Graph&)>& loss, ParameterSet& params,
                             double eps, std::span<const ParamCoord> coords);

}  // namespace esr::grad
