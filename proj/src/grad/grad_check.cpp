#include "esr/grad/grad_check.hpp"

#include "esr/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

namespace esr::grad {

namespace {

double relative_error(double analytic, double numeric) {
  if (!std::isfinite(analytic) || !std::isfinite(numeric)) {
    return std::numeric_limits<double>::infinity();
  }
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

double evaluate(const ScalarFn& fn, const Matrix& x) {
  Graph g;
  Var in = g.input(x, false);
  return fn(g, in).value()(0, 0);
}

}  // namespace

double grad_check(const ScalarFn& fn, const Matrix& point, double eps, std::span<const Index> coords) {
  if (!(eps > 0)) throw ConfigError("grad_check: eps must be positive");
  Graph g;
  Var x = g.input(point, true);
  Var y = fn(g, x);
  g.backward(y);
  const Matrix analytic = g.grad(x.id);

  std::vector<Index> all;
  if (coords.empty()) {
    all.resize(static_cast<std::size_t>(point.size()));
    std::iota(all.begin(), all.end(), Index{0});
    coords = all;
  }
  double worst = 0.0;
  Matrix probe = point;
  for (Index i : coords) {
    const double orig = probe.data()[i];
    probe.data()[i] = orig + eps;
    const double up = evaluate(fn, probe);
    probe.data()[i] = orig - eps;
    const double down = evaluate(fn, probe);
    probe.data()[i] = orig;
    worst = std::max(worst, relative_error(analytic.data()[i], (up - down) / (2 * eps)));
  }
  return worst;
}

double grad_check_parameters(const std::function<Var(Graph&)>& loss, ParameterSet& params,
                             double eps, std::span<const ParamCoord> coords) {
  if (!(eps > 0)) throw ConfigError("grad_check: eps must be positive");
  for (auto& [_, p] : params) p.zero_grad();
  {
    Graph g;
    g.backward(loss(g));
  }
  double worst = 0.0;
  for (const ParamCoord& c : coords) {
    auto it = params.find(c.name);
    if (it == params.end()) throw ShapeError("grad_check: unknown parameter " + c.name);
    Parameter& p = it->second;
    const double analytic = p.grad.data()[c.index];
    const double orig = p.value.data()[c.index];
    p.value.data()[c.index] = orig + eps;
    double up = 0, down = 0;
    {
      Graph g;
      up = loss(g).value()(0, 0);
    }
    p.value.data()[c.index] = orig - eps;
    {
      Graph g;
      down = loss(g).value()(0, 0);
    }
    p.value.data()[c.index] = orig;
    worst = std::max(worst, relative_error(analytic, (up - down) / (2 * eps)));
  }
  return worst;
}

}  // namespace esr::grad
