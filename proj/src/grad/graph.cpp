#include "esr/grad/graph.hpp"

#include "esr/errors.hpp"

#include <cmath>
#include <string>

namespace esr::grad {

const Matrix& Var::value() const { return graph->value(id); }
const Matrix& Var::grad() const { return graph->grad(id); }

Var Graph::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::input(Matrix value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::parameter(Parameter& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = p.trainable;
  n.param = &p;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

const Matrix& Graph::grad(int id) const {
  const Node& n = nodes_[id];
  if (!n.has_grad) {
    // Never reached by backward: the gradient is identically zero.
    n.grad.setZero(n.value.rows(), n.value.cols());
    n.has_grad = true;
  }
  return n.grad;
}

Matrix& Graph::grad_mut(int id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad.setZero(n.value.rows(), n.value.cols());
    n.has_grad = true;
  }
  return n.grad;
}

Var Graph::push(Matrix value, std::vector<int> parents, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  for (int p : parents) n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
  n.parents = std::move(parents);
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

void Graph::backward(Var loss) {
  if (loss.graph != this) throw ShapeError("backward: loss belongs to another graph");
  const Matrix& v = nodes_[loss.id].value;
  if (v.rows() != 1 || v.cols() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + std::to_string(v.rows()) + "x" +
                     std::to_string(v.cols()));
  }
  for (Node& n : nodes_) n.has_grad = false;
  grad_mut(loss.id).setOnes();
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.has_grad || !n.requires_grad) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param != nullptr && n.param->trainable) {
      if (n.param->grad.rows() != n.value.rows() || n.param->grad.cols() != n.value.cols()) {
        n.param->zero_grad();
      }
      n.param->grad += n.grad;
    }
  }
}

namespace {

void require_same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

bool wants(Graph& g, int id) { return g.requires_grad(id); }

}  // namespace

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  Matrix out(a.rows(), b.cols());
  out.noalias() = a.value() * b.value();
  return a.graph->push(std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id](Graph& g, int self) {
    const Matrix& dc = g.grad(self);
    if (wants(g, ia)) g.grad_mut(ia).noalias() += dc * g.value(ib).transpose();
    if (wants(g, ib)) g.grad_mut(ib).noalias() += g.value(ia).transpose() * dc;
  });
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  return a.graph->push(a.value() + b.value(), {a.id, b.id},
                       [ia = a.id, ib = b.id](Graph& g, int self) {
                         if (wants(g, ia)) g.grad_mut(ia) += g.grad(self);
                         if (wants(g, ib)) g.grad_mut(ib) += g.grad(self);
                       });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  return a.graph->push(a.value() - b.value(), {a.id, b.id},
                       [ia = a.id, ib = b.id](Graph& g, int self) {
                         if (wants(g, ia)) g.grad_mut(ia) += g.grad(self);
                         if (wants(g, ib)) g.grad_mut(ib) -= g.grad(self);
                       });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  return a.graph->push(a.value().cwiseProduct(b.value()), {a.id, b.id},
                       [ia = a.id, ib = b.id](Graph& g, int self) {
                         const Matrix& dc = g.grad(self);
                         if (wants(g, ia)) g.grad_mut(ia) += dc.cwiseProduct(g.value(ib));
                         if (wants(g, ib)) g.grad_mut(ib) += dc.cwiseProduct(g.value(ia));
                       });
}

Var scale(Var a, double s) {
  return a.graph->push(a.value() * s, {a.id}, [ia = a.id, s](Graph& g, int self) {
    g.grad_mut(ia) += s * g.grad(self);
  });
}

Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: bias must be 1 x cols");
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return a.graph->push(std::move(out), {a.id, row.id}, [ia = a.id, ir = row.id](Graph& g, int self) {
    const Matrix& dc = g.grad(self);
    if (wants(g, ia)) g.grad_mut(ia) += dc;
    if (wants(g, ir)) g.grad_mut(ir) += dc.colwise().sum();
  });
}

Var transpose(Var a) {
  Matrix out = a.value().transpose();
  return a.graph->push(std::move(out), {a.id}, [ia = a.id](Graph& g, int self) {
    g.grad_mut(ia) += g.grad(self).transpose();
  });
}

Var exp(Var a) {
  Matrix out = a.value().array().exp().matrix();
  return a.graph->push(std::move(out), {a.id}, [ia = a.id](Graph& g, int self) {
    g.grad_mut(ia) += g.grad(self).cwiseProduct(g.value(self));
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(Var a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  return a.graph->push(std::move(out), {a.id}, [ia = a.id](Graph& g, int self) {
    const Matrix& x = g.value(ia);
    const Matrix& dc = g.grad(self);
    Matrix& dx = g.grad_mut(ia);
    for (Index i = 0; i < x.size(); ++i) {
      const double v = x.data()[i];
      const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      dx.data()[i] += dc.data()[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
    }
  });
}

Var log_softmax(Var logits) {
  const Matrix& x = logits.value();
  if (x.cols() < 1) throw ShapeError("log_softmax: empty last axis");
  if (!x.allFinite()) throw NumericError("log_softmax: non-finite input");
  Matrix out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    const double lse = m + std::log((x.row(r).array() - m).exp().sum());
    out.row(r) = x.row(r).array() - lse;
  }
  return logits.graph->push(std::move(out), {logits.id}, [ia = logits.id](Graph& g, int self) {
    const Matrix& y = g.value(self);
    const Matrix& dy = g.grad(self);
    Matrix& dx = g.grad_mut(ia);
    for (Index r = 0; r < y.rows(); ++r) {
      const double s = dy.row(r).sum();
      dx.row(r).array() += dy.row(r).array() - y.row(r).array().exp() * s;
    }
  });
}

Var softmax(Var logits) {
  const Matrix& x = logits.value();
  if (x.cols() < 1) throw ShapeError("softmax: empty last axis");
  if (!x.allFinite()) throw NumericError("softmax: non-finite input");
  Matrix out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return logits.graph->push(std::move(out), {logits.id}, [ia = logits.id](Graph& g, int self) {
    const Matrix& y = g.value(self);
    const Matrix& dy = g.grad(self);
    Matrix& dx = g.grad_mut(ia);
    for (Index r = 0; r < y.rows(); ++r) {
      const double s = dy.row(r).dot(y.row(r));
      dx.row(r).array() += y.row(r).array() * (dy.row(r).array() - s);
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Index c = x.cols();
  if (gain.rows() != 1 || gain.cols() != c || bias.rows() != 1 || bias.cols() != c) {
    throw ShapeError("layer_norm: gain/bias must be 1 x cols");
  }
  const Matrix& in = x.value();
  Matrix xhat(in.rows(), c);
  Vector inv_std(in.rows());
  for (Index r = 0; r < in.rows(); ++r) {
    const double mu = in.row(r).mean();
    const double var = (in.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (in.row(r).array() - mu) * inv_std(r);
  }
  Matrix out = xhat.array().rowwise() * gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  return x.graph->push(
      std::move(out), {x.id, gain.id, bias.id},
      [ix = x.id, ig = gain.id, ib = bias.id, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Graph& g, int self) {
        const Matrix& dy = g.grad(self);
        if (wants(g, ig)) g.grad_mut(ig) += dy.cwiseProduct(xhat).colwise().sum();
        if (wants(g, ib)) g.grad_mut(ib) += dy.colwise().sum();
        if (!wants(g, ix)) return;
        const auto gvec = g.value(ig).row(0).array();
        Matrix& dx = g.grad_mut(ix);
        for (Index r = 0; r < dy.rows(); ++r) {
          const Eigen::ArrayXd dxhat = (dy.row(r).array() * gvec).transpose();
          const Eigen::ArrayXd xh = xhat.row(r).array().transpose();
          const double m1 = dxhat.mean();
          const double m2 = (dxhat * xh).mean();
          dx.row(r).array() += ((dxhat - m1 - xh * m2) * inv_std(r)).transpose();
        }
      });
}

Var gather_rows(Var table, std::span<const int> ids) {
  const Matrix& t = table.value();
  Matrix out(static_cast<Index>(ids.size()), t.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= t.rows()) throw ShapeError("gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = t.row(ids[i]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return table.graph->push(std::move(out), {table.id}, [it = table.id, idx = std::move(idx)](Graph& g, int self) {
    const Matrix& dy = g.grad(self);
    Matrix& dt = g.grad_mut(it);
    for (std::size_t i = 0; i < idx.size(); ++i) dt.row(idx[i]) += dy.row(static_cast<Index>(i));
  });
}

Var pick(Var a, std::span<const int> index) {
  const Matrix& v = a.value();
  if (static_cast<Index>(index.size()) != v.rows()) throw ShapeError("pick: one index per row required");
  Matrix out(v.rows(), 1);
  for (Index r = 0; r < v.rows(); ++r) {
    const int c = index[static_cast<std::size_t>(r)];
    if (c < 0 || c >= v.cols()) throw ShapeError("pick: index out of range");
    out(r, 0) = v(r, c);
  }
  std::vector<int> idx(index.begin(), index.end());
  return a.graph->push(std::move(out), {a.id}, [ia = a.id, idx = std::move(idx)](Graph& g, int self) {
    const Matrix& dy = g.grad(self);
    Matrix& da = g.grad_mut(ia);
    for (std::size_t r = 0; r < idx.size(); ++r) da(static_cast<Index>(r), idx[r]) += dy(static_cast<Index>(r), 0);
  });
}

Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.graph->push(std::move(out), {a.id}, [ia = a.id](Graph& g, int self) {
    g.grad_mut(ia).array() += g.grad(self)(0, 0);
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw ShapeError("mean: empty tensor");
  Matrix out(1, 1);
  out(0, 0) = a.value().sum() / n;
  return a.graph->push(std::move(out), {a.id}, [ia = a.id, n](Graph& g, int self) {
    g.grad_mut(ia).array() += g.grad(self)(0, 0) / n;
  });
}

Var slice_cols(Var a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols: out of range");
  Matrix out = a.value().middleCols(start, count);
  return a.graph->push(std::move(out), {a.id}, [ia = a.id, start, count](Graph& g, int self) {
    g.grad_mut(ia).middleCols(start, count) += g.grad(self);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Index rows = parts[0].rows();
  Index cols = 0;
  std::vector<int> ids;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
    ids.push_back(p.id);
  }
  Matrix out(rows, cols);
  Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return parts[0].graph->push(std::move(out), ids, [ids](Graph& g, int self) {
    const Matrix& dy = g.grad(self);
    Index at = 0;
    for (int id : ids) {
      const Index c = g.value(id).cols();
      if (g.requires_grad(id)) g.grad_mut(id) += dy.middleCols(at, c);
      at += c;
    }
  });
}

}  // namespace esr::grad
