#pragma once

#include "esr/grad/tensor.hpp"

#include <functional>
#include <span>
#include <vector>

namespace esr::grad {

class Graph;

/// Handle to a node in a Graph. Cheap to copy; valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  const Matrix& value() const;
  const Matrix& grad() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the tape is
/// already topologically sorted and backward is a single reverse sweep.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Matrix value);
  Var input(Matrix value, bool requires_grad = true);
  Var input(const Tensor& t) { return input(t.data(), t.requires_grad()); }
  /// Leaf bound to a Parameter; backward() adds the leaf gradient into p.grad
  /// when the parameter is trainable.
  Var parameter(Parameter& p);

  const Matrix& value(int id) const { return nodes_[id].value; }
  const Matrix& grad(int id) const;
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Throws ShapeError unless loss is 1x1.
  void backward(Var loss);

  // Used by op implementations.
  Var push(Matrix value, std::vector<int> parents, BackwardFn fn);
  Matrix& grad_mut(int id);
  const std::vector<int>& parents(int id) const { return nodes_[id].parents; }

 private:
  struct Node {
    Matrix value;
    mutable Matrix grad;
    bool requires_grad = false;
    mutable bool has_grad = false;
    Parameter* param = nullptr;
    std::vector<int> parents;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// The closed op set. Everything else (attention, KL, MLP) is composed of these.

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var scale(Var a, double s);
/// a (r x c) plus a 1 x c row repeated over every row.
Var add_row(Var a, Var row);
Var transpose(Var a);
Var exp(Var a);
/// tanh-approximated GELU.
Var gelu(Var a);
/// Row-wise log-softmax; throws NumericError on non-finite input.
Var log_softmax(Var logits);
/// Row-wise softmax.
Var softmax(Var logits);
/// Row-wise layer normalisation with a 1 x c gain and bias.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
/// Row i of the result is row ids[i] of the table.
Var gather_rows(Var table, std::span<const int> ids);
/// r x 1 result with entry i = a(i, index[i]).
Var pick(Var a, std::span<const int> index);
Var sum(Var a);
Var mean(Var a);
Var slice_cols(Var a, Index start, Index count);
Var concat_cols(std::span<const Var> parts);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }

}  // namespace esr::grad
