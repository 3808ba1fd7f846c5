#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "kermit/matrix.h"

namespace kermit {

// A trainable array and its accumulated gradient.
struct ParamTensor {
  std::string name;
  Matrix value;
  Matrix gradient;

  ParamTensor() = default;
  ParamTensor(std::string n, Matrix v)
      : name(std::move(n)), value(std::move(v)), gradient(value.rows(), value.cols()) {}

  void zero_grad() { gradient = Matrix(value.rows(), value.cols()); }
};

// Ordered by name, which is also the checkpoint order.
using ParamSet = std::map<std::string, ParamTensor>;

void zero_grads(ParamSet& params);
NamedArrays param_values(const ParamSet& params);

class Tape;

// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Records primitive operations in creation order. Since every node's inputs
// are created before it, creation order is a topological order and backward
// simply walks the node list in reverse.
class Tape {
 public:
  // Called during backward with the node's gradient and value; adds into
  // the gradients of the node's inputs.
  using BackwardFn = std::function<void(Tape&, const Matrix& grad_out, const Matrix& out)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t node_count() const { return nodes_.size(); }

  // Owned value, no gradient.
  Var constant(Matrix m);
  // Owned value that collects a gradient (for checks on inputs).
  Var input(Matrix m);
  // Borrowed value with no gradient. `m` must outlive the tape.
  Var view(const Matrix& m);
  // Borrowed parameter value; its gradient is exported by accumulate_param_grads.
  Var param(const ParamTensor& p);

  const Matrix& value(Var v) const;
  bool requires_grad(Var v) const;
  // Gradient of the last backward pass; zero matrix if the node was not reached.
  Matrix grad(Var v) const;

  Var record(Matrix value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Matrix value, std::span<const Var> inputs, BackwardFn fn);

  // Adds `g` into the gradient slot of `v` (no-op for nodes without grad).
  void accumulate(Var v, const Matrix& g);
  Matrix& grad_slot(Var v);

  // Seeds d(loss)/d(loss) = 1 for a 1x1 loss and propagates.
  void backward(Var loss);

  // Adds parameter-leaf gradients into params[name].gradient.
  void accumulate_param_grads(ParamSet& params) const;

 private:
  struct Node {
    Matrix owned;
    const Matrix* borrowed = nullptr;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    const std::string* param_name = nullptr;
    BackwardFn backward;
    const Matrix& value() const { return borrowed ? *borrowed : owned; }
  };

  Var push(Node node);

  bool grad_enabled_;
  std::deque<Node> nodes_;  // references to node values survive later pushes
};

// Differentiable primitives. All inputs must live on the same tape.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var scale(Var a, double s);
Var relu(Var a);
Var log(Var a);
Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
Var transpose(Var a);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var concat_rows(std::span<const Var> parts);
// Rows of `table` selected by ids.
Var embedding(Var table, std::span<const int> ids);
// Per-row normalization; gain_bias is 2 x cols (row 0 gain, row 1 bias).
Var layer_norm(Var x, Var gain_bias, double eps = 1e-5);
Var sum_squares(Var a);
// Mean over rows of -logprobs(row, target[row]); 1x1.
Var cross_entropy(Var logprobs, std::span<const int> targets);
// Mean over rows of -sum_j target(row, j) * logprobs(row, j); 1x1.
Var soft_cross_entropy(Var logprobs, const Matrix& target);

double scalar(Var v);

// Central finite differences against tape gradients. Returns the maximum over
// checked coordinates of |g_fd - g_an| / max(1e-8, |g_fd| + |g_an|).
// `max_coords_per_param` > 0 checks a seeded random subset of each array.
struct GradCheckOptions {
  double epsilon = 1e-5;
  std::size_t max_coords_per_param = 0;
  unsigned seed = 0;
};
using LossFn = std::function<Var(Tape&, const ParamSet&)>;
double grad_check(const LossFn& loss_fn, ParamSet& params, const GradCheckOptions& opts = {});

}  // namespace kermit
