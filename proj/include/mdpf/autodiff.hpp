#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mdpf/tensor.hpp"

namespace mdpf::ad {

struct Node;
using Var = std::shared_ptr<Node>;

// Parent link: vjp maps the node's adjoint to this parent's adjoint contribution.
struct Edge {
  Var parent;
  std::function<Tensor(const Tensor&)> vjp;
};

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation; same shape as value
  bool has_grad = false;
  bool requires_grad = false;
  std::vector<Edge> edges;

  void accumulate(const Tensor& g);
  void zero_grad();
  // Current adjoint (zeros if backward has not reached this node).
  Tensor grad_or_zero() const;
};

// Graph construction is disabled inside a NoGradGuard scope: ops still compute
// values but register no edges, so inference costs no graph memory.
bool grad_enabled();
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  bool prev;
};

Var constant(Tensor v);
Var constant(double v);
Var variable(Tensor v);  // leaf with requires_grad = true
Var variable(double v);

// Assemble a node from a precomputed value and explicit parent edges; used for
// custom ops (e.g. quadrature-backed CDFs) whose vjps are supplied by hand.
Var make_node(Tensor value, std::vector<Edge> edges);

// ---- primitives ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var add(const Var& a, double b);
Var sub(const Var& a, double b);
Var sub(double a, const Var& b);
Var mul(const Var& a, double b);
Var div(const Var& a, double b);
Var div(double a, const Var& b);
Var neg(const Var& x);
Var exp(const Var& x);
Var log(const Var& x);
Var pow(const Var& x, double p);
Var sqrt(const Var& x);
Var sin(const Var& x);
Var cos(const Var& x);
Var atan2(const Var& y, const Var& x);
Var tanh(const Var& x);
Var relu(const Var& x);
Var sigmoid(const Var& x);
Var softplus(const Var& x);
Var erf(const Var& x);
Var bessel_i0(const Var& x);

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& x);  // rank-2

Var sum(const Var& x);
Var sum(const Var& x, int axis);  // rank-2 only
Var mean(const Var& x);
Var mean(const Var& x, int axis);  // rank-2 only
Var softmax(const Var& x);         // rank-1, or rank-2 rowwise
Var logsumexp(const Var& x);
Var logsumexp(const Var& x, int axis);  // rank-2, axis=1 → rank-1

Var gather(const Var& x, const std::vector<int>& idx);       // rank-1
Var gather_rows(const Var& x, const std::vector<int>& idx);  // rank-2
Var concat(const std::vector<Var>& xs, int axis = 0);        // rank-1, or rank-2 axis 0/1

Var clamp(const Var& x, double lo, double hi);
Var clamp_min(const Var& x, double lo);
Var clamp_max(const Var& x, double hi);
Var where(const Tensor& mask, const Var& a, const Var& b);

Var stop_gradient(const Var& x);

// ---- shape helpers ----
Var reshape(const Var& x, std::vector<int> shape);
Var select_col(const Var& x, int j);          // rank-2 → rank-1 column
Var stack_cols(const std::vector<Var>& cols); // k rank-1 vectors of length n → n×k

// Wrap angles to [-pi, pi); derivative 1 everywhere (shift by multiples of 2*pi).
Var wrap_angle(const Var& x);

Var dot(const Var& a, const Var& b);

// Reverse-mode sweep from a scalar root; accumulates into node.grad of every
// reachable requires_grad node.  Throws if root is not scalar.
void backward(const Var& root);

// Adjoints of `root` w.r.t. `wrt` without touching any node's stored grad.
std::vector<Tensor> partials(const Var& root, const std::vector<Var>& wrt);

}  // namespace mdpf::ad

namespace mdpf {

enum class Constraint { kNone, kPositive, kLogisticPair };

// Named trainable leaf.  The raw (unconstrained) value lives in a persistent
// graph node; constrained views are built per graph via Ctx.
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Tensor init, Constraint c = Constraint::kNone);

  // raw initialized so that softplus(raw) == constrained_init.
  static Parameter positive(std::string name, double constrained_init);
  // raw v with w1 = sigmoid(-v); w1_init must lie in (0, 1).
  static Parameter logistic_pair(std::string name, double w1_init);

  const std::string& name() const { return name_; }
  Constraint constraint() const { return constraint_; }
  ad::Var node() const { return node_; }
  Tensor& raw() { return node_->value; }
  const Tensor& raw() const { return node_->value; }

  // Value-level constrained scalar (kNone or kPositive, scalar raw).
  double constrained_scalar() const;
  // Value-level (w1, w2) for kLogisticPair.
  std::pair<double, double> pair_values() const;

  void zero_grad() { node_->zero_grad(); }

 private:
  std::string name_;
  Constraint constraint_ = Constraint::kNone;
  ad::Var node_;
};

// One forward pass's view of the parameters.  Isolated contexts clone each
// leaf so independent graphs never share mutable nodes (safe across threads
// and across batch elements whose grads are reduced in a fixed order);
// non-isolated contexts hand out the persistent leaves so backward writes
// straight into Parameter adjoints.
class Ctx {
 public:
  explicit Ctx(bool isolated = true) : isolated_(isolated) {}

  ad::Var leaf(const Parameter& p);
  // Constrained node: kNone → leaf, kPositive → softplus(leaf).
  ad::Var value(const Parameter& p);
  // (w1, w2) nodes for a kLogisticPair parameter.
  std::pair<ad::Var, ad::Var> pair_value(const Parameter& p);

  // Adjoint of the context's leaf for p (zeros if p was never used here).
  Tensor grad(const Parameter& p) const;

 private:
  bool isolated_;
  // Keys hold the parameter's node alive: a short-lived parameter must not
  // free its node while this context lives, or a later allocation could
  // recycle the address into a stale cache hit.
  std::unordered_map<ad::Var, ad::Var> leaves_;
  std::unordered_map<ad::Var, ad::Var> constrained_;
};

}  // namespace mdpf
