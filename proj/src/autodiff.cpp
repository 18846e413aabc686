#include "mdpf/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mdpf/special.hpp"

namespace mdpf::ad {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev; }

void Node::accumulate(const Tensor& g) {
  if (!g.same_shape(value)) {
    throw std::invalid_argument("adjoint shape " + g.shape_str() + " does not match value shape " +
                                value.shape_str());
  }
  if (!has_grad) {
    grad = g;
    has_grad = true;
  } else {
    grad += g;
  }
}

void Node::zero_grad() {
  grad = Tensor(value.shape());
  has_grad = false;
}

Tensor Node::grad_or_zero() const { return has_grad ? grad : Tensor(value.shape()); }

Var constant(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  return n;
}

Var constant(double v) { return constant(Tensor::scalar(v)); }

Var variable(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = true;
  return n;
}

Var variable(double v) { return variable(Tensor::scalar(v)); }

Var make_node(Tensor value, std::vector<Edge> edges) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (g_grad_enabled) {
    for (auto& e : edges) {
      if (e.parent->requires_grad) n->edges.push_back(std::move(e));
    }
    n->requires_grad = !n->edges.empty();
  }
  return n;
}

namespace {

Var unary(const Var& x, Tensor value, std::function<Tensor(const Tensor&)> vjp) {
  return make_node(std::move(value), {{x, std::move(vjp)}});
}

// Elementwise binary op with broadcasting; dfa/dfb are the local partials as
// functions of (a_elem, b_elem).
Var ew_binary(const Var& a, const Var& b, const std::function<double(double, double)>& f,
              const std::function<double(double, double)>& dfa,
              const std::function<double(double, double)>& dfb) {
  Tensor value = bcast_binary(a->value, b->value, f);
  std::vector<Edge> edges;
  if (g_grad_enabled) {
    if (a->requires_grad) {
      edges.push_back({a, [a, b, dfa](const Tensor& g) {
                         Tensor t = bcast_binary(a->value, b->value, dfa);
                         Tensor gt = bcast_binary(g, t, [](double x, double y) { return x * y; });
                         return reduce_to_shape(gt, a->value.shape());
                       }});
    }
    if (b->requires_grad) {
      edges.push_back({b, [a, b, dfb](const Tensor& g) {
                         Tensor t = bcast_binary(a->value, b->value, dfb);
                         Tensor gt = bcast_binary(g, t, [](double x, double y) { return x * y; });
                         return reduce_to_shape(gt, b->value.shape());
                       }});
    }
  }
  return make_node(std::move(value), std::move(edges));
}

Tensor ew_mul(const Tensor& a, const Tensor& b) {
  return bcast_binary(a, b, [](double x, double y) { return x * y; });
}

void check_positive(const Tensor& t, const char* who) {
  const double* p = t.data();
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    if (!(p[i] > 0.0)) {
      throw std::domain_error(std::string(who) + " at non-positive argument " +
                              std::to_string(p[i]));
    }
  }
}

void check_nonzero(const Tensor& t, const char* who) {
  const double* p = t.data();
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    if (p[i] == 0.0) {
      throw std::domain_error(std::string(who) + " by zero");
    }
  }
}

}  // namespace

Var add(const Var& a, const Var& b) {
  return ew_binary(
      a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Var sub(const Var& a, const Var& b) {
  return ew_binary(
      a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Var mul(const Var& a, const Var& b) {
  return ew_binary(
      a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Var div(const Var& a, const Var& b) {
  check_nonzero(b->value, "div");
  return ew_binary(
      a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Var add(const Var& a, double b) { return add(a, constant(b)); }
Var sub(const Var& a, double b) { return sub(a, constant(b)); }
Var sub(double a, const Var& b) { return sub(constant(a), b); }
Var mul(const Var& a, double b) { return mul(a, constant(b)); }
Var div(const Var& a, double b) { return div(a, constant(b)); }
Var div(double a, const Var& b) { return div(constant(a), b); }

Var neg(const Var& x) {
  return unary(x, x->value.map([](double v) { return -v; }),
               [](const Tensor& g) { return g.map([](double v) { return -v; }); });
}

Var exp(const Var& x) {
  Tensor value = x->value.map([](double v) { return std::exp(v); });
  Tensor saved = value;
  return unary(x, std::move(value), [saved](const Tensor& g) { return ew_mul(g, saved); });
}

Var log(const Var& x) {
  check_positive(x->value, "log");
  return unary(x, x->value.map([](double v) { return std::log(v); }), [x](const Tensor& g) {
    return bcast_binary(g, x->value, [](double gv, double xv) { return gv / xv; });
  });
}

Var pow(const Var& x, double p) {
  return unary(x, x->value.map([p](double v) { return std::pow(v, p); }),
               [x, p](const Tensor& g) {
                 return bcast_binary(g, x->value, [p](double gv, double xv) {
                   return gv * p * std::pow(xv, p - 1.0);
                 });
               });
}

Var sqrt(const Var& x) {
  check_positive(x->value, "sqrt");
  Tensor value = x->value.map([](double v) { return std::sqrt(v); });
  Tensor saved = value;
  return unary(x, std::move(value), [saved](const Tensor& g) {
    return bcast_binary(g, saved, [](double gv, double sv) { return gv * 0.5 / sv; });
  });
}

Var sin(const Var& x) {
  return unary(x, x->value.map([](double v) { return std::sin(v); }), [x](const Tensor& g) {
    return bcast_binary(g, x->value, [](double gv, double xv) { return gv * std::cos(xv); });
  });
}

Var cos(const Var& x) {
  return unary(x, x->value.map([](double v) { return std::cos(v); }), [x](const Tensor& g) {
    return bcast_binary(g, x->value, [](double gv, double xv) { return -gv * std::sin(xv); });
  });
}

Var atan2(const Var& y, const Var& x) {
  return ew_binary(
      y, x, [](double yv, double xv) { return std::atan2(yv, xv); },
      [](double yv, double xv) { return xv / (xv * xv + yv * yv); },
      [](double yv, double xv) { return -yv / (xv * xv + yv * yv); });
}

Var tanh(const Var& x) {
  Tensor value = x->value.map([](double v) { return std::tanh(v); });
  Tensor saved = value;
  return unary(x, std::move(value), [saved](const Tensor& g) {
    return bcast_binary(g, saved, [](double gv, double tv) { return gv * (1.0 - tv * tv); });
  });
}

Var relu(const Var& x) {
  return unary(x, x->value.map([](double v) { return v > 0.0 ? v : 0.0; }),
               [x](const Tensor& g) {
                 return bcast_binary(
                     g, x->value, [](double gv, double xv) { return xv > 0.0 ? gv : 0.0; });
               });
}

Var sigmoid(const Var& x) {
  Tensor value = x->value.map([](double v) {
    return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  });
  Tensor saved = value;
  return unary(x, std::move(value), [saved](const Tensor& g) {
    return bcast_binary(g, saved, [](double gv, double sv) { return gv * sv * (1.0 - sv); });
  });
}

Var softplus(const Var& x) {
  Tensor value = x->value.map([](double v) {
    if (v > 30.0) return v;
    if (v < -30.0) return std::exp(v);
    return std::log1p(std::exp(v));
  });
  return unary(x, std::move(value), [x](const Tensor& g) {
    return bcast_binary(g, x->value, [](double gv, double xv) {
      const double s = xv >= 0.0 ? 1.0 / (1.0 + std::exp(-xv)) : std::exp(xv) / (1.0 + std::exp(xv));
      return gv * s;
    });
  });
}

Var erf(const Var& x) {
  constexpr double kTwoOverSqrtPi = 1.1283791670955125739;
  return unary(x, x->value.map([](double v) { return std::erf(v); }),
               [x](const Tensor& g) {
                 return bcast_binary(g, x->value, [](double gv, double xv) {
                   return gv * kTwoOverSqrtPi * std::exp(-xv * xv);
                 });
               });
}

Var bessel_i0(const Var& x) {
  return unary(x, x->value.map([](double v) { return special::bessel_i0(v); }),
               [x](const Tensor& g) {
                 return bcast_binary(g, x->value, [](double gv, double xv) {
                   return gv * special::bessel_i1(xv);
                 });
               });
}

Var matmul(const Var& a, const Var& b) {
  Tensor value = matmul_vals(a->value, b->value);
  std::vector<Edge> edges;
  if (g_grad_enabled) {
    if (a->requires_grad) {
      edges.push_back({a, [b](const Tensor& g) { return matmul_t_right(g, b->value); }});
    }
    if (b->requires_grad) {
      edges.push_back({b, [a](const Tensor& g) { return matmul_t_left(a->value, g); }});
    }
  }
  return make_node(std::move(value), std::move(edges));
}

namespace {
Tensor transpose_vals(const Tensor& t) {
  if (t.rank() != 2) {
    throw std::invalid_argument("transpose needs rank-2 input, got " + t.shape_str());
  }
  Tensor out({t.dim(1), t.dim(0)});
  for (int i = 0; i < t.dim(0); ++i)
    for (int j = 0; j < t.dim(1); ++j) out.at(j, i) = t.at(i, j);
  return out;
}
}  // namespace

Var transpose(const Var& x) {
  return unary(x, transpose_vals(x->value),
               [](const Tensor& g) { return transpose_vals(g); });
}

Var sum(const Var& x) {
  double s = 0.0;
  const double* p = x->value.data();
  for (std::int64_t i = 0; i < x->value.numel(); ++i) s += p[i];
  const std::vector<int> shape = x->value.shape();
  return unary(x, Tensor::scalar(s),
               [shape](const Tensor& g) { return Tensor::full(shape, g.item()); });
}

namespace {
void check_rank2_axis(const Var& x, int axis, const char* who) {
  if (x->value.rank() != 2 || (axis != 0 && axis != 1)) {
    throw std::invalid_argument(std::string(who) + " with axis needs a rank-2 input, got " +
                                x->value.shape_str() + " axis " + std::to_string(axis));
  }
}
}  // namespace

Var sum(const Var& x, int axis) {
  check_rank2_axis(x, axis, "sum");
  const int r = x->value.dim(0), c = x->value.dim(1);
  Tensor value({axis == 0 ? c : r});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) value[axis == 0 ? j : i] += x->value.at(i, j);
  return unary(x, std::move(value), [r, c, axis](const Tensor& g) {
    Tensor out({r, c});
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) out.at(i, j) = g[axis == 0 ? j : i];
    return out;
  });
}

Var mean(const Var& x) { return div(sum(x), static_cast<double>(x->value.numel())); }

Var mean(const Var& x, int axis) {
  check_rank2_axis(x, axis, "mean");
  return div(sum(x, axis), static_cast<double>(x->value.dim(axis)));
}

namespace {
// Rowwise softmax over a contiguous block of n doubles.
void softmax_row(const double* in, double* out, int n) {
  double m = in[0];
  for (int i = 1; i < n; ++i) m = std::max(m, in[i]);
  double z = 0.0;
  for (int i = 0; i < n; ++i) {
    out[i] = std::exp(in[i] - m);
    z += out[i];
  }
  for (int i = 0; i < n; ++i) out[i] /= z;
}
}  // namespace

Var softmax(const Var& x) {
  const Tensor& v = x->value;
  if (v.rank() != 1 && v.rank() != 2) {
    throw std::invalid_argument("softmax needs rank-1 or rank-2 input, got " + v.shape_str());
  }
  const int rows = v.rank() == 2 ? v.dim(0) : 1;
  const int n = v.rank() == 2 ? v.dim(1) : static_cast<int>(v.numel());
  Tensor value(v.shape());
  for (int i = 0; i < rows; ++i) softmax_row(v.data() + i * n, value.data() + i * n, n);
  Tensor saved = value;
  return unary(x, std::move(value), [saved, rows, n](const Tensor& g) {
    Tensor out(saved.shape());
    for (int i = 0; i < rows; ++i) {
      const double* gr = g.data() + i * n;
      const double* yr = saved.data() + i * n;
      double dotv = 0.0;
      for (int j = 0; j < n; ++j) dotv += gr[j] * yr[j];
      double* po = out.data() + i * n;
      for (int j = 0; j < n; ++j) po[j] = yr[j] * (gr[j] - dotv);
    }
    return out;
  });
}

namespace {
double lse_block(const double* p, std::int64_t n) {
  double m = p[0];
  for (std::int64_t i = 1; i < n; ++i) m = std::max(m, p[i]);
  if (!std::isfinite(m)) return m;  // all -inf → -inf
  double z = 0.0;
  for (std::int64_t i = 0; i < n; ++i) z += std::exp(p[i] - m);
  return m + std::log(z);
}
}  // namespace

Var logsumexp(const Var& x) {
  const double lse = lse_block(x->value.data(), x->value.numel());
  return unary(x, Tensor::scalar(lse), [x, lse](const Tensor& g) {
    const double gv = g.item();
    return x->value.map([lse, gv](double v) { return gv * std::exp(v - lse); });
  });
}

Var logsumexp(const Var& x, int axis) {
  check_rank2_axis(x, axis, "logsumexp");
  if (axis != 1) throw std::invalid_argument("logsumexp supports axis=1 only");
  const int r = x->value.dim(0), c = x->value.dim(1);
  Tensor value({r});
  for (int i = 0; i < r; ++i) value[i] = lse_block(x->value.data() + i * c, c);
  Tensor saved = value;
  return unary(x, std::move(value), [x, saved, r, c](const Tensor& g) {
    Tensor out({r, c});
    for (int i = 0; i < r; ++i) {
      const double gi = g[i], li = saved[i];
      for (int j = 0; j < c; ++j) out.at(i, j) = gi * std::exp(x->value.at(i, j) - li);
    }
    return out;
  });
}

Var gather(const Var& x, const std::vector<int>& idx) {
  if (x->value.rank() != 1) {
    throw std::invalid_argument("gather needs rank-1 input, got " + x->value.shape_str());
  }
  const int n = static_cast<int>(x->value.numel());
  Tensor value({static_cast<int>(idx.size())});
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= n) throw std::out_of_range("gather index out of range");
    value[static_cast<std::int64_t>(i)] = x->value[idx[i]];
  }
  return unary(x, std::move(value), [idx, n](const Tensor& g) {
    Tensor out({n});
    for (size_t i = 0; i < idx.size(); ++i) out[idx[i]] += g[static_cast<std::int64_t>(i)];
    return out;
  });
}

Var gather_rows(const Var& x, const std::vector<int>& idx) {
  if (x->value.rank() != 2) {
    throw std::invalid_argument("gather_rows needs rank-2 input, got " + x->value.shape_str());
  }
  const int n = x->value.dim(0), d = x->value.dim(1);
  Tensor value({static_cast<int>(idx.size()), d});
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= n) throw std::out_of_range("gather_rows index out of range");
    for (int j = 0; j < d; ++j) value.at(static_cast<int>(i), j) = x->value.at(idx[i], j);
  }
  return unary(x, std::move(value), [idx, n, d](const Tensor& g) {
    Tensor out({n, d});
    for (size_t i = 0; i < idx.size(); ++i)
      for (int j = 0; j < d; ++j) out.at(idx[i], j) += g.at(static_cast<int>(i), j);
    return out;
  });
}

Var concat(const std::vector<Var>& xs, int axis) {
  if (xs.empty()) throw std::invalid_argument("concat of zero tensors");
  const int rank = xs[0]->value.rank();
  for (const auto& x : xs) {
    if (x->value.rank() != rank) throw std::invalid_argument("concat rank mismatch");
  }
  if (rank == 1) {
    int total = 0;
    for (const auto& x : xs) total += static_cast<int>(x->value.numel());
    Tensor value({total});
    std::vector<Edge> edges;
    int off = 0;
    for (const auto& x : xs) {
      const int len = static_cast<int>(x->value.numel());
      for (int i = 0; i < len; ++i) value[off + i] = x->value[i];
      if (g_grad_enabled && x->requires_grad) {
        const int o = off;
        edges.push_back({x, [o, len](const Tensor& g) {
                           Tensor out({len});
                           for (int i = 0; i < len; ++i) out[i] = g[o + i];
                           return out;
                         }});
      }
      off += len;
    }
    return make_node(std::move(value), std::move(edges));
  }
  if (rank != 2 || (axis != 0 && axis != 1)) {
    throw std::invalid_argument("concat supports rank-1, or rank-2 with axis 0/1");
  }
  if (axis == 0) {
    const int c = xs[0]->value.dim(1);
    int rows = 0;
    for (const auto& x : xs) {
      if (x->value.dim(1) != c) throw std::invalid_argument("concat column mismatch");
      rows += x->value.dim(0);
    }
    Tensor value({rows, c});
    std::vector<Edge> edges;
    int off = 0;
    for (const auto& x : xs) {
      const int r = x->value.dim(0);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) value.at(off + i, j) = x->value.at(i, j);
      if (g_grad_enabled && x->requires_grad) {
        const int o = off;
        edges.push_back({x, [o, r, c](const Tensor& g) {
                           Tensor out({r, c});
                           for (int i = 0; i < r; ++i)
                             for (int j = 0; j < c; ++j) out.at(i, j) = g.at(o + i, j);
                           return out;
                         }});
      }
      off += r;
    }
    return make_node(std::move(value), std::move(edges));
  }
  const int r = xs[0]->value.dim(0);
  int cols = 0;
  for (const auto& x : xs) {
    if (x->value.dim(0) != r) throw std::invalid_argument("concat row mismatch");
    cols += x->value.dim(1);
  }
  Tensor value({r, cols});
  std::vector<Edge> edges;
  int off = 0;
  for (const auto& x : xs) {
    const int c = x->value.dim(1);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) value.at(i, off + j) = x->value.at(i, j);
    if (g_grad_enabled && x->requires_grad) {
      const int o = off;
      edges.push_back({x, [o, r, c](const Tensor& g) {
                         Tensor out({r, c});
                         for (int i = 0; i < r; ++i)
                           for (int j = 0; j < c; ++j) out.at(i, j) = g.at(i, o + j);
                         return out;
                       }});
    }
    off += c;
  }
  return make_node(std::move(value), std::move(edges));
}

Var clamp(const Var& x, double lo, double hi) {
  return unary(x, x->value.map([lo, hi](double v) { return std::min(std::max(v, lo), hi); }),
               [x, lo, hi](const Tensor& g) {
                 return bcast_binary(g, x->value, [lo, hi](double gv, double xv) {
                   return (xv >= lo && xv <= hi) ? gv : 0.0;
                 });
               });
}

Var clamp_min(const Var& x, double lo) {
  return unary(x, x->value.map([lo](double v) { return std::max(v, lo); }),
               [x, lo](const Tensor& g) {
                 return bcast_binary(
                     g, x->value, [lo](double gv, double xv) { return xv >= lo ? gv : 0.0; });
               });
}

Var clamp_max(const Var& x, double hi) {
  return unary(x, x->value.map([hi](double v) { return std::min(v, hi); }),
               [x, hi](const Tensor& g) {
                 return bcast_binary(
                     g, x->value, [hi](double gv, double xv) { return xv <= hi ? gv : 0.0; });
               });
}

Var where(const Tensor& mask, const Var& a, const Var& b) {
  if (!mask.same_shape(a->value) || !mask.same_shape(b->value)) {
    throw std::invalid_argument("where expects equal shapes, got mask " + mask.shape_str() +
                                ", a " + a->value.shape_str() + ", b " + b->value.shape_str());
  }
  Tensor value(mask.shape());
  for (std::int64_t i = 0; i < mask.numel(); ++i) value[i] = mask[i] != 0.0 ? a->value[i] : b->value[i];
  std::vector<Edge> edges;
  if (g_grad_enabled) {
    if (a->requires_grad) {
      edges.push_back({a, [mask](const Tensor& g) {
                         Tensor out(g.shape());
                         for (std::int64_t i = 0; i < g.numel(); ++i)
                           out[i] = mask[i] != 0.0 ? g[i] : 0.0;
                         return out;
                       }});
    }
    if (b->requires_grad) {
      edges.push_back({b, [mask](const Tensor& g) {
                         Tensor out(g.shape());
                         for (std::int64_t i = 0; i < g.numel(); ++i)
                           out[i] = mask[i] != 0.0 ? 0.0 : g[i];
                         return out;
                       }});
    }
  }
  return make_node(std::move(value), std::move(edges));
}

Var stop_gradient(const Var& x) { return constant(x->value); }

Var reshape(const Var& x, std::vector<int> shape) {
  if (shape_numel(shape) != x->value.numel()) {
    throw std::invalid_argument("reshape from " + x->value.shape_str() + " to " +
                                shape_to_string(shape) + " changes element count");
  }
  std::vector<double> data(x->value.data(), x->value.data() + x->value.numel());
  const std::vector<int> old = x->value.shape();
  return unary(x, Tensor(shape, std::move(data)), [old](const Tensor& g) {
    std::vector<double> d(g.data(), g.data() + g.numel());
    return Tensor(old, std::move(d));
  });
}

Var select_col(const Var& x, int j) {
  if (x->value.rank() != 2) {
    throw std::invalid_argument("select_col needs rank-2 input, got " + x->value.shape_str());
  }
  const int r = x->value.dim(0), c = x->value.dim(1);
  if (j < 0 || j >= c) throw std::out_of_range("select_col index out of range");
  Tensor value({r});
  for (int i = 0; i < r; ++i) value[i] = x->value.at(i, j);
  return unary(x, std::move(value), [r, c, j](const Tensor& g) {
    Tensor out({r, c});
    for (int i = 0; i < r; ++i) out.at(i, j) = g[i];
    return out;
  });
}

Var stack_cols(const std::vector<Var>& cols) {
  if (cols.empty()) throw std::invalid_argument("stack_cols of zero vectors");
  const int n = static_cast<int>(cols[0]->value.numel());
  const int k = static_cast<int>(cols.size());
  Tensor value({n, k});
  std::vector<Edge> edges;
  for (int j = 0; j < k; ++j) {
    const auto& c = cols[static_cast<size_t>(j)];
    if (c->value.rank() != 1 || c->value.numel() != n) {
      throw std::invalid_argument("stack_cols length mismatch");
    }
    for (int i = 0; i < n; ++i) value.at(i, j) = c->value[i];
    if (g_grad_enabled && c->requires_grad) {
      edges.push_back({c, [n, k, j](const Tensor& g) {
                         Tensor out({n});
                         for (int i = 0; i < n; ++i) out[i] = g[static_cast<std::int64_t>(i) * k + j];
                         return out;
                       }});
    }
  }
  return make_node(std::move(value), std::move(edges));
}

Var wrap_angle(const Var& x) {
  return unary(x, x->value.map([](double v) { return special::wrap_angle(v); }),
               [](const Tensor& g) { return g; });
}

Var dot(const Var& a, const Var& b) { return sum(mul(a, b)); }

namespace {

// Iterative post-order DFS; returns nodes in topological order (parents after
// children of the reversed graph), so reverse iteration is the backward order.
std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_map<Node*, bool> state;  // false = discovered, true = finished
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root, 0);
  state[root] = false;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->edges.size()) {
      Node* parent = node->edges[next].parent.get();
      ++next;
      if (parent->requires_grad && !state.count(parent)) {
        state[parent] = false;
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

void backward(const Var& root) {
  if (root->value.numel() != 1) {
    throw std::invalid_argument("backward root must be scalar, got " + root->value.shape_str());
  }
  if (!root->requires_grad) return;
  // Each sweep runs over fresh adjoints so repeated backward calls see a clean
  // seed; the sweep's results are then added into the stored grads, which is
  // where accumulation across calls lives.
  std::vector<Node*> order = topo_order(root.get());
  std::unordered_map<Node*, Tensor> adj;
  adj.emplace(root.get(), Tensor::full(root->value.shape(), 1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    auto found = adj.find(n);
    if (found == adj.end()) continue;
    for (const Edge& e : n->edges) {
      Tensor t = e.vjp(found->second);
      auto [slot, fresh] = adj.try_emplace(e.parent.get(), t);
      if (!fresh) slot->second += t;
    }
  }
  for (auto& [node, g] : adj) node->accumulate(g);
}

std::vector<Tensor> partials(const Var& root, const std::vector<Var>& wrt) {
  if (root->value.numel() != 1) {
    throw std::invalid_argument("partials root must be scalar, got " + root->value.shape_str());
  }
  std::unordered_map<Node*, Tensor> adj;
  if (root->requires_grad) {
    std::vector<Node*> order = topo_order(root.get());
    adj[root.get()] = Tensor::full(root->value.shape(), 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      auto found = adj.find(n);
      if (found == adj.end()) continue;
      for (const Edge& e : n->edges) {
        Tensor t = e.vjp(found->second);
        auto [slot, fresh] = adj.try_emplace(e.parent.get(), t);
        if (!fresh) slot->second += t;
      }
    }
  }
  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto found = adj.find(w.get());
    out.push_back(found != adj.end() ? found->second : Tensor(w->value.shape()));
  }
  return out;
}

}  // namespace mdpf::ad

namespace mdpf {

Parameter::Parameter(std::string name, Tensor init, Constraint c)
    : name_(std::move(name)), constraint_(c), node_(ad::variable(std::move(init))) {}

Parameter Parameter::positive(std::string name, double constrained_init) {
  if (!(constrained_init > 0.0)) {
    throw std::invalid_argument("positive parameter '" + name + "' needs init > 0");
  }
  // softplus^{-1}(y) = log(expm1(y)); for large y this is y to double precision.
  const double raw =
      constrained_init > 30.0 ? constrained_init : std::log(std::expm1(constrained_init));
  return Parameter(std::move(name), Tensor::scalar(raw), Constraint::kPositive);
}

Parameter Parameter::logistic_pair(std::string name, double w1_init) {
  if (!(w1_init > 0.0 && w1_init < 1.0)) {
    throw std::invalid_argument("logistic pair '" + name + "' needs w1 init in (0,1)");
  }
  // w1 = sigmoid(-v)  ⇒  v = log((1 - w1)/w1)
  const double v = std::log((1.0 - w1_init) / w1_init);
  return Parameter(std::move(name), Tensor::scalar(v), Constraint::kLogisticPair);
}

double Parameter::constrained_scalar() const {
  const double r = node_->value.item();
  switch (constraint_) {
    case Constraint::kNone:
      return r;
    case Constraint::kPositive:
      return r > 30.0 ? r : std::log1p(std::exp(r));
    case Constraint::kLogisticPair:
      throw std::logic_error("constrained_scalar on logistic pair '" + name_ + "'");
  }
  return r;
}

std::pair<double, double> Parameter::pair_values() const {
  if (constraint_ != Constraint::kLogisticPair) {
    throw std::logic_error("pair_values on non-pair parameter '" + name_ + "'");
  }
  const double v = node_->value.item();
  const double w2 = 1.0 / (1.0 + std::exp(-v));
  return {1.0 - w2, w2};
}

ad::Var Ctx::leaf(const Parameter& p) {
  if (!isolated_) return p.node();
  auto found = leaves_.find(p.node());
  if (found != leaves_.end()) return found->second;
  ad::Var clone = ad::variable(p.raw());
  leaves_.emplace(p.node(), clone);
  return clone;
}

ad::Var Ctx::value(const Parameter& p) {
  auto found = constrained_.find(p.node());
  if (found != constrained_.end()) return found->second;
  ad::Var v;
  switch (p.constraint()) {
    case Constraint::kNone:
      v = leaf(p);
      break;
    case Constraint::kPositive:
      v = ad::softplus(leaf(p));
      break;
    case Constraint::kLogisticPair:
      throw std::logic_error("value() on logistic pair '" + p.name() + "'; use pair_value");
  }
  constrained_.emplace(p.node(), v);
  return v;
}

std::pair<ad::Var, ad::Var> Ctx::pair_value(const Parameter& p) {
  if (p.constraint() != Constraint::kLogisticPair) {
    throw std::logic_error("pair_value on non-pair parameter '" + p.name() + "'");
  }
  ad::Var v = leaf(p);
  return {ad::sigmoid(ad::neg(v)), ad::sigmoid(v)};
}

Tensor Ctx::grad(const Parameter& p) const {
  if (!isolated_) return p.node()->grad_or_zero();
  auto found = leaves_.find(p.node());
  if (found == leaves_.end()) return Tensor(p.raw().shape());
  return found->second->grad_or_zero();
}

}  // namespace mdpf
