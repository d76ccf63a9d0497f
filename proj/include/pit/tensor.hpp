#pragma once

// Dense float64 tensors with reverse-mode automatic differentiation.
//
// Every op that touches a tensor requiring gradients records a backward
// rule on the node it produces. backward() walks the recorded graph in
// reverse topological order and accumulates gradients into the leaves.
// The graph is rebuilt on every forward pass; there is no reuse.

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace pit {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

[[noreturn]] inline void tensor_fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::int64_t id = 0;
  std::vector<NodePtr> inputs;
  std::function<void(Node&)> backward_fn;

  std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

inline std::int64_t next_node_id() {
  static std::atomic<std::int64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

// Gradient recording can be suspended (finite-difference probes, inference).
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

inline NodePtr make_node(Shape shape, std::vector<double> value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->requires_grad = requires_grad && grad_mode();
  n->id = next_node_id();
  return n;
}

inline std::vector<std::int64_t> row_major_strides(const Shape& shape) {
  std::vector<std::int64_t> strides(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
    strides[i] = strides[i + 1] * shape[i + 1];
  return strides;
}

}  // namespace detail

class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(detail::NodePtr n) : n_(std::move(n)) {}

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (numel_of(shape) != static_cast<std::int64_t>(data.size()))
      tensor_fail("tensor: shape " + shape_str(shape) + " does not match data length " +
                  std::to_string(data.size()));
    for (auto d : shape)
      if (d <= 0) tensor_fail("tensor: non-positive extent in shape " + shape_str(shape));
    return Tensor(detail::make_node(std::move(shape), std::move(data), requires_grad));
  }

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return from_data(shape, std::vector<double>(static_cast<std::size_t>(numel_of(shape)), 0.0),
                     requires_grad);
  }

  static Tensor full(const Shape& shape, double v, bool requires_grad = false) {
    return from_data(shape, std::vector<double>(static_cast<std::size_t>(numel_of(shape)), v),
                     requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  std::int64_t dim(std::size_t i) const { return node().shape.at(i); }
  std::size_t ndim() const { return node().shape.size(); }
  std::int64_t numel() const { return node().numel(); }
  bool requires_grad() const { return node().requires_grad; }
  std::int64_t node_id() const { return node().id; }

  const std::vector<double>& values() const { return node().value; }
  std::vector<double>& values() { return node().value; }
  const double* data() const { return node().value.data(); }
  double* data() { return node().value.data(); }

  double item() const {
    if (numel() != 1) tensor_fail("item(): tensor has " + std::to_string(numel()) + " elements");
    return node().value[0];
  }

  bool has_grad() const { return !node().grad.empty(); }
  const std::vector<double>& grad() const {
    if (node().grad.empty())
      tensor_fail("grad(): no gradient recorded for node " + std::to_string(node_id()));
    return node().grad;
  }
  void zero_grad() {
    if (node().requires_grad) node().grad.assign(node().value.size(), 0.0);
  }

  detail::Node& node() const {
    if (!n_) tensor_fail("use of empty tensor");
    return *n_;
  }
  const detail::NodePtr& ptr() const { return n_; }

 private:
  detail::NodePtr n_;
};

// ---------------------------------------------------------------------------
// Broadcasting machinery

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* opname) {
  const std::size_t nd = std::max(a.size(), b.size());
  Shape out(nd, 1);
  for (std::size_t i = 0; i < nd; ++i) {
    const std::int64_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    const std::int64_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (da != db && da != 1 && db != 1)
      tensor_fail(std::string(opname) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                  " are not broadcastable");
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` against a broadcast output shape; 0 where the input extent is 1.
inline std::vector<std::int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  const auto in_strides = row_major_strides(in);
  std::vector<std::int64_t> s(out.size(), 0);
  const std::size_t off = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i)
    s[off + i] = in[i] == 1 ? 0 : in_strides[i];
  return s;
}

// Walks every coordinate of `shape`, calling f(out_flat, a_off, b_off).
template <class F>
void for_each_broadcast(const Shape& shape, const std::vector<std::int64_t>& sa,
                        const std::vector<std::int64_t>& sb, F&& f) {
  const std::int64_t total = numel_of(shape);
  const std::size_t nd = shape.size();
  std::vector<std::int64_t> coord(nd, 0);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t flat = 0; flat < total; ++flat) {
    f(flat, oa, ob);
    for (std::size_t k = nd; k-- > 0;) {
      if (++coord[k] < shape[k]) {
        oa += sa[k];
        ob += sb[k];
        break;
      }
      coord[k] = 0;
      oa -= sa[k] * (shape[k] - 1);
      ob -= sb[k] * (shape[k] - 1);
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tape and backward

// Reverse-topological trace of the nodes reachable from a root. Creation ids
// are monotone, so inputs always precede their consumers in `nodes`.
struct Tape {
  std::vector<detail::NodePtr> nodes;

  static Tape trace(const Tensor& root) {
    Tape tape;
    std::unordered_set<const detail::Node*> seen;
    // Iterative post-order DFS over input edges.
    std::vector<std::pair<detail::NodePtr, std::size_t>> stack;
    if (root.defined() && root.node().requires_grad) stack.emplace_back(root.ptr(), 0);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next == 0 && seen.count(node.get())) {
        stack.pop_back();
        continue;
      }
      if (next < node->inputs.size()) {
        auto child = node->inputs[next++];
        if (child->requires_grad && !seen.count(child.get())) stack.emplace_back(child, 0);
      } else {
        if (seen.insert(node.get()).second) tape.nodes.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }
};

inline void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    tensor_fail("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  Tape tape = Tape::trace(loss);
  loss.node().ensure_grad();
  loss.node().grad[0] += 1.0;
  for (auto it = tape.nodes.rbegin(); it != tape.nodes.rend(); ++it) {
    detail::Node& n = **it;
    if (n.backward_fn && !n.grad.empty()) n.backward_fn(n);
  }
}

// ---------------------------------------------------------------------------
// Op helpers

namespace detail {

inline NodePtr result_node(Shape shape, std::vector<double> value,
                           std::initializer_list<Tensor> ins) {
  bool req = false;
  if (grad_mode())
    for (const auto& t : ins) req = req || t.requires_grad();
  auto n = make_node(std::move(shape), std::move(value), req);
  if (n->requires_grad)
    for (const auto& t : ins) n->inputs.push_back(t.ptr());
  return n;
}

// Accumulates `src` (laid out as `src_shape`) into grad of `dst` whose shape
// may have been broadcast up to src_shape.
inline void reduce_into_grad(Node& dst, const std::vector<double>& src, const Shape& src_shape) {
  dst.ensure_grad();
  if (dst.shape == src_shape) {
    for (std::size_t i = 0; i < src.size(); ++i) dst.grad[i] += src[i];
    return;
  }
  const auto sd = broadcast_strides(dst.shape, src_shape);
  const std::vector<std::int64_t> zero(src_shape.size(), 0);
  for_each_broadcast(src_shape, sd, zero,
                     [&](std::int64_t flat, std::int64_t doff, std::int64_t) {
                       dst.grad[doff] += src[flat];
                     });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (NumPy-style broadcasting)

namespace detail {

template <class Fwd, class Bwd>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd make_backward) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  const std::int64_t total = numel_of(out_shape);
  std::vector<double> out(static_cast<std::size_t>(total));
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  const double* pa = a.data();
  const double* pb = b.data();
  if (a.shape() == b.shape()) {
    for (std::int64_t i = 0; i < total; ++i) out[i] = fwd(pa[i], pb[i]);
  } else {
    for_each_broadcast(out_shape, sa, sb, [&](std::int64_t flat, std::int64_t oa, std::int64_t ob) {
      out[flat] = fwd(pa[oa], pb[ob]);
    });
  }
  auto n = result_node(out_shape, std::move(out), {a, b});
  if (n->requires_grad) n->backward_fn = make_backward(out_shape, sa, sb);
  return Tensor(n);
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](const Shape& out_shape, const std::vector<std::int64_t>& sa,
         const std::vector<std::int64_t>& sb) {
        return [out_shape, sa, sb](detail::Node& n) {
          auto& ga = *n.inputs[0];
          auto& gb = *n.inputs[1];
          if (ga.requires_grad) {
            ga.ensure_grad();
            detail::for_each_broadcast(out_shape, sa, sb,
                                       [&](std::int64_t f, std::int64_t oa, std::int64_t) {
                                         ga.grad[oa] += n.grad[f];
                                       });
          }
          if (gb.requires_grad) {
            gb.ensure_grad();
            detail::for_each_broadcast(out_shape, sa, sb,
                                       [&](std::int64_t f, std::int64_t, std::int64_t ob) {
                                         gb.grad[ob] += n.grad[f];
                                       });
          }
        };
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](const Shape& out_shape, const std::vector<std::int64_t>& sa,
         const std::vector<std::int64_t>& sb) {
        return [out_shape, sa, sb](detail::Node& n) {
          auto& ga = *n.inputs[0];
          auto& gb = *n.inputs[1];
          if (ga.requires_grad) {
            ga.ensure_grad();
            detail::for_each_broadcast(out_shape, sa, sb,
                                       [&](std::int64_t f, std::int64_t oa, std::int64_t) {
                                         ga.grad[oa] += n.grad[f];
                                       });
          }
          if (gb.requires_grad) {
            gb.ensure_grad();
            detail::for_each_broadcast(out_shape, sa, sb,
                                       [&](std::int64_t f, std::int64_t, std::int64_t ob) {
                                         gb.grad[ob] -= n.grad[f];
                                       });
          }
        };
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [&a, &b](const Shape& out_shape, const std::vector<std::int64_t>& sa,
               const std::vector<std::int64_t>& sb) {
        return [out_shape, sa, sb](detail::Node& n) {
          auto& na = *n.inputs[0];
          auto& nb = *n.inputs[1];
          if (na.requires_grad) na.ensure_grad();
          if (nb.requires_grad) nb.ensure_grad();
          detail::for_each_broadcast(
              out_shape, sa, sb, [&](std::int64_t f, std::int64_t oa, std::int64_t ob) {
                if (na.requires_grad) na.grad[oa] += n.grad[f] * nb.value[ob];
                if (nb.requires_grad) nb.grad[ob] += n.grad[f] * na.value[oa];
              });
        };
      });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "div", [](double x, double y) { return x / y; },
      [](const Shape& out_shape, const std::vector<std::int64_t>& sa,
         const std::vector<std::int64_t>& sb) {
        return [out_shape, sa, sb](detail::Node& n) {
          auto& na = *n.inputs[0];
          auto& nb = *n.inputs[1];
          if (na.requires_grad) na.ensure_grad();
          if (nb.requires_grad) nb.ensure_grad();
          detail::for_each_broadcast(
              out_shape, sa, sb, [&](std::int64_t f, std::int64_t oa, std::int64_t ob) {
                const double inv = 1.0 / nb.value[ob];
                if (na.requires_grad) na.grad[oa] += n.grad[f] * inv;
                if (nb.requires_grad) nb.grad[ob] -= n.grad[f] * na.value[oa] * inv * inv;
              });
        };
      });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops

namespace detail {

template <class Fwd, class Dfn>
Tensor unary_op(const Tensor& a, Fwd fwd, Dfn dfn) {
  std::vector<double> out(a.values().size());
  const double* p = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(p[i]);
  auto n = result_node(a.shape(), std::move(out), {a});
  if (n->requires_grad)
    n->backward_fn = [dfn](Node& nd) {
      auto& in = *nd.inputs[0];
      if (!in.requires_grad) return;
      in.ensure_grad();
      for (std::size_t i = 0; i < nd.grad.size(); ++i)
        in.grad[i] += nd.grad[i] * dfn(in.value[i], nd.value[i]);
    };
  return Tensor(n);
}

}  // namespace detail

inline Tensor neg(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Tensor square(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return x * x; },
                          [](double x, double) { return 2.0 * x; });
}

inline Tensor sqrt_t(const Tensor& a) {
  // d/dx sqrt -> 0 at x == 0 so degenerate distances stay finite.
  return detail::unary_op(a, [](double x) { return std::sqrt(x); },
                          [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

inline Tensor exp_t(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::exp(x); },
                          [](double, double y) { return y; });
}

// Exact Gaussian-CDF form: x * Phi(x).
inline Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return detail::unary_op(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        return cdf + x * pdf;
      });
}

inline Tensor softplus(const Tensor& a) {
  return detail::unary_op(
      a,
      [](double x) {
        if (x > 36.0) return x;
        if (x < -36.0) return std::exp(x);
        return std::log1p(std::exp(x));
      },
      [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

inline Tensor scale(const Tensor& a, double s) {
  return detail::unary_op(a, [s](double x) { return s * x; },
                          [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::unary_op(a, [s](double x) { return x + s; },
                          [](double, double) { return 1.0; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

// ---------------------------------------------------------------------------
// matmul: [..., i, k] x [..., k, j] -> [..., i, j], batch dims broadcast.

namespace detail {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

struct MatmulGeom {
  std::int64_t m, k, n;
  Shape batch;                       // broadcast batch shape
  std::vector<std::int64_t> sa, sb;  // batch strides (in matrices) for a and b
  std::int64_t batch_count;
};

inline MatmulGeom matmul_geometry(const Tensor& a, const Tensor& b) {
  if (a.ndim() < 2 || b.ndim() < 2)
    tensor_fail("matmul: operands must have at least 2 dims, got " + shape_str(a.shape()) +
                " and " + shape_str(b.shape()));
  MatmulGeom g;
  g.m = a.shape()[a.ndim() - 2];
  g.k = a.shape()[a.ndim() - 1];
  const std::int64_t kb = b.shape()[b.ndim() - 2];
  g.n = b.shape()[b.ndim() - 1];
  if (g.k != kb)
    tensor_fail("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
  const Shape ba(a.shape().begin(), a.shape().end() - 2);
  const Shape bb(b.shape().begin(), b.shape().end() - 2);
  g.batch = broadcast_shape(ba, bb, "matmul");
  g.sa = broadcast_strides(ba, g.batch);
  g.sb = broadcast_strides(bb, g.batch);
  g.batch_count = numel_of(g.batch);
  return g;
}

// Enumerate (a_matrix_index, b_matrix_index) per output batch element.
inline void batch_offsets(const MatmulGeom& g, std::vector<std::int64_t>& oa,
                          std::vector<std::int64_t>& ob) {
  oa.resize(g.batch_count);
  ob.resize(g.batch_count);
  for_each_broadcast(g.batch, g.sa, g.sb,
                     [&](std::int64_t flat, std::int64_t a_off, std::int64_t b_off) {
                       oa[flat] = a_off;
                       ob[flat] = b_off;
                     });
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto g = detail::matmul_geometry(a, b);
  Shape out_shape = g.batch;
  out_shape.push_back(g.m);
  out_shape.push_back(g.n);
  std::vector<double> out(static_cast<std::size_t>(numel_of(out_shape)));

  std::vector<std::int64_t> oa, ob;
  detail::batch_offsets(g, oa, ob);
  const std::int64_t a_mat = g.m * g.k, b_mat = g.k * g.n, o_mat = g.m * g.n;
  for (std::int64_t t = 0; t < g.batch_count; ++t) {
    detail::ECMap ma(a.data() + oa[t] * a_mat, g.m, g.k);
    detail::ECMap mb(b.data() + ob[t] * b_mat, g.k, g.n);
    detail::EMap(out.data() + t * o_mat, g.m, g.n).noalias() = ma * mb;
  }

  auto n = detail::result_node(std::move(out_shape), std::move(out), {a, b});
  if (n->requires_grad) {
    n->backward_fn = [g, oa, ob, a_mat, b_mat, o_mat](detail::Node& nd) {
      auto& na = *nd.inputs[0];
      auto& nb = *nd.inputs[1];
      if (na.requires_grad) na.ensure_grad();
      if (nb.requires_grad) nb.ensure_grad();
      for (std::int64_t t = 0; t < g.batch_count; ++t) {
        detail::ECMap go(nd.grad.data() + t * o_mat, g.m, g.n);
        if (na.requires_grad) {
          detail::ECMap mb(nb.value.data() + ob[t] * b_mat, g.k, g.n);
          detail::EMap(na.grad.data() + oa[t] * a_mat, g.m, g.k).noalias() += go * mb.transpose();
        }
        if (nb.requires_grad) {
          detail::ECMap ma(na.value.data() + oa[t] * a_mat, g.m, g.k);
          detail::EMap(nb.grad.data() + ob[t] * b_mat, g.k, g.n).noalias() += ma.transpose() * go;
        }
      }
    };
  }
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// Axis reductions and softmax

namespace detail {

struct AxisGeom {
  std::int64_t outer, extent, inner;
};

inline AxisGeom axis_geometry(const Shape& shape, std::size_t axis, const char* name) {
  if (axis >= shape.size())
    tensor_fail(std::string(name) + ": axis " + std::to_string(axis) + " out of bounds for " +
                shape_str(shape));
  AxisGeom g{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) g.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) g.inner *= shape[i];
  return g;
}

}  // namespace detail

// Numerically stabilized by max subtraction; output sums to 1 along `axis`.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto g = detail::axis_geometry(x.shape(), axis, "softmax");
  std::vector<double> out(x.values().size());
  const double* p = x.data();
  for (std::int64_t o = 0; o < g.outer; ++o) {
    for (std::int64_t in = 0; in < g.inner; ++in) {
      const std::int64_t base = o * g.extent * g.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t e = 0; e < g.extent; ++e) mx = std::max(mx, p[base + e * g.inner]);
      double sum = 0.0;
      for (std::int64_t e = 0; e < g.extent; ++e) {
        const double v = std::exp(p[base + e * g.inner] - mx);
        out[base + e * g.inner] = v;
        sum += v;
      }
      const double inv = 1.0 / sum;
      for (std::int64_t e = 0; e < g.extent; ++e) out[base + e * g.inner] *= inv;
    }
  }
  auto n = detail::result_node(x.shape(), std::move(out), {x});
  if (n->requires_grad) {
    n->backward_fn = [g](detail::Node& nd) {
      auto& in = *nd.inputs[0];
      if (!in.requires_grad) return;
      in.ensure_grad();
      for (std::int64_t o = 0; o < g.outer; ++o) {
        for (std::int64_t inr = 0; inr < g.inner; ++inr) {
          const std::int64_t base = o * g.extent * g.inner + inr;
          double dot = 0.0;
          for (std::int64_t e = 0; e < g.extent; ++e) {
            const std::int64_t i = base + e * g.inner;
            dot += nd.grad[i] * nd.value[i];
          }
          for (std::int64_t e = 0; e < g.extent; ++e) {
            const std::int64_t i = base + e * g.inner;
            in.grad[i] += nd.value[i] * (nd.grad[i] - dot);
          }
        }
      }
    };
  }
  return Tensor(n);
}

inline Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const auto g = detail::axis_geometry(x.shape(), axis, "log_softmax");
  std::vector<double> out(x.values().size());
  const double* p = x.data();
  for (std::int64_t o = 0; o < g.outer; ++o) {
    for (std::int64_t in = 0; in < g.inner; ++in) {
      const std::int64_t base = o * g.extent * g.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t e = 0; e < g.extent; ++e) mx = std::max(mx, p[base + e * g.inner]);
      double sum = 0.0;
      for (std::int64_t e = 0; e < g.extent; ++e) sum += std::exp(p[base + e * g.inner] - mx);
      const double lse = mx + std::log(sum);
      for (std::int64_t e = 0; e < g.extent; ++e)
        out[base + e * g.inner] = p[base + e * g.inner] - lse;
    }
  }
  auto n = detail::result_node(x.shape(), std::move(out), {x});
  if (n->requires_grad) {
    n->backward_fn = [g](detail::Node& nd) {
      auto& in = *nd.inputs[0];
      if (!in.requires_grad) return;
      in.ensure_grad();
      for (std::int64_t o = 0; o < g.outer; ++o) {
        for (std::int64_t inr = 0; inr < g.inner; ++inr) {
          const std::int64_t base = o * g.extent * g.inner + inr;
          double gsum = 0.0;
          for (std::int64_t e = 0; e < g.extent; ++e) gsum += nd.grad[base + e * g.inner];
          for (std::int64_t e = 0; e < g.extent; ++e) {
            const std::int64_t i = base + e * g.inner;
            in.grad[i] += nd.grad[i] - std::exp(nd.value[i]) * gsum;
          }
        }
      }
    };
  }
  return Tensor(n);
}

namespace detail {

inline Tensor reduce_axis(const Tensor& x, std::size_t axis, bool keepdim, bool mean,
                          const char* name) {
  const auto g = axis_geometry(x.shape(), axis, name);
  Shape out_shape = x.shape();
  if (keepdim)
    out_shape[axis] = 1;
  else
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out_shape.empty()) out_shape = {1};
  const double norm = mean ? 1.0 / static_cast<double>(g.extent) : 1.0;
  std::vector<double> out(static_cast<std::size_t>(g.outer * g.inner), 0.0);
  const double* p = x.data();
  for (std::int64_t o = 0; o < g.outer; ++o)
    for (std::int64_t e = 0; e < g.extent; ++e)
      for (std::int64_t in = 0; in < g.inner; ++in)
        out[o * g.inner + in] += p[(o * g.extent + e) * g.inner + in];
  if (mean)
    for (auto& v : out) v *= norm;
  auto n = result_node(std::move(out_shape), std::move(out), {x});
  if (n->requires_grad) {
    n->backward_fn = [g, norm](Node& nd) {
      auto& in = *nd.inputs[0];
      if (!in.requires_grad) return;
      in.ensure_grad();
      for (std::int64_t o = 0; o < g.outer; ++o)
        for (std::int64_t e = 0; e < g.extent; ++e)
          for (std::int64_t inr = 0; inr < g.inner; ++inr)
            in.grad[(o * g.extent + e) * g.inner + inr] += nd.grad[o * g.inner + inr] * norm;
    };
  }
  return Tensor(n);
}

}  // namespace detail

inline Tensor sum(const Tensor& x, std::size_t axis, bool keepdim = false) {
  return detail::reduce_axis(x, axis, keepdim, false, "sum");
}

inline Tensor mean(const Tensor& x, std::size_t axis, bool keepdim = false) {
  return detail::reduce_axis(x, axis, keepdim, true, "mean");
}

inline Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  auto n = detail::result_node({1}, {s}, {x});
  if (n->requires_grad) {
    n->backward_fn = [](detail::Node& nd) {
      auto& in = *nd.inputs[0];
      if (!in.requires_grad) return;
      in.ensure_grad();
      for (auto& gv : in.grad) gv += nd.grad[0];
    };
  }
  return Tensor(n);
}

inline Tensor mean_all(const Tensor& x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

// ---------------------------------------------------------------------------
// LayerNorm over the last dimension.

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.ndim() < 1) tensor_fail("layer_norm: rank-0 input");
  const std::int64_t c = x.shape().back();
  if (gain.numel() != c || bias.numel() != c)
    tensor_fail("layer_norm: gain/bias length must equal last dim " + std::to_string(c));
  const std::int64_t rows = x.numel() / c;
  std::vector<double> out(x.values().size());
  std::vector<double> mu(static_cast<std::size_t>(rows)), rstd(static_cast<std::size_t>(rows));
  const double* p = x.data();
  const double* pg = gain.data();
  const double* pb = bias.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = p + r * c;
    double m = 0.0;
    for (std::int64_t j = 0; j < c; ++j) m += row[j];
    m /= static_cast<double>(c);
    double var = 0.0;
    for (std::int64_t j = 0; j < c; ++j) var += (row[j] - m) * (row[j] - m);
    var /= static_cast<double>(c);
    const double rs = 1.0 / std::sqrt(var + eps);
    mu[r] = m;
    rstd[r] = rs;
    for (std::int64_t j = 0; j < c; ++j) out[r * c + j] = (row[j] - m) * rs * pg[j] + pb[j];
  }
  auto n = detail::result_node(x.shape(), std::move(out), {x, gain, bias});
  if (n->requires_grad) {
    n->backward_fn = [rows, c, mu, rstd](detail::Node& nd) {
      auto& nx = *nd.inputs[0];
      auto& ng = *nd.inputs[1];
      auto& nb = *nd.inputs[2];
      if (nx.requires_grad) nx.ensure_grad();
      if (ng.requires_grad) ng.ensure_grad();
      if (nb.requires_grad) nb.ensure_grad();
      const double cinv = 1.0 / static_cast<double>(c);
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* xrow = nx.value.data() + r * c;
        const double* grow = nd.grad.data() + r * c;
        const double m = mu[r], rs = rstd[r];
        if (ng.requires_grad || nb.requires_grad) {
          for (std::int64_t j = 0; j < c; ++j) {
            const double xhat = (xrow[j] - m) * rs;
            if (ng.requires_grad) ng.grad[j] += grow[j] * xhat;
            if (nb.requires_grad) nb.grad[j] += grow[j];
          }
        }
        if (nx.requires_grad) {
          // dL/dx = rs * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
          double s1 = 0.0, s2 = 0.0;
          for (std::int64_t j = 0; j < c; ++j) {
            const double xhat = (xrow[j] - m) * rs;
            const double dxhat = grow[j] * ng.value[j];
            s1 += dxhat;
            s2 += dxhat * xhat;
          }
          s1 *= cinv;
          s2 *= cinv;
          for (std::int64_t j = 0; j < c; ++j) {
            const double xhat = (xrow[j] - m) * rs;
            const double dxhat = grow[j] * ng.value[j];
            nx.grad[r * c + j] += rs * (dxhat - s1 - xhat * s2);
          }
        }
      }
    };
  }
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// Structural ops

inline Tensor reshape(const Tensor& x, Shape new_shape) {
  if (numel_of(new_shape) != x.numel())
    tensor_fail("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
  auto n = detail::result_node(std::move(new_shape), x.values(), {x});
  if (n->requires_grad) {
    n->backward_fn = [](detail::Node& nd) {
      auto& in = *nd.inputs[0];
      if (!in.requires_grad) return;
      in.ensure_grad();
      for (std::size_t i = 0; i < nd.grad.size(); ++i) in.grad[i] += nd.grad[i];
    };
  }
  return Tensor(n);
}

inline Tensor transpose(const Tensor& x, const std::vector<std::size_t>& perm) {
  if (perm.size() != x.ndim()) tensor_fail("transpose: perm rank mismatch");
  std::vector<bool> used(perm.size(), false);
  Shape out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= perm.size() || used[perm[i]]) tensor_fail("transpose: invalid permutation");
    used[perm[i]] = true;
    out_shape[i] = x.shape()[perm[i]];
  }
  const auto in_strides = detail::row_major_strides(x.shape());
  std::vector<std::int64_t> gather_strides(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) gather_strides[i] = in_strides[perm[i]];
  const std::int64_t total = x.numel();
  std::vector<double> out(static_cast<std::size_t>(total));
  std::vector<std::int64_t> src_of(static_cast<std::size_t>(total));
  const std::vector<std::int64_t> zero(out_shape.size(), 0);
  const double* p = x.data();
  detail::for_each_broadcast(out_shape, gather_strides, zero,
                             [&](std::int64_t flat, std::int64_t off, std::int64_t) {
                               out[flat] = p[off];
                               src_of[flat] = off;
                             });
  auto n = detail::result_node(std::move(out_shape), std::move(out), {x});
  if (n->requires_grad) {
    n->backward_fn = [src_of](detail::Node& nd) {
      auto& in = *nd.inputs[0];
      if (!in.requires_grad) return;
      in.ensure_grad();
      for (std::size_t i = 0; i < nd.grad.size(); ++i) in.grad[src_of[i]] += nd.grad[i];
    };
  }
  return Tensor(n);
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) tensor_fail("concat: no inputs");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) tensor_fail("concat: axis out of bounds");
  Shape out_shape = ref;
  std::int64_t total_axis = 0;
  for (const auto& t : parts) {
    if (t.ndim() != ref.size()) tensor_fail("concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i)
      if (i != axis && t.shape()[i] != ref[i])
        tensor_fail("concat: shape mismatch " + shape_str(t.shape()) + " vs " + shape_str(ref));
    total_axis += t.shape()[axis];
  }
  out_shape[axis] = total_axis;
  const auto g = detail::axis_geometry(out_shape, axis, "concat");
  std::vector<double> out(static_cast<std::size_t>(numel_of(out_shape)));
  std::int64_t axis_off = 0;
  for (const auto& t : parts) {
    const std::int64_t ext = t.shape()[axis];
    const double* p = t.data();
    for (std::int64_t o = 0; o < g.outer; ++o)
      std::copy(p + o * ext * g.inner, p + (o + 1) * ext * g.inner,
                out.begin() + (o * total_axis + axis_off) * g.inner);
    axis_off += ext;
  }
  bool req = false;
  if (detail::grad_mode())
    for (const auto& t : parts) req = req || t.requires_grad();
  auto n = detail::make_node(std::move(out_shape), std::move(out), req);
  if (req) {
    for (const auto& t : parts) n->inputs.push_back(t.ptr());
    std::vector<std::int64_t> extents;
    for (const auto& t : parts) extents.push_back(t.shape()[axis]);
    n->backward_fn = [g, total_axis, extents](detail::Node& nd) {
      std::int64_t off = 0;
      for (std::size_t i = 0; i < nd.inputs.size(); ++i) {
        auto& in = *nd.inputs[i];
        const std::int64_t ext = extents[i];
        if (in.requires_grad) {
          in.ensure_grad();
          for (std::int64_t o = 0; o < g.outer; ++o) {
            const double* src = nd.grad.data() + (o * total_axis + off) * g.inner;
            double* dst = in.grad.data() + o * ext * g.inner;
            for (std::int64_t j = 0; j < ext * g.inner; ++j) dst[j] += src[j];
          }
        }
        off += ext;
      }
    };
  }
  return Tensor(n);
}

inline Tensor slice(const Tensor& x, std::size_t axis, std::int64_t start, std::int64_t len) {
  const auto g = detail::axis_geometry(x.shape(), axis, "slice");
  if (start < 0 || len < 1 || start + len > g.extent)
    tensor_fail("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                ") out of bounds for extent " + std::to_string(g.extent));
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  std::vector<double> out(static_cast<std::size_t>(numel_of(out_shape)));
  const double* p = x.data();
  for (std::int64_t o = 0; o < g.outer; ++o)
    std::copy(p + (o * g.extent + start) * g.inner, p + (o * g.extent + start + len) * g.inner,
              out.begin() + o * len * g.inner);
  auto n = detail::result_node(std::move(out_shape), std::move(out), {x});
  if (n->requires_grad) {
    n->backward_fn = [g, start, len](detail::Node& nd) {
      auto& in = *nd.inputs[0];
      if (!in.requires_grad) return;
      in.ensure_grad();
      for (std::int64_t o = 0; o < g.outer; ++o) {
        const double* src = nd.grad.data() + o * len * g.inner;
        double* dst = in.grad.data() + (o * g.extent + start) * g.inner;
        for (std::int64_t j = 0; j < len * g.inner; ++j) dst[j] += src[j];
      }
    };
  }
  return Tensor(n);
}

// Row gather on axis 0: out[i] = x[indices[i]].
inline Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& indices) {
  if (x.ndim() < 1) tensor_fail("gather_rows: rank-0 input");
  const std::int64_t rows = x.shape()[0];
  const std::int64_t row_len = x.numel() / rows;
  for (auto i : indices)
    if (i < 0 || i >= rows)
      tensor_fail("gather_rows: index " + std::to_string(i) + " out of range [0," +
                  std::to_string(rows) + ")");
  Shape out_shape = x.shape();
  out_shape[0] = static_cast<std::int64_t>(indices.size());
  std::vector<double> out(static_cast<std::size_t>(row_len) * indices.size());
  const double* p = x.data();
  for (std::size_t i = 0; i < indices.size(); ++i)
    std::copy(p + indices[i] * row_len, p + (indices[i] + 1) * row_len,
              out.begin() + static_cast<std::int64_t>(i) * row_len);
  auto n = detail::result_node(std::move(out_shape), std::move(out), {x});
  if (n->requires_grad) {
    n->backward_fn = [indices, row_len](detail::Node& nd) {
      auto& in = *nd.inputs[0];
      if (!in.requires_grad) return;
      in.ensure_grad();
      for (std::size_t i = 0; i < indices.size(); ++i) {
        const double* src = nd.grad.data() + static_cast<std::int64_t>(i) * row_len;
        double* dst = in.grad.data() + indices[i] * row_len;
        for (std::int64_t j = 0; j < row_len; ++j) dst[j] += src[j];
      }
    };
  }
  return Tensor(n);
}

// Element gather by flat index: out is 1-D of length indices.size().
inline Tensor take_flat(const Tensor& x, const std::vector<std::int64_t>& indices) {
  const std::int64_t total = x.numel();
  for (auto i : indices)
    if (i < 0 || i >= total)
      tensor_fail("take_flat: index " + std::to_string(i) + " out of range [0," +
                  std::to_string(total) + ")");
  std::vector<double> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) out[i] = x.data()[indices[i]];
  auto n = detail::result_node({static_cast<std::int64_t>(indices.size())}, std::move(out), {x});
  if (n->requires_grad) {
    n->backward_fn = [indices](detail::Node& nd) {
      auto& in = *nd.inputs[0];
      if (!in.requires_grad) return;
      in.ensure_grad();
      for (std::size_t i = 0; i < indices.size(); ++i) in.grad[indices[i]] += nd.grad[i];
    };
  }
  return Tensor(n);
}

}  // namespace pit
