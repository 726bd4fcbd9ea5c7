#include "mtvision/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace mtv {

long shape_numel(const Shape& s) {
  long n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::shared_ptr<std::vector<Real>> values;
  std::vector<Real> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backfn;

  long numel() const { return shape_numel(shape); }
  Real* data() { return values->data(); }
  const Real* data() const { return values->data(); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(static_cast<size_t>(numel()), 0.0);
  }
};

}  // namespace detail

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

namespace {

NodePtr make_leaf(const Shape& s, std::vector<Real> v, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->shape = s;
  n->values = std::make_shared<std::vector<Real>>(std::move(v));
  n->requires_grad = requires_grad;
  return n;
}

Tensor make_op(const Shape& s, std::vector<Real> v, std::vector<NodePtr> parents,
               std::function<void(Node&)> backfn) {
  auto n = std::make_shared<Node>();
  n->shape = s;
  n->values = std::make_shared<std::vector<Real>>(std::move(v));
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  n->requires_grad = rg;
  if (rg) {
    n->parents = std::move(parents);
    n->backfn = std::move(backfn);
  }
  return Tensor(n);
}

// Shares the value buffer instead of copying (reshape/detach).
Tensor make_op_aliased(const Shape& s, std::shared_ptr<std::vector<Real>> v,
                       std::vector<NodePtr> parents, std::function<void(Node&)> backfn) {
  auto n = std::make_shared<Node>();
  n->shape = s;
  n->values = std::move(v);
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  n->requires_grad = rg;
  if (rg) {
    n->parents = std::move(parents);
    n->backfn = std::move(backfn);
  }
  return Tensor(n);
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " vs " +
                   shape_str(b));
}

void check_same_shape(const char* op, const NodePtr& a, const NodePtr& b) {
  if (a->shape != b->shape) shape_fail(op, a->shape, b->shape);
}

using MatRM = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

}  // namespace

// ---------------- Tensor methods ----------------

Tensor Tensor::zeros(const Shape& s, bool requires_grad) {
  return Tensor(make_leaf(s, std::vector<Real>(static_cast<size_t>(shape_numel(s)), 0.0),
                          requires_grad));
}

Tensor Tensor::full(const Shape& s, Real v, bool requires_grad) {
  return Tensor(make_leaf(s, std::vector<Real>(static_cast<size_t>(shape_numel(s)), v),
                          requires_grad));
}

Tensor Tensor::from_vector(const Shape& s, std::vector<Real> v, bool requires_grad) {
  if (static_cast<long>(v.size()) != shape_numel(s))
    throw ShapeError("from_vector: " + std::to_string(v.size()) + " values for shape " +
                     shape_str(s));
  return Tensor(make_leaf(s, std::move(v), requires_grad));
}

Tensor Tensor::scalar(Real v) { return from_vector({1}, {v}); }

const Shape& Tensor::shape() const { return node_->shape; }
int Tensor::dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
int Tensor::ndim() const { return static_cast<int>(node_->shape.size()); }
long Tensor::numel() const { return node_->numel(); }
Real* Tensor::data() { return node_->data(); }
const Real* Tensor::data() const { return node_->data(); }

Real Tensor::item() const {
  if (numel() != 1) throw ShapeError("item(): tensor has " + std::to_string(numel()) + " elements");
  return (*node_->values)[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool v) { node_->requires_grad = v; }

const std::vector<Real>& Tensor::grad() const { return node_->grad; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const {
  auto n = std::make_shared<Node>();
  n->shape = node_->shape;
  n->values = node_->values;
  n->requires_grad = false;
  return Tensor(n);
}

void Tensor::backward() {
  if (numel() != 1) throw ShapeError("backward() from non-scalar tensor");
  if (!node_->requires_grad) return;

  // iterative post-order DFS for a deterministic topological order
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx].get();
      ++idx;
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backfn && !n->grad.empty()) n->backfn(*n);
  }
}

// ---------------- elementwise ----------------

namespace {

template <class FwdFn, class BwdFn>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, FwdFn fwd, BwdFn bwd) {
  check_same_shape(name, a.node(), b.node());
  const size_t n = static_cast<size_t>(a.numel());
  std::vector<Real> out(n);
  const Real* pa = a.data();
  const Real* pb = b.data();
  for (size_t i = 0; i < n; ++i) out[i] = fwd(pa[i], pb[i]);
  auto an = a.node();
  auto bn = b.node();
  return make_op(a.shape(), std::move(out), {an, bn}, [an, bn, bwd](Node& self) {
    const size_t m = self.grad.size();
    const Real* pa2 = an->data();
    const Real* pb2 = bn->data();
    Real* ga = nullptr;
    Real* gb = nullptr;
    if (an->requires_grad) {
      an->ensure_grad();
      ga = an->grad.data();
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      gb = bn->grad.data();
    }
    for (size_t i = 0; i < m; ++i) {
      Real da, db;
      bwd(pa2[i], pb2[i], self.grad[i], da, db);
      if (ga) ga[i] += da;
      if (gb) gb[i] += db;
    }
  });
}

template <class FwdFn, class DervFn>
Tensor unary_op(const Tensor& a, FwdFn fwd, DervFn derv) {
  const size_t n = static_cast<size_t>(a.numel());
  std::vector<Real> out(n);
  const Real* pa = a.data();
  for (size_t i = 0; i < n; ++i) out[i] = fwd(pa[i]);
  auto an = a.node();
  return make_op(a.shape(), std::move(out), {an}, [an, derv](Node& self) {
    an->ensure_grad();
    const Real* pa2 = an->data();
    Real* ga = an->grad.data();
    for (size_t i = 0; i < self.grad.size(); ++i) ga[i] += derv(pa2[i]) * self.grad[i];
  });
}

Real stable_sigmoid(Real z) {
  if (z >= 0) {
    const Real e = std::exp(-z);
    return 1.0 / (1.0 + e);
  }
  const Real e = std::exp(z);
  return e / (1.0 + e);
}

Real stable_softplus(Real z) {
  if (z > 30) return z;
  if (z < -30) return std::exp(z);
  return std::log1p(std::exp(z));
}

constexpr Real kInvSqrt2 = 0.70710678118654752440;
constexpr Real kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](Real x, Real y) { return x + y; },
      [](Real, Real, Real g, Real& da, Real& db) {
        da = g;
        db = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](Real x, Real y) { return x - y; },
      [](Real, Real, Real g, Real& da, Real& db) {
        da = g;
        db = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](Real x, Real y) { return x * y; },
      [](Real x, Real y, Real g, Real& da, Real& db) {
        da = g * y;
        db = g * x;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](Real x, Real y) { return x / y; },
      [](Real x, Real y, Real g, Real& da, Real& db) {
        da = g / y;
        db = -g * x / (y * y);
      });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary_op(
      "minimum", a, b, [](Real x, Real y) { return x <= y ? x : y; },
      [](Real x, Real y, Real g, Real& da, Real& db) {
        da = x <= y ? g : 0;
        db = x <= y ? 0 : g;
      });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary_op(
      "maximum", a, b, [](Real x, Real y) { return x >= y ? x : y; },
      [](Real x, Real y, Real g, Real& da, Real& db) {
        da = x >= y ? g : 0;
        db = x >= y ? 0 : g;
      });
}

Tensor add_scalar(const Tensor& a, Real v) {
  return unary_op(a, [v](Real x) { return x + v; }, [](Real) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, Real v) {
  return unary_op(a, [v](Real x) { return x * v; }, [v](Real) { return v; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor exp(const Tensor& a) {
  return unary_op(a, [](Real x) { return std::exp(x); }, [](Real x) { return std::exp(x); });
}

Tensor log(const Tensor& a) {
  return unary_op(a, [](Real x) { return std::log(x); }, [](Real x) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary_op(a, [](Real x) { return std::sqrt(x); },
                  [](Real x) { return 0.5 / std::sqrt(x); });
}

Tensor atan(const Tensor& a) {
  return unary_op(a, [](Real x) { return std::atan(x); },
                  [](Real x) { return 1.0 / (1.0 + x * x); });
}

Tensor square(const Tensor& a) {
  return unary_op(a, [](Real x) { return x * x; }, [](Real x) { return 2.0 * x; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(a, [](Real x) { return stable_sigmoid(x); },
                  [](Real x) {
                    const Real s = stable_sigmoid(x);
                    return s * (1.0 - s);
                  });
}

Tensor silu(const Tensor& a) {
  return unary_op(a,
                  [](Real x) { return x * stable_sigmoid(x); },
                  [](Real x) {
                    const Real s = stable_sigmoid(x);
                    return s * (1.0 + x * (1.0 - s));
                  });
}

Tensor gelu(const Tensor& a) {
  return unary_op(a,
                  [](Real x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
                  [](Real x) {
                    const Real cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                    const Real pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                    return cdf + x * pdf;
                  });
}

Tensor softplus(const Tensor& a) {
  return unary_op(a, [](Real x) { return stable_softplus(x); },
                  [](Real x) { return stable_sigmoid(x); });
}

Tensor clamp_min(const Tensor& a, Real v) {
  return unary_op(a, [v](Real x) { return x < v ? v : x; },
                  [v](Real x) { return x > v ? 1.0 : 0.0; });
}

Tensor clamp_max(const Tensor& a, Real v) {
  return unary_op(a, [v](Real x) { return x > v ? v : x; },
                  [v](Real x) { return x < v ? 1.0 : 0.0; });
}

// ---------------- reductions ----------------

Tensor sum(const Tensor& a) {
  Real s = 0;
  const Real* p = a.data();
  const size_t n = static_cast<size_t>(a.numel());
  for (size_t i = 0; i < n; ++i) s += p[i];
  auto an = a.node();
  return make_op({1}, {s}, {an}, [an](Node& self) {
    an->ensure_grad();
    const Real g = self.grad[0];
    for (auto& v : an->grad) v += g;
  });
}

Tensor mean(const Tensor& a) {
  const long n = a.numel();
  if (n == 0) throw ShapeError("mean of empty tensor");
  return mul_scalar(sum(a), 1.0 / static_cast<Real>(n));
}

// ---------------- shape ops ----------------

Tensor reshape(const Tensor& a, const Shape& s) {
  Shape out = s;
  long known = 1;
  int infer = -1;
  for (size_t i = 0; i < out.size(); ++i) {
    if (out[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one -1");
      infer = static_cast<int>(i);
    } else {
      known *= out[i];
    }
  }
  if (infer >= 0) out[static_cast<size_t>(infer)] = static_cast<int>(a.numel() / known);
  if (shape_numel(out) != a.numel()) shape_fail("reshape", a.shape(), out);
  auto an = a.node();
  return make_op_aliased(out, an->values, {an}, [an](Node& self) {
    an->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
  });
}

namespace {

std::vector<long> row_major_strides(const Shape& s) {
  std::vector<long> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[static_cast<size_t>(i)] = st[static_cast<size_t>(i) + 1] * s[static_cast<size_t>(i) + 1];
  return st;
}

}  // namespace

Tensor permute(const Tensor& a, const std::vector<int>& axes) {
  const auto& in_shape = a.shape();
  const size_t nd = in_shape.size();
  if (axes.size() != nd) throw ShapeError("permute: axes rank mismatch");
  Shape out_shape(nd);
  for (size_t i = 0; i < nd; ++i) out_shape[i] = in_shape[static_cast<size_t>(axes[i])];

  const auto in_strides = row_major_strides(in_shape);
  std::vector<long> gather_strides(nd);
  for (size_t i = 0; i < nd; ++i) gather_strides[i] = in_strides[static_cast<size_t>(axes[i])];

  const long n = a.numel();
  std::vector<Real> out(static_cast<size_t>(n));
  const Real* src = a.data();
  // walk output indices in row-major order
  std::vector<int> idx(nd, 0);
  long src_off = 0;
  for (long o = 0; o < n; ++o) {
    out[static_cast<size_t>(o)] = src[src_off];
    for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
      idx[static_cast<size_t>(d)]++;
      src_off += gather_strides[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
      src_off -= gather_strides[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
      idx[static_cast<size_t>(d)] = 0;
    }
  }

  auto an = a.node();
  return make_op(out_shape, std::move(out), {an},
                 [an, gather_strides, out_shape, nd](Node& self) {
                   an->ensure_grad();
                   std::vector<int> idx2(nd, 0);
                   long off = 0;
                   const long m = self.numel();
                   for (long o = 0; o < m; ++o) {
                     an->grad[static_cast<size_t>(off)] += self.grad[static_cast<size_t>(o)];
                     for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
                       idx2[static_cast<size_t>(d)]++;
                       off += gather_strides[static_cast<size_t>(d)];
                       if (idx2[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
                       off -= gather_strides[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
                       idx2[static_cast<size_t>(d)] = 0;
                     }
                   }
                 });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const auto& s0 = parts[0].shape();
  const size_t nd = s0.size();
  const size_t ax = static_cast<size_t>(axis);
  if (ax >= nd) throw ShapeError("concat: bad axis");
  Shape out_shape = s0;
  int total = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != nd) shape_fail("concat", s0, s);
    for (size_t i = 0; i < nd; ++i)
      if (i != ax && s[i] != s0[i]) shape_fail("concat", s0, s);
    total += s[ax];
  }
  out_shape[ax] = total;

  long outer = 1, inner = 1;
  for (size_t i = 0; i < ax; ++i) outer *= s0[i];
  for (size_t i = ax + 1; i < nd; ++i) inner *= s0[i];

  std::vector<Real> out(static_cast<size_t>(shape_numel(out_shape)));
  const long out_row = static_cast<long>(total) * inner;
  long col_off = 0;
  for (const auto& p : parts) {
    const long rows = p.shape()[ax] * inner;
    const Real* src = p.data();
    for (long o = 0; o < outer; ++o)
      std::memcpy(out.data() + o * out_row + col_off, src + o * rows,
                  static_cast<size_t>(rows) * sizeof(Real));
    col_off += rows;
  }

  std::vector<NodePtr> parents;
  parents.reserve(parts.size());
  for (const auto& p : parts) parents.push_back(p.node());
  std::vector<long> part_rows;
  for (const auto& p : parts) part_rows.push_back(static_cast<long>(p.shape()[ax]) * inner);

  return make_op(out_shape, std::move(out), parents,
                 [parents, part_rows, outer, out_row](Node& self) {
                   long off = 0;
                   for (size_t k = 0; k < parents.size(); ++k) {
                     const auto& pn = parents[k];
                     const long rows = part_rows[k];
                     if (pn->requires_grad) {
                       pn->ensure_grad();
                       for (long o = 0; o < outer; ++o) {
                         const Real* g = self.grad.data() + o * out_row + off;
                         Real* dst = pn->grad.data() + o * rows;
                         for (long i = 0; i < rows; ++i) dst[i] += g[i];
                       }
                     }
                     off += rows;
                   }
                 });
}

Tensor slice(const Tensor& a, int axis, int start, int len) {
  const auto& s = a.shape();
  const size_t ax = static_cast<size_t>(axis);
  if (ax >= s.size() || start < 0 || len < 0 || start + len > s[ax])
    throw ShapeError("slice: bad range on axis " + std::to_string(axis) + " of " +
                     shape_str(s));
  Shape out_shape = s;
  out_shape[ax] = len;
  long outer = 1, inner = 1;
  for (size_t i = 0; i < ax; ++i) outer *= s[i];
  for (size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const long in_row = static_cast<long>(s[ax]) * inner;
  const long out_row = static_cast<long>(len) * inner;
  const long off0 = static_cast<long>(start) * inner;

  std::vector<Real> out(static_cast<size_t>(outer * out_row));
  const Real* src = a.data();
  for (long o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * out_row, src + o * in_row + off0,
                static_cast<size_t>(out_row) * sizeof(Real));

  auto an = a.node();
  return make_op(out_shape, std::move(out), {an}, [an, outer, in_row, out_row, off0](Node& self) {
    an->ensure_grad();
    for (long o = 0; o < outer; ++o) {
      const Real* g = self.grad.data() + o * out_row;
      Real* dst = an->grad.data() + o * in_row + off0;
      for (long i = 0; i < out_row; ++i) dst[i] += g[i];
    }
  });
}

// ---------------- linear algebra ----------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) shape_fail("matmul", a.shape(), b.shape());
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<Real> out(static_cast<size_t>(m) * n);
  CMapRM A(a.data(), m, k), B(b.data(), k, n);
  MapRM C(out.data(), m, n);
  C.noalias() = A * B;
  auto an = a.node();
  auto bn = b.node();
  return make_op({m, n}, std::move(out), {an, bn}, [an, bn, m, k, n](Node& self) {
    CMapRM G(self.grad.data(), m, n);
    if (an->requires_grad) {
      an->ensure_grad();
      MapRM dA(an->grad.data(), m, k);
      CMapRM B2(bn->data(), k, n);
      dA.noalias() += G * B2.transpose();
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      MapRM dB(bn->grad.data(), k, n);
      CMapRM A2(an->data(), m, k);
      dB.noalias() += A2.transpose() * G;
    }
  });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0)) shape_fail("bmm", a.shape(), b.shape());
  const int batch = a.dim(0);
  const int am = trans_a ? a.dim(2) : a.dim(1);
  const int ak = trans_a ? a.dim(1) : a.dim(2);
  const int bk = trans_b ? b.dim(2) : b.dim(1);
  const int bn = trans_b ? b.dim(1) : b.dim(2);
  if (ak != bk) shape_fail("bmm", a.shape(), b.shape());

  const long a_sz = static_cast<long>(a.dim(1)) * a.dim(2);
  const long b_sz = static_cast<long>(b.dim(1)) * b.dim(2);
  const long o_sz = static_cast<long>(am) * bn;
  std::vector<Real> out(static_cast<size_t>(batch) * o_sz);
  for (int i = 0; i < batch; ++i) {
    CMapRM A(a.data() + i * a_sz, a.dim(1), a.dim(2));
    CMapRM B(b.data() + i * b_sz, b.dim(1), b.dim(2));
    MapRM C(out.data() + i * o_sz, am, bn);
    if (!trans_a && !trans_b)
      C.noalias() = A * B;
    else if (trans_a && !trans_b)
      C.noalias() = A.transpose() * B;
    else if (!trans_a && trans_b)
      C.noalias() = A * B.transpose();
    else
      C.noalias() = A.transpose() * B.transpose();
  }

  auto an = a.node();
  auto bn_ = b.node();
  const int ad1 = a.dim(1), ad2 = a.dim(2), bd1 = b.dim(1), bd2 = b.dim(2);
  return make_op({batch, am, bn}, std::move(out), {an, bn_},
                 [an, bn_, batch, am, bn, a_sz, b_sz, o_sz, ad1, ad2, bd1, bd2, trans_a,
                  trans_b](Node& self) {
                   for (int i = 0; i < batch; ++i) {
                     CMapRM G(self.grad.data() + i * o_sz, am, bn);
                     CMapRM A(an->data() + i * a_sz, ad1, ad2);
                     CMapRM B(bn_->data() + i * b_sz, bd1, bd2);
                     if (an->requires_grad) {
                       an->ensure_grad();
                       MapRM dA(an->grad.data() + i * a_sz, ad1, ad2);
                       if (!trans_a && !trans_b)
                         dA.noalias() += G * B.transpose();
                       else if (trans_a && !trans_b)
                         dA.noalias() += B * G.transpose();
                       else if (!trans_a && trans_b)
                         dA.noalias() += G * B;
                       else
                         dA.noalias() += B.transpose() * G.transpose();
                     }
                     if (bn_->requires_grad) {
                       bn_->ensure_grad();
                       MapRM dB(bn_->grad.data() + i * b_sz, bd1, bd2);
                       if (!trans_a && !trans_b)
                         dB.noalias() += A.transpose() * G;
                       else if (trans_a && !trans_b)
                         dB.noalias() += A * G;
                       else if (!trans_a && trans_b)
                         dB.noalias() += G.transpose() * A;
                       else
                         dB.noalias() += G.transpose() * A.transpose();
                     }
                   }
                 });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.ndim() != 2) throw ShapeError("linear: weight must be 2-D");
  const int din = w.dim(0), dout = w.dim(1);
  if (x.dim(x.ndim() - 1) != din) shape_fail("linear", x.shape(), w.shape());
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != dout)) shape_fail("linear bias", b.shape(), w.shape());
  const long rows = x.numel() / din;

  std::vector<Real> out(static_cast<size_t>(rows) * dout);
  CMapRM X(x.data(), rows, din), W(w.data(), din, dout);
  MapRM O(out.data(), rows, dout);
  O.noalias() = X * W;
  if (b.defined()) {
    CMapRM B(b.data(), 1, dout);
    O.rowwise() += B.row(0);
  }

  Shape out_shape = x.shape();
  out_shape.back() = dout;
  auto xn = x.node();
  auto wn = w.node();
  std::vector<NodePtr> parents{xn, wn};
  NodePtr bn;
  if (b.defined()) {
    bn = b.node();
    parents.push_back(bn);
  }
  return make_op(out_shape, std::move(out), parents, [xn, wn, bn, rows, din, dout](Node& self) {
    CMapRM G(self.grad.data(), rows, dout);
    if (xn->requires_grad) {
      xn->ensure_grad();
      MapRM dX(xn->grad.data(), rows, din);
      CMapRM W2(wn->data(), din, dout);
      dX.noalias() += G * W2.transpose();
    }
    if (wn->requires_grad) {
      wn->ensure_grad();
      MapRM dW(wn->grad.data(), din, dout);
      CMapRM X2(xn->data(), rows, din);
      dW.noalias() += X2.transpose() * G;
    }
    if (bn && bn->requires_grad) {
      bn->ensure_grad();
      Eigen::Map<Eigen::Matrix<Real, 1, Eigen::Dynamic>> dB(bn->grad.data(), dout);
      dB += G.colwise().sum();
    }
  });
}

// ---------------- conv2d ----------------

namespace {

void im2col(const Real* x, int C, int H, int W, int kh, int kw, int stride, int pad, int oh,
            int ow, Real* col) {
  const long L = static_cast<long>(oh) * ow;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        Real* dst = col + ((static_cast<long>(c) * kh + ky) * kw + kx) * L;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= H) {
            std::memset(dst + static_cast<long>(oy) * ow, 0, static_cast<size_t>(ow) * sizeof(Real));
            continue;
          }
          const Real* src_row = x + (static_cast<long>(c) * H + iy) * W;
          Real* d = dst + static_cast<long>(oy) * ow;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - pad;
            d[ox] = (ix >= 0 && ix < W) ? src_row[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const Real* col, int C, int H, int W, int kh, int kw, int stride, int pad,
                int oh, int ow, Real* dx) {
  const long L = static_cast<long>(oh) * ow;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const Real* src = col + ((static_cast<long>(c) * kh + ky) * kw + kx) * L;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= H) continue;
          Real* dst_row = dx + (static_cast<long>(c) * H + iy) * W;
          const Real* s = src + static_cast<long>(oy) * ow;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < W) dst_row[ix] += s[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  if (x.ndim() != 4 || w.ndim() != 4 || x.dim(1) != w.dim(1)) shape_fail("conv2d", x.shape(), w.shape());
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int oh = (H + 2 * pad - kh) / stride + 1;
  const int ow = (W + 2 * pad - kw) / stride + 1;
  if (oh <= 0 || ow <= 0) throw ShapeError("conv2d: empty output for input " + shape_str(x.shape()));
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != O)) shape_fail("conv2d bias", b.shape(), w.shape());

  const long ckk = static_cast<long>(C) * kh * kw;
  const long L = static_cast<long>(oh) * ow;
  std::vector<Real> out(static_cast<size_t>(N) * O * L);
  std::vector<Real> col(static_cast<size_t>(ckk) * L);
  for (int n = 0; n < N; ++n) {
    im2col(x.data() + static_cast<long>(n) * C * H * W, C, H, W, kh, kw, stride, pad, oh, ow,
           col.data());
    CMapRM Wm(w.data(), O, ckk), Col(col.data(), ckk, L);
    MapRM Out(out.data() + static_cast<long>(n) * O * L, O, L);
    Out.noalias() = Wm * Col;
    if (b.defined()) Out.colwise() += Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, 1>>(b.data(), O);
  }

  auto xn = x.node();
  auto wn = w.node();
  std::vector<NodePtr> parents{xn, wn};
  NodePtr bn;
  if (b.defined()) {
    bn = b.node();
    parents.push_back(bn);
  }
  return make_op({N, O, oh, ow}, std::move(out), parents,
                 [xn, wn, bn, N, C, H, W, O, kh, kw, stride, pad, oh, ow, ckk, L](Node& self) {
                   std::vector<Real> col(static_cast<size_t>(ckk) * L);
                   std::vector<Real> dcol;
                   if (xn->requires_grad) {
                     xn->ensure_grad();
                     dcol.resize(static_cast<size_t>(ckk) * L);
                   }
                   if (wn->requires_grad) wn->ensure_grad();
                   if (bn && bn->requires_grad) bn->ensure_grad();
                   for (int n = 0; n < N; ++n) {
                     CMapRM G(self.grad.data() + static_cast<long>(n) * O * L, O, L);
                     if (wn->requires_grad || xn->requires_grad)
                       im2col(xn->data() + static_cast<long>(n) * C * H * W, C, H, W, kh, kw,
                              stride, pad, oh, ow, col.data());
                     if (wn->requires_grad) {
                       MapRM dW(wn->grad.data(), O, ckk);
                       CMapRM Col(col.data(), ckk, L);
                       dW.noalias() += G * Col.transpose();
                     }
                     if (xn->requires_grad) {
                       MapRM dCol(dcol.data(), ckk, L);
                       CMapRM Wm(wn->data(), O, ckk);
                       dCol.noalias() = Wm.transpose() * G;
                       col2im_add(dcol.data(), C, H, W, kh, kw, stride, pad, oh, ow,
                                  xn->grad.data() + static_cast<long>(n) * C * H * W);
                     }
                     if (bn && bn->requires_grad) {
                       Eigen::Map<Eigen::Matrix<Real, Eigen::Dynamic, 1>> dB(bn->grad.data(), O);
                       dB += G.rowwise().sum();
                     }
                   }
                 });
}

Tensor upsample_nearest2x(const Tensor& x) {
  if (x.ndim() != 4) throw ShapeError("upsample_nearest2x: need NCHW");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int OH = H * 2, OW = W * 2;
  std::vector<Real> out(static_cast<size_t>(N) * C * OH * OW);
  const Real* src = x.data();
  for (long nc = 0; nc < static_cast<long>(N) * C; ++nc) {
    const Real* sp = src + nc * H * W;
    Real* dp = out.data() + nc * OH * OW;
    for (int y = 0; y < OH; ++y) {
      const Real* srow = sp + (y / 2) * W;
      Real* drow = dp + static_cast<long>(y) * OW;
      for (int xx = 0; xx < OW; ++xx) drow[xx] = srow[xx / 2];
    }
  }
  auto xn = x.node();
  return make_op({N, C, OH, OW}, std::move(out), {xn}, [xn, N, C, H, W, OH, OW](Node& self) {
    xn->ensure_grad();
    for (long nc = 0; nc < static_cast<long>(N) * C; ++nc) {
      Real* dst = xn->grad.data() + nc * H * W;
      const Real* g = self.grad.data() + nc * OH * OW;
      for (int y = 0; y < OH; ++y)
        for (int xx = 0; xx < OW; ++xx) dst[(y / 2) * W + xx / 2] += g[static_cast<long>(y) * OW + xx];
    }
  });
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups, Real eps) {
  if (x.ndim() != 4) throw ShapeError("group_norm: need NCHW");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (C % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
  if (gamma.numel() != C || beta.numel() != C) shape_fail("group_norm affine", gamma.shape(), x.shape());
  const int cg = C / groups;
  const long hw = static_cast<long>(H) * W;
  const long gsz = cg * hw;

  std::vector<Real> out(static_cast<size_t>(x.numel()));
  std::vector<Real> means(static_cast<size_t>(N) * groups), invs(static_cast<size_t>(N) * groups);
  const Real* px = x.data();
  const Real* pg = gamma.data();
  const Real* pb = beta.data();
  for (int n = 0; n < N; ++n) {
    for (int g = 0; g < groups; ++g) {
      const Real* base = px + (static_cast<long>(n) * C + static_cast<long>(g) * cg) * hw;
      Real m = 0;
      for (long i = 0; i < gsz; ++i) m += base[i];
      m /= static_cast<Real>(gsz);
      Real var = 0;
      for (long i = 0; i < gsz; ++i) {
        const Real d = base[i] - m;
        var += d * d;
      }
      var /= static_cast<Real>(gsz);
      const Real inv = 1.0 / std::sqrt(var + eps);
      means[static_cast<size_t>(n) * groups + g] = m;
      invs[static_cast<size_t>(n) * groups + g] = inv;
      Real* o = out.data() + (static_cast<long>(n) * C + static_cast<long>(g) * cg) * hw;
      for (int c = 0; c < cg; ++c) {
        const Real ga = pg[g * cg + c], be = pb[g * cg + c];
        for (long i = 0; i < hw; ++i) {
          const long k = c * hw + i;
          o[k] = (base[k] - m) * inv * ga + be;
        }
      }
    }
  }

  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  return make_op(x.shape(), std::move(out), {xn, gn, bn},
                 [xn, gn, bn, N, C, groups, cg, hw, gsz, means, invs](Node& self) {
                   const Real* px2 = xn->data();
                   const Real* pg2 = gn->data();
                   if (xn->requires_grad) xn->ensure_grad();
                   if (gn->requires_grad) gn->ensure_grad();
                   if (bn->requires_grad) bn->ensure_grad();
                   for (int n = 0; n < N; ++n) {
                     for (int g = 0; g < groups; ++g) {
                       const long base_off = (static_cast<long>(n) * C + static_cast<long>(g) * cg) * hw;
                       const Real m = means[static_cast<size_t>(n) * groups + g];
                       const Real inv = invs[static_cast<size_t>(n) * groups + g];
                       const Real* xb = px2 + base_off;
                       const Real* gy = self.grad.data() + base_off;
                       // per-channel affine grads
                       if (gn->requires_grad || bn->requires_grad) {
                         for (int c = 0; c < cg; ++c) {
                           Real dg = 0, db = 0;
                           for (long i = 0; i < hw; ++i) {
                             const long k = c * hw + i;
                             dg += gy[k] * (xb[k] - m) * inv;
                             db += gy[k];
                           }
                           if (gn->requires_grad) gn->grad[static_cast<size_t>(g) * cg + c] += dg;
                           if (bn->requires_grad) bn->grad[static_cast<size_t>(g) * cg + c] += db;
                         }
                       }
                       if (xn->requires_grad) {
                         Real sum_dxh = 0, sum_dxh_xh = 0;
                         for (int c = 0; c < cg; ++c) {
                           const Real ga = pg2[g * cg + c];
                           for (long i = 0; i < hw; ++i) {
                             const long k = c * hw + i;
                             const Real dxh = gy[k] * ga;
                             const Real xh = (xb[k] - m) * inv;
                             sum_dxh += dxh;
                             sum_dxh_xh += dxh * xh;
                           }
                         }
                         const Real inv_gsz = 1.0 / static_cast<Real>(gsz);
                         Real* dx = xn->grad.data() + base_off;
                         for (int c = 0; c < cg; ++c) {
                           const Real ga = pg2[g * cg + c];
                           for (long i = 0; i < hw; ++i) {
                             const long k = c * hw + i;
                             const Real dxh = gy[k] * ga;
                             const Real xh = (xb[k] - m) * inv;
                             dx[k] += inv * (dxh - inv_gsz * sum_dxh - xh * inv_gsz * sum_dxh_xh);
                           }
                         }
                       }
                     }
                   }
                 });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps) {
  const int D = x.dim(x.ndim() - 1);
  if (gamma.numel() != D || beta.numel() != D) shape_fail("layer_norm affine", gamma.shape(), x.shape());
  const long rows = x.numel() / D;

  std::vector<Real> out(static_cast<size_t>(x.numel()));
  std::vector<Real> means(static_cast<size_t>(rows)), invs(static_cast<size_t>(rows));
  const Real* px = x.data();
  const Real* pg = gamma.data();
  const Real* pb = beta.data();
  for (long r = 0; r < rows; ++r) {
    const Real* xr = px + r * D;
    Real m = 0;
    for (int i = 0; i < D; ++i) m += xr[i];
    m /= D;
    Real var = 0;
    for (int i = 0; i < D; ++i) {
      const Real d = xr[i] - m;
      var += d * d;
    }
    var /= D;
    const Real inv = 1.0 / std::sqrt(var + eps);
    means[static_cast<size_t>(r)] = m;
    invs[static_cast<size_t>(r)] = inv;
    Real* o = out.data() + r * D;
    for (int i = 0; i < D; ++i) o[i] = (xr[i] - m) * inv * pg[i] + pb[i];
  }

  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  return make_op(x.shape(), std::move(out), {xn, gn, bn},
                 [xn, gn, bn, rows, D, means, invs](Node& self) {
                   const Real* px2 = xn->data();
                   const Real* pg2 = gn->data();
                   if (xn->requires_grad) xn->ensure_grad();
                   if (gn->requires_grad) gn->ensure_grad();
                   if (bn->requires_grad) bn->ensure_grad();
                   for (long r = 0; r < rows; ++r) {
                     const Real* xr = px2 + r * D;
                     const Real* gy = self.grad.data() + r * D;
                     const Real m = means[static_cast<size_t>(r)];
                     const Real inv = invs[static_cast<size_t>(r)];
                     Real sum_dxh = 0, sum_dxh_xh = 0;
                     for (int i = 0; i < D; ++i) {
                       const Real xh = (xr[i] - m) * inv;
                       const Real dxh = gy[i] * pg2[i];
                       sum_dxh += dxh;
                       sum_dxh_xh += dxh * xh;
                       if (gn->requires_grad) gn->grad[static_cast<size_t>(i)] += gy[i] * xh;
                       if (bn->requires_grad) bn->grad[static_cast<size_t>(i)] += gy[i];
                     }
                     if (xn->requires_grad) {
                       Real* dx = xn->grad.data() + r * D;
                       for (int i = 0; i < D; ++i) {
                         const Real xh = (xr[i] - m) * inv;
                         const Real dxh = gy[i] * pg2[i];
                         dx[i] += inv * (dxh - sum_dxh / D - xh * sum_dxh_xh / D);
                       }
                     }
                   }
                 });
}

namespace {

Tensor channel_broadcast_op(const char* name, const Tensor& x, const Tensor& v, bool is_mul) {
  if (x.ndim() < 2) throw ShapeError(std::string(name) + ": rank < 2");
  const int C = x.dim(1);
  if (v.numel() != C) shape_fail(name, v.shape(), x.shape());
  long inner = 1;
  for (int i = 2; i < x.ndim(); ++i) inner *= x.dim(i);
  const int N = x.dim(0);

  std::vector<Real> out(static_cast<size_t>(x.numel()));
  const Real* px = x.data();
  const Real* pv = v.data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const long off = (static_cast<long>(n) * C + c) * inner;
      const Real s = pv[c];
      if (is_mul)
        for (long i = 0; i < inner; ++i) out[static_cast<size_t>(off + i)] = px[off + i] * s;
      else
        for (long i = 0; i < inner; ++i) out[static_cast<size_t>(off + i)] = px[off + i] + s;
    }

  auto xn = x.node();
  auto vn = v.node();
  return make_op(x.shape(), std::move(out), {xn, vn}, [xn, vn, N, C, inner, is_mul](Node& self) {
    const Real* px2 = xn->data();
    const Real* pv2 = vn->data();
    if (xn->requires_grad) xn->ensure_grad();
    if (vn->requires_grad) vn->ensure_grad();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const long off = (static_cast<long>(n) * C + c) * inner;
        const Real* g = self.grad.data() + off;
        if (xn->requires_grad) {
          Real* dx = xn->grad.data() + off;
          if (is_mul) {
            const Real s = pv2[c];
            for (long i = 0; i < inner; ++i) dx[i] += g[i] * s;
          } else {
            for (long i = 0; i < inner; ++i) dx[i] += g[i];
          }
        }
        if (vn->requires_grad) {
          Real acc = 0;
          if (is_mul)
            for (long i = 0; i < inner; ++i) acc += g[i] * px2[off + i];
          else
            for (long i = 0; i < inner; ++i) acc += g[i];
          vn->grad[static_cast<size_t>(c)] += acc;
        }
      }
  });
}

}  // namespace

Tensor mul_channel(const Tensor& x, const Tensor& v) {
  return channel_broadcast_op("mul_channel", x, v, true);
}

Tensor add_channel(const Tensor& x, const Tensor& v) {
  return channel_broadcast_op("add_channel", x, v, false);
}

// ---------------- gather / scatter ----------------

Tensor gather_locations(const Tensor& x, const std::vector<GridLoc>& locs) {
  if (x.ndim() != 4) throw ShapeError("gather_locations: need NCHW");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int M = static_cast<int>(locs.size());
  for (const auto& l : locs)
    if (l.n < 0 || l.n >= N || l.y < 0 || l.y >= H || l.x < 0 || l.x >= W)
      throw ShapeError("gather_locations: location out of bounds");

  std::vector<Real> out(static_cast<size_t>(M) * C);
  const Real* px = x.data();
  const long hw = static_cast<long>(H) * W;
  for (int m = 0; m < M; ++m) {
    const auto& l = locs[static_cast<size_t>(m)];
    const long base = static_cast<long>(l.n) * C * hw + static_cast<long>(l.y) * W + l.x;
    for (int c = 0; c < C; ++c) out[static_cast<size_t>(m) * C + c] = px[base + c * hw];
  }
  auto xn = x.node();
  return make_op({M, C}, std::move(out), {xn}, [xn, locs, C, hw, W](Node& self) {
    xn->ensure_grad();
    const int M2 = static_cast<int>(locs.size());
    for (int m = 0; m < M2; ++m) {
      const auto& l = locs[static_cast<size_t>(m)];
      const long base = static_cast<long>(l.n) * C * hw + static_cast<long>(l.y) * W + l.x;
      for (int c = 0; c < C; ++c) xn->grad[static_cast<size_t>(base + c * hw)] += self.grad[static_cast<size_t>(m) * C + c];
    }
  });
}

Tensor crop_hw(const Tensor& x, int n, int y0, int y1, int x0, int x1) {
  if (x.ndim() != 4) throw ShapeError("crop_hw: need NCHW");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (n < 0 || n >= N || y0 < 0 || y1 > H || x0 < 0 || x1 > W || y0 >= y1 || x0 >= x1)
    throw ShapeError("crop_hw: bad crop window");
  const int ch = y1 - y0, cw = x1 - x0;
  std::vector<Real> out(static_cast<size_t>(C) * ch * cw);
  const Real* px = x.data();
  const long hw = static_cast<long>(H) * W;
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < ch; ++y)
      std::memcpy(out.data() + (static_cast<long>(c) * ch + y) * cw,
                  px + static_cast<long>(n) * C * hw + c * hw + static_cast<long>(y0 + y) * W + x0,
                  static_cast<size_t>(cw) * sizeof(Real));
  auto xn = x.node();
  return make_op({C, ch, cw}, std::move(out), {xn}, [xn, n, C, ch, cw, hw, W, y0, x0](Node& self) {
    xn->ensure_grad();
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < ch; ++y) {
        const Real* g = self.grad.data() + (static_cast<long>(c) * ch + y) * cw;
        Real* dst = xn->grad.data() + static_cast<long>(n) * C * hw + c * hw +
                    static_cast<long>(y0 + y) * W + x0;
        for (int xx = 0; xx < cw; ++xx) dst[xx] += g[xx];
      }
  });
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids, const Shape& out_prefix) {
  if (table.ndim() != 2) throw ShapeError("embedding: table must be 2-D");
  const int V = table.dim(0), D = table.dim(1);
  if (static_cast<long>(ids.size()) != shape_numel(out_prefix))
    throw ShapeError("embedding: ids count does not match prefix shape");
  for (int id : ids)
    if (id < 0 || id >= V) throw RangeError("embedding: id out of range");

  std::vector<Real> out(ids.size() * static_cast<size_t>(D));
  const Real* pt = table.data();
  for (size_t i = 0; i < ids.size(); ++i)
    std::memcpy(out.data() + i * D, pt + static_cast<long>(ids[i]) * D,
                static_cast<size_t>(D) * sizeof(Real));

  Shape out_shape = out_prefix;
  out_shape.push_back(D);
  auto tn = table.node();
  return make_op(out_shape, std::move(out), {tn}, [tn, ids, D](Node& self) {
    tn->ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i) {
      const Real* g = self.grad.data() + i * D;
      Real* dst = tn->grad.data() + static_cast<size_t>(ids[i]) * D;
      for (int d = 0; d < D; ++d) dst[d] += g[d];
    }
  });
}

// ---------------- softmax & losses ----------------

Tensor softmax_lastdim(const Tensor& a, const Tensor* additive_mask) {
  const int D = a.dim(a.ndim() - 1);
  const long rows = a.numel() / D;
  long mask_rows = 0;
  const Real* pm = nullptr;
  if (additive_mask) {
    if (additive_mask->shape().back() != D || a.numel() % additive_mask->numel() != 0)
      shape_fail("softmax mask", additive_mask->shape(), a.shape());
    mask_rows = additive_mask->numel() / D;
    pm = additive_mask->data();
  }

  std::vector<Real> out(static_cast<size_t>(a.numel()));
  const Real* px = a.data();
  for (long r = 0; r < rows; ++r) {
    const Real* xr = px + r * D;
    const Real* mr = pm ? pm + (r % mask_rows) * D : nullptr;
    Real mx = -std::numeric_limits<Real>::infinity();
    for (int i = 0; i < D; ++i) mx = std::max(mx, xr[i] + (mr ? mr[i] : 0.0));
    Real z = 0;
    Real* o = out.data() + r * D;
    for (int i = 0; i < D; ++i) {
      o[i] = std::exp(xr[i] + (mr ? mr[i] : 0.0) - mx);
      z += o[i];
    }
    for (int i = 0; i < D; ++i) o[i] /= z;
  }

  auto an = a.node();
  auto out_copy = out;  // backward needs y
  return make_op(a.shape(), std::move(out), {an}, [an, rows, D, y = std::move(out_copy)](Node& self) {
    an->ensure_grad();
    for (long r = 0; r < rows; ++r) {
      const Real* yr = y.data() + r * D;
      const Real* gy = self.grad.data() + r * D;
      Real dot = 0;
      for (int i = 0; i < D; ++i) dot += gy[i] * yr[i];
      Real* dx = an->grad.data() + r * D;
      for (int i = 0; i < D; ++i) dx[i] += yr[i] * (gy[i] - dot);
    }
  });
}

bool all_finite(const Tensor& t) {
  const Real* p = t.data();
  const size_t n = static_cast<size_t>(t.numel());
  for (size_t i = 0; i < n; ++i)
    if (!std::isfinite(p[i])) return false;
  return true;
}

Tensor bce_with_logits_mean(const Tensor& logits, const Tensor& targets) {
  check_same_shape("bce_with_logits", logits.node(), targets.node());
  const size_t n = static_cast<size_t>(logits.numel());
  if (n == 0) throw ShapeError("bce_with_logits: empty input");
  const Real* pz = logits.data();
  const Real* pt = targets.data();
  Real acc = 0;
  for (size_t i = 0; i < n; ++i) {
    const Real z = pz[i], t = pt[i];
    acc += std::max(z, 0.0) - z * t + stable_softplus(-std::abs(z));
  }
  acc /= static_cast<Real>(n);
  auto zn = logits.node();
  auto tn = targets.node();
  return make_op({1}, {acc}, {zn, tn}, [zn, tn, n](Node& self) {
    const Real g = self.grad[0] / static_cast<Real>(n);
    const Real* pz2 = zn->data();
    const Real* pt2 = tn->data();
    if (zn->requires_grad) {
      zn->ensure_grad();
      for (size_t i = 0; i < n; ++i)
        zn->grad[i] += g * (stable_sigmoid(pz2[i]) - pt2[i]);
    }
    if (tn->requires_grad) {
      tn->ensure_grad();
      for (size_t i = 0; i < n; ++i) tn->grad[i] += g * (-pz2[i]);
    }
  });
}

Tensor softmax_xent_mean(const Tensor& logits, const std::vector<int>& targets,
                         const std::vector<std::uint8_t>* valid) {
  if (logits.ndim() != 2) throw ShapeError("softmax_xent: logits must be (N,C)");
  const int N = logits.dim(0), C = logits.dim(1);
  if (static_cast<int>(targets.size()) != N) throw ShapeError("softmax_xent: target count mismatch");
  if (valid && static_cast<int>(valid->size()) != N) throw ShapeError("softmax_xent: valid mask size mismatch");

  long n_valid = 0;
  Real acc = 0;
  const Real* pz = logits.data();
  for (int r = 0; r < N; ++r) {
    if (valid && !(*valid)[static_cast<size_t>(r)]) continue;
    const int t = targets[static_cast<size_t>(r)];
    if (t < 0 || t >= C) throw RangeError("softmax_xent: target id out of range");
    const Real* zr = pz + static_cast<long>(r) * C;
    Real mx = zr[0];
    for (int i = 1; i < C; ++i) mx = std::max(mx, zr[i]);
    Real z = 0;
    for (int i = 0; i < C; ++i) z += std::exp(zr[i] - mx);
    acc += mx + std::log(z) - zr[t];
    ++n_valid;
  }
  if (n_valid == 0) return Tensor::scalar(0.0);
  acc /= static_cast<Real>(n_valid);

  auto zn = logits.node();
  std::vector<std::uint8_t> vcopy = valid ? *valid : std::vector<std::uint8_t>();
  return make_op({1}, {acc}, {zn}, [zn, targets, vcopy, N, C, n_valid](Node& self) {
    zn->ensure_grad();
    const Real g = self.grad[0] / static_cast<Real>(n_valid);
    const Real* pz2 = zn->data();
    for (int r = 0; r < N; ++r) {
      if (!vcopy.empty() && !vcopy[static_cast<size_t>(r)]) continue;
      const Real* zr = pz2 + static_cast<long>(r) * C;
      Real mx = zr[0];
      for (int i = 1; i < C; ++i) mx = std::max(mx, zr[i]);
      Real z = 0;
      for (int i = 0; i < C; ++i) z += std::exp(zr[i] - mx);
      Real* dz = zn->grad.data() + static_cast<long>(r) * C;
      const int t = targets[static_cast<size_t>(r)];
      for (int i = 0; i < C; ++i) {
        const Real p = std::exp(zr[i] - mx) / z;
        dz[i] += g * (p - (i == t ? 1.0 : 0.0));
      }
    }
  });
}

}  // namespace mtv
