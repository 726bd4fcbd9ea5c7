#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mtvision/errors.hpp"

namespace mtv {

// All tensor math runs in double: keeps seeded runs bit-identical and makes
// finite-difference gradient checks meaningful at 1e-3 relative tolerance.
using Real = double;
using Shape = std::vector<int>;

long shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {
struct Node;
}

/// Reverse-mode autograd tensor. Value semantics over a shared graph node;
/// the graph lives as long as some downstream tensor references it.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& s, bool requires_grad = false);
  static Tensor full(const Shape& s, Real v, bool requires_grad = false);
  static Tensor from_vector(const Shape& s, std::vector<Real> v, bool requires_grad = false);
  static Tensor scalar(Real v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int dim(int i) const;
  int ndim() const;
  long numel() const;

  Real* data();
  const Real* data() const;
  Real item() const;

  bool requires_grad() const;
  void set_requires_grad(bool v);

  /// Gradient buffer (allocated lazily; empty vector if untouched).
  const std::vector<Real>& grad() const;
  bool has_grad() const;
  void zero_grad();

  /// Backpropagate from this scalar tensor, accumulating into every
  /// requires_grad ancestor. Deterministic order.
  void backward();

  /// Same value buffer, detached from the graph (constant).
  Tensor detach() const;

  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// ---------- elementwise ----------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, Real v);
Tensor mul_scalar(const Tensor& a, Real v);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor atan(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor clamp_min(const Tensor& a, Real v);
Tensor clamp_max(const Tensor& a, Real v);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

// ---------- reductions ----------
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// ---------- shape ----------
Tensor reshape(const Tensor& a, const Shape& s);
Tensor permute(const Tensor& a, const std::vector<int>& axes);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, int start, int len);

// ---------- linear algebra ----------
/// (m,k) x (k,n) -> (m,n)
Tensor matmul(const Tensor& a, const Tensor& b);
/// Batched matmul: (B,m,k) x (B,k,n) -> (B,m,n); trans flags swap the last two
/// axes of the respective operand.
Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
/// x (..., Din) x w (Din, Dout) + b (Dout, optional) -> (..., Dout)
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// ---------- NCHW ops ----------
/// x (N,C,H,W), w (O,C,kh,kw), b (O) optional undefined -> (N,O,H',W')
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor upsample_nearest2x(const Tensor& x);
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                  Real eps = 1e-5);
/// Normalize over the last dimension.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps = 1e-5);
/// Channel-wise broadcast over (N,C,...) rasters or (C) applied at axis 1.
Tensor mul_channel(const Tensor& x, const Tensor& v);
Tensor add_channel(const Tensor& x, const Tensor& v);

// ---------- gather / scatter ----------
struct GridLoc {
  int n, y, x;
};
/// x (N,C,H,W), locations -> (M,C)
Tensor gather_locations(const Tensor& x, const std::vector<GridLoc>& locs);
/// x (N,C,H,W) -> (C, y1-y0, x1-x0) crop of sample n
Tensor crop_hw(const Tensor& x, int n, int y0, int y1, int x0, int x1);
/// table (V,D), ids (flat, values in [0,V)) -> (out_prefix..., D)
Tensor embedding(const Tensor& table, const std::vector<int>& ids, const Shape& out_prefix);

// ---------- softmax & losses ----------
/// Softmax over the last dimension; optional additive mask (same shape as the
/// trailing dims of a, broadcast over leading ones, treated as constant).
Tensor softmax_lastdim(const Tensor& a, const Tensor* additive_mask = nullptr);
/// Stable elementwise binary cross-entropy on logits, mean over all elements.
bool all_finite(const Tensor& t);

Tensor bce_with_logits_mean(const Tensor& logits, const Tensor& targets);
/// Row-wise softmax cross-entropy on (N,C) logits vs integer targets; rows
/// where valid[i]==0 are excluded from numerator and denominator. Returns 0
/// when no row is valid.
Tensor softmax_xent_mean(const Tensor& logits, const std::vector<int>& targets,
                         const std::vector<std::uint8_t>* valid = nullptr);

}  // namespace mtv
