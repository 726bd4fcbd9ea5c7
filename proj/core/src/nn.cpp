#include "mtvision/nn.hpp"

#include <cmath>

#include "mtvision/errors.hpp"

namespace mtv::nn {

Tensor ParamRegistry::create(const std::string& name, const Shape& shape,
                             std::vector<Real> init, bool decay) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  Tensor t = Tensor::from_vector(shape, std::move(init), /*requires_grad=*/true);
  index_[name] = entries_.size();
  entries_.push_back({name, t, decay});
  return t;
}

Tensor ParamRegistry::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return entries_[it->second].t;
}

long ParamRegistry::total_numel() const {
  long n = 0;
  for (const auto& e : entries_) n += e.t.numel();
  return n;
}

long ParamRegistry::numel_with_prefix(const std::string& prefix) const {
  long n = 0;
  for (const auto& e : entries_)
    if (e.name.rfind(prefix, 0) == 0) n += e.t.numel();
  return n;
}

void ParamRegistry::zero_grad_all() {
  for (auto& e : entries_) e.t.zero_grad();
}

std::vector<Real> kaiming_normal(int fan_in, long count, Rng& rng) {
  const Real std = std::sqrt(2.0 / static_cast<Real>(fan_in));
  std::vector<Real> v(static_cast<size_t>(count));
  for (auto& x : v) x = rng.normal() * std;
  return v;
}

std::vector<Real> xavier_uniform(int fan_in, int fan_out, long count, Rng& rng) {
  const Real lim = std::sqrt(6.0 / static_cast<Real>(fan_in + fan_out));
  std::vector<Real> v(static_cast<size_t>(count));
  for (auto& x : v) x = rng.uniform(-lim, lim);
  return v;
}

std::vector<Real> normal_init(long count, Real stddev, Rng& rng) {
  std::vector<Real> v(static_cast<size_t>(count));
  for (auto& x : v) x = rng.normal() * stddev;
  return v;
}

Conv::Conv(ParamRegistry& reg, const std::string& name, int cin, int cout, int k, int stride,
           Rng& rng, bool bias)
    : stride(stride), pad(k / 2) {
  const int fan_in = cin * k * k;
  w = reg.create(name + ".w", {cout, cin, k, k}, kaiming_normal(fan_in, (long)cout * cin * k * k, rng),
                 /*decay=*/true);
  if (bias)
    b = reg.create(name + ".b", {cout}, std::vector<Real>(static_cast<size_t>(cout), 0.0),
                   /*decay=*/false);
}

Tensor Conv::forward(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }

GroupNorm::GroupNorm(ParamRegistry& reg, const std::string& name, int channels, int groups)
    : groups(groups) {
  gamma = reg.create(name + ".gamma", {channels},
                     std::vector<Real>(static_cast<size_t>(channels), 1.0), false);
  beta = reg.create(name + ".beta", {channels},
                    std::vector<Real>(static_cast<size_t>(channels), 0.0), false);
}

Tensor GroupNorm::forward(const Tensor& x) const { return group_norm(x, gamma, beta, groups); }

namespace {
int pick_groups(int channels) {
  for (int g : {8, 4, 2})
    if (channels % g == 0) return g;
  return 1;
}
}  // namespace

ConvBlock::ConvBlock(ParamRegistry& reg, const std::string& name, int cin, int cout, int k,
                     int stride, Rng& rng)
    : conv(reg, name + ".conv", cin, cout, k, stride, rng, /*bias=*/false),
      norm(reg, name + ".norm", cout, pick_groups(cout)) {}

Tensor ConvBlock::forward(const Tensor& x) const { return silu(norm.forward(conv.forward(x))); }

Linear::Linear(ParamRegistry& reg, const std::string& name, int din, int dout, Rng& rng,
               bool bias) {
  w = reg.create(name + ".w", {din, dout}, xavier_uniform(din, dout, (long)din * dout, rng), true);
  if (bias)
    b = reg.create(name + ".b", {dout}, std::vector<Real>(static_cast<size_t>(dout), 0.0), false);
}

Tensor Linear::forward(const Tensor& x) const { return linear(x, w, b); }

LayerNorm::LayerNorm(ParamRegistry& reg, const std::string& name, int dim) {
  gamma = reg.create(name + ".gamma", {dim}, std::vector<Real>(static_cast<size_t>(dim), 1.0),
                     false);
  beta = reg.create(name + ".beta", {dim}, std::vector<Real>(static_cast<size_t>(dim), 0.0),
                    false);
}

Tensor LayerNorm::forward(const Tensor& x) const { return layer_norm(x, gamma, beta); }

AdamW::AdamW(std::vector<ParamGroup> groups, double beta1, double beta2, double eps)
    : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& g : groups_) {
    if (g.params.size() != g.decay.size())
      throw ConfigError("optimizer group '" + g.name + "': decay flag count mismatch");
    for (const auto& p : g.params) {
      m_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
      v_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
    }
  }
}

void AdamW::step(double lr) {
  step(std::vector<double>(groups_.size(), lr));
}

void AdamW::step(const std::vector<double>& group_lrs) {
  if (group_lrs.size() != groups_.size())
    throw ShapeError("AdamW::step: one learning rate per group required");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  std::size_t slot = 0;
  for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
    auto& g = groups_[gi];
    const double lr = group_lrs[gi];
    for (std::size_t i = 0; i < g.params.size(); ++i, ++slot) {
      Tensor& p = g.params[i];
      if (!p.has_grad()) continue;  // parameter untouched by this step's graph
      const auto& grad = p.grad();
      auto& m = m_[slot];
      auto& v = v_[slot];
      Real* w = p.data();
      const double wd = g.decay[i] ? g.weight_decay : 0.0;
      for (std::size_t k = 0; k < grad.size(); ++k) {
        m[k] = beta1_ * m[k] + (1.0 - beta1_) * grad[k];
        v[k] = beta2_ * v[k] + (1.0 - beta2_) * grad[k] * grad[k];
        const double mhat = m[k] / bc1;
        const double vhat = v[k] / bc2;
        w[k] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd * w[k]);
      }
    }
  }
}

void AdamW::zero_grad() {
  for (auto& g : groups_)
    for (auto& p : g.params) p.zero_grad();
}

}  // namespace mtv::nn
