#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mtvision/rng.hpp"
#include "mtvision/tensor.hpp"

namespace mtv::nn {

// Owns every trainable tensor of a model, in registration order.  Order is
// what makes optimizer state and checkpoints reproducible, so layers must
// register their parameters deterministically.
class ParamRegistry {
 public:
  // decay: whether AdamW weight decay applies to this tensor.
  Tensor create(const std::string& name, const Shape& shape, std::vector<Real> init, bool decay);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor get(const std::string& name) const;

  std::size_t size() const { return entries_.size(); }
  const std::string& name(std::size_t i) const { return entries_[i].name; }
  Tensor tensor(std::size_t i) const { return entries_[i].t; }
  bool decay(std::size_t i) const { return entries_[i].decay; }

  long total_numel() const;
  long numel_with_prefix(const std::string& prefix) const;
  void zero_grad_all();

 private:
  struct Entry {
    std::string name;
    Tensor t;
    bool decay;
  };
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---- initializers ----
std::vector<Real> kaiming_normal(int fan_in, long count, Rng& rng);
std::vector<Real> xavier_uniform(int fan_in, int fan_out, long count, Rng& rng);
std::vector<Real> normal_init(long count, Real stddev, Rng& rng);

// ---- layers ----

struct Conv {
  Tensor w, b;
  int stride = 1, pad = 0;

  Conv() = default;
  Conv(ParamRegistry& reg, const std::string& name, int cin, int cout, int k, int stride,
       Rng& rng, bool bias = true);
  Tensor forward(const Tensor& x) const;
};

struct GroupNorm {
  Tensor gamma, beta;
  int groups = 1;

  GroupNorm() = default;
  GroupNorm(ParamRegistry& reg, const std::string& name, int channels, int groups);
  Tensor forward(const Tensor& x) const;
};

// conv -> group norm -> SiLU
struct ConvBlock {
  Conv conv;
  GroupNorm norm;

  ConvBlock() = default;
  ConvBlock(ParamRegistry& reg, const std::string& name, int cin, int cout, int k, int stride,
            Rng& rng);
  Tensor forward(const Tensor& x) const;
};

struct Linear {
  Tensor w, b;

  Linear() = default;
  Linear(ParamRegistry& reg, const std::string& name, int din, int dout, Rng& rng,
         bool bias = true);
  Tensor forward(const Tensor& x) const;
};

struct LayerNorm {
  Tensor gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamRegistry& reg, const std::string& name, int dim);
  Tensor forward(const Tensor& x) const;
};

// ---- optimizer ----

struct ParamGroup {
  std::string name;
  std::vector<Tensor> params;
  std::vector<std::uint8_t> decay;
  double weight_decay = 0.0;
};

// Decoupled-weight-decay Adam.  One step count shared across groups; the
// learning rate is supplied per step so schedules live outside.
class AdamW {
 public:
  AdamW(std::vector<ParamGroup> groups, double beta1, double beta2, double eps);

  void step(double lr);
  void step(const std::vector<double>& group_lrs);
  void zero_grad();

  const std::vector<ParamGroup>& groups() const { return groups_; }
  long step_count() const { return t_; }
  void set_step_count(long t) { t_ = t; }

  // moment buffers in group-major, parameter-major order, for checkpoints
  std::size_t slot_count() const { return m_.size(); }
  std::vector<Real>& moment1(std::size_t i) { return m_[i]; }
  std::vector<Real>& moment2(std::size_t i) { return v_[i]; }

 private:
  std::vector<ParamGroup> groups_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<Real>> m_, v_;
};

}  // namespace mtv::nn
